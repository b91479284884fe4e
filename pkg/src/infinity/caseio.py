"""Little-endian binary case files and plain-text manifests.

Layout (all little-endian)::

    "INFY"            4 bytes magic
    version           u32 (= 1)
    n_vol, n_surf     u32, u32
    Vx, Vy, chord, V_inf, CL_ref, CD_ref     f32 x 6
    X_vol[n_vol x 2], d[n_vol], X_surf[n_surf x 2], n[n_surf x 2],
    vx[n_vol], vy[n_vol], p[n_vol], nut[n_vol], p_surf[n_surf]   f32 row-major

Payloads are stored in 32-bit, so a write/read round trip is bitwise for
any case whose arrays are already float32-representable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dataset import CaseSample

MAGIC = b"INFY"
VERSION = 1
_HEADER = struct.Struct("<4sIII6f")


class CaseFileError(ValueError):
    pass


class MagicMismatchError(CaseFileError):
    pass


class VersionMismatchError(CaseFileError):
    pass


class TruncatedCaseError(CaseFileError):
    pass


class CountMismatchError(CaseFileError):
    pass


def _layout(n_vol: int, n_surf: int) -> list:
    return [
        ("x_vol", (n_vol, 2)),
        ("d", (n_vol,)),
        ("x_surf", (n_surf, 2)),
        ("normals", (n_surf, 2)),
        ("vx", (n_vol,)),
        ("vy", (n_vol,)),
        ("p", (n_vol,)),
        ("nut", (n_vol,)),
        ("p_surf", (n_surf,)),
    ]


def encode_case(case: CaseSample) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        case.n_vol,
        case.n_surf,
        float(case.inlet_velocity[0]),
        float(case.inlet_velocity[1]),
        float(case.chord),
        float(case.freestream_speed),
        float(case.cl_ref),
        float(case.cd_ref),
    )
    parts = [header]
    for name, shape in _layout(case.n_vol, case.n_surf):
        arr = np.asarray(getattr(case, name), dtype="<f4")
        if arr.shape != shape:
            raise CountMismatchError(f"{name} has shape {arr.shape}, header implies {shape}")
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_case(buf: bytes, case_id: str = "case") -> CaseSample:
    if len(buf) < 4:
        raise TruncatedCaseError(f"{len(buf)} bytes is shorter than the magic")
    if buf[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedCaseError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, n_vol, n_surf, vx, vy, chord, vinf, cl, cd = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"case file version {version}, reader supports {VERSION}")
    if n_vol == 0 or n_surf == 0:
        raise CountMismatchError(f"header counts n_vol={n_vol}, n_surf={n_surf} must be positive")
    layout = _layout(n_vol, n_surf)
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for _, s in layout)
    if len(buf) < expected:
        raise TruncatedCaseError(f"payload truncated: {len(buf)} bytes, header implies {expected}")
    if len(buf) > expected:
        raise CountMismatchError(f"{len(buf) - expected} trailing bytes beyond the counts in the header")
    arrays, off = {}, _HEADER.size
    for name, shape in layout:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 4 * count
    return CaseSample(
        case_id=case_id,
        inlet_velocity=np.array([vx, vy], dtype=np.float64),
        chord=float(chord),
        freestream_speed=float(vinf),
        cl_ref=float(cl),
        cd_ref=float(cd),
        **arrays,
    )


def write_case(path, case: CaseSample) -> None:
    Path(path).write_bytes(encode_case(case))


def read_case(path, case_id: str | None = None) -> CaseSample:
    path = Path(path)
    return decode_case(path.read_bytes(), case_id or path.stem)


def write_manifest(path, entries) -> None:
    """``entries`` is an iterable of ``(case_path, split)`` pairs."""
    lines = [f"{Path(p).as_posix()}\t{split}" for p, split in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list:
    """``(absolute case path, split)`` pairs; relative paths resolve against the manifest."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: expected '<case path> <train|test>'")
        p = Path(parts[0])
        out.append((p if p.is_absolute() else path.parent / p, parts[1]))
    return out
