"""Self-describing checkpoint container.

Layout (little-endian)::

    "INFC", version u32, n_sections u32
    per section: name_len u16, name utf-8, kind u8 (0 f32, 1 f64, 2 text),
                 ndim u8, dims u32 x ndim, nbytes u64, payload

A checkpoint holds the run configuration (as text), each field's INR
architecture and weights, the normalization statistics and the processor.
Any subset may be present, which is how training stages write fragments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import NormalizationStats
from .inr import InrArchitecture, SharedInrWeights
from .processor import ProcessorWeights

MAGIC = b"INFC"
VERSION = 1
_KINDS = {0: "<f4", 1: "<f8"}
_TEXT = 2


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointSizeError(CheckpointError):
    pass


def pack_sections(sections: dict, precision: str = "f64") -> bytes:
    """Serialize ``name -> ndarray | str``; arrays are stored at ``precision``."""
    kind = {"f32": 0, "f64": 1}[precision]
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, value in sections.items():
        nb = name.encode()
        if isinstance(value, str):
            payload, k, shape = value.encode(), _TEXT, ()
        else:
            arr = np.ascontiguousarray(np.asarray(value, dtype=_KINDS[kind]))
            payload, k, shape = arr.tobytes(), kind, arr.shape
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", k, len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def unpack_sections(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        if len(buf) < 4:
            raise CheckpointTruncatedError("file shorter than the magic")
        raise CheckpointMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"need {n} bytes at offset {pos}, file has {len(buf)}")
        out = buf[pos : pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, reader supports {VERSION}")
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        kind, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        payload = take(nbytes)
        if kind == _TEXT:
            sections[name] = payload.decode()
            continue
        if kind not in _KINDS:
            raise CheckpointError(f"section {name}: unknown kind {kind}")
        dtype = np.dtype(_KINDS[kind])
        if nbytes != dtype.itemsize * int(np.prod(shape)):
            raise CheckpointSizeError(f"section {name}: {nbytes} bytes for shape {shape}")
        sections[name] = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointSizeError(f"{len(buf) - pos} trailing bytes after the last section")
    return sections


def _kv(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def _parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _arch_from_text(text: str) -> InrArchitecture:
    kv = _parse_kv(text)
    return InrArchitecture(
        input_dim=int(kv["input_dim"]),
        output_dim=int(kv["output_dim"]),
        num_fourier_features=int(kv["num_fourier_features"]),
        fourier_scale=float(kv["fourier_scale"]),
        depth=int(kv["depth"]),
        hidden_width=int(kv["hidden_width"]),
        latent_dim=int(kv["latent_dim"]),
        activation=kv["activation"],
    )


@dataclass
class Checkpoint:
    config_text: str = ""
    inrs: dict = field(default_factory=dict)
    processor: ProcessorWeights | None = None
    stats: NormalizationStats | None = None

    def to_sections(self) -> dict:
        s: dict = {"config": self.config_text}
        if self.stats is not None:
            for tag in self.stats.mean:
                s[f"norm/{tag}/mean"] = self.stats.mean[tag]
                s[f"norm/{tag}/std"] = self.stats.std[tag]
        for tag, w in self.inrs.items():
            a = w.arch
            s[f"inr/{tag}/arch"] = _kv({k: getattr(a, k) for k in a.__dataclass_fields__})
            for name, arr in w.state_dict().items():
                s[f"inr/{tag}/{name}"] = arr
        if self.processor is not None:
            s["processor/meta"] = _kv({"latent_dim": self.processor.latent_dim, "activation": self.processor.activation})
            for name, arr in self.processor.state_dict().items():
                s[f"processor/{name}"] = arr
        return s

    @classmethod
    def from_sections(cls, s: dict) -> "Checkpoint":
        ck = cls(config_text=s.get("config", ""))
        norm_tags = list(dict.fromkeys(k.split("/")[1] for k in s if k.startswith("norm/")))
        if norm_tags:
            ck.stats = NormalizationStats(
                {t: s[f"norm/{t}/mean"] for t in norm_tags}, {t: s[f"norm/{t}/std"] for t in norm_tags}
            )
        for tag in dict.fromkeys(k.split("/")[1] for k in s if k.startswith("inr/")):
            arch = _arch_from_text(s[f"inr/{tag}/arch"])
            prefix = f"inr/{tag}/"
            state = {k[len(prefix) :]: v for k, v in s.items() if k.startswith(prefix) and not k.endswith("/arch")}
            ck.inrs[tag] = SharedInrWeights.from_state_dict(arch, state, field_tag=tag)
        if "processor/meta" in s:
            meta = _parse_kv(s["processor/meta"])
            state = {k[len("processor/") :]: v for k, v in s.items() if k.startswith("processor/") and k != "processor/meta"}
            ck.processor = ProcessorWeights.from_state_dict(state, int(meta["latent_dim"]), meta["activation"])
        return ck

    def merge(self, other: "Checkpoint") -> "Checkpoint":
        """Fields present in ``other`` override this checkpoint's."""
        return Checkpoint(
            other.config_text or self.config_text,
            {**self.inrs, **other.inrs},
            other.processor or self.processor,
            other.stats or self.stats,
        )


def save_checkpoint(path, ck: Checkpoint, precision: str = "f64") -> None:
    Path(path).write_bytes(pack_sections(ck.to_sections(), precision))


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_sections(unpack_sections(Path(path).read_bytes()))
