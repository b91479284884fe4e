import struct
from dataclasses import replace

import numpy as np
import pytest

from infinity.caseio import (
    CountMismatchError,
    MagicMismatchError,
    TruncatedCaseError,
    VersionMismatchError,
    decode_case,
    encode_case,
    read_case,
    read_manifest,
    write_case,
    write_manifest,
)
from infinity.checkpoint import (
    Checkpoint,
    CheckpointMagicError,
    CheckpointSizeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    pack_sections,
    save_checkpoint,
    unpack_sections,
)
from infinity.dataset import GeneratorConfig, fit_normalization, generate_case
from infinity.inr import FIELDS, InrArchitecture, SharedInrWeights
from infinity.processor import ProcessorConfig, ProcessorWeights

CASE_FIELDS = ("x_vol", "d", "x_surf", "normals", "vx", "vy", "p", "nut", "p_surf")


@pytest.fixture(scope="module")
def case():
    return generate_case(GeneratorConfig(n_vol=64, n_surf=16, seed=2), "c0")


def f32(case):
    return replace(case, **{k: getattr(case, k).astype(np.float32).astype(np.float64) for k in CASE_FIELDS})


# ---------------------------------------------------------------------------
# case files
# ---------------------------------------------------------------------------


def test_case_round_trip_is_bitwise(case, tmp_path):
    c = f32(case)
    write_case(tmp_path / "a.infy", c)
    back = read_case(tmp_path / "a.infy")
    assert back.case_id == "a"
    for k in CASE_FIELDS:
        assert getattr(back, k).tobytes() == getattr(c, k).tobytes(), k
    assert encode_case(back) == (tmp_path / "a.infy").read_bytes()
    assert back.cl_ref == np.float32(case.cl_ref)
    np.testing.assert_array_equal(back.inlet_velocity, case.inlet_velocity.astype(np.float32))


def test_case_header_layout(case):
    buf = encode_case(case)
    magic, version, nv, ns = struct.unpack_from("<4sIII", buf)
    assert (magic, version, nv, ns) == (b"INFY", 1, 64, 16)
    assert len(buf) == 16 + 24 + 4 * (64 * 2 + 64 + 16 * 2 + 16 * 2 + 4 * 64 + 16)
    # first payload value is X_vol[0, 0] in little-endian f32
    assert struct.unpack_from("<f", buf, 40)[0] == np.float32(case.x_vol[0, 0])


def test_case_magic_mismatch(case):
    with pytest.raises(MagicMismatchError):
        decode_case(b"INFX" + encode_case(case)[4:])


def test_case_version_mismatch(case):
    buf = bytearray(encode_case(case))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode_case(bytes(buf))


def test_case_truncated(case):
    buf = encode_case(case)
    with pytest.raises(TruncatedCaseError):
        decode_case(buf[:-4])
    with pytest.raises(TruncatedCaseError):
        decode_case(buf[:20])


def test_case_count_mismatch(case):
    buf = bytearray(encode_case(case))
    buf[8:12] = struct.pack("<I", 63)
    with pytest.raises(CountMismatchError):
        decode_case(bytes(buf))
    with pytest.raises(CountMismatchError):
        decode_case(encode_case(case) + b"\0\0\0\0")


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.txt", [("cases/a.infy", "train"), (tmp_path / "b.infy", "test")])
    entries = read_manifest(tmp_path / "m.txt")
    assert entries == [(tmp_path / "cases/a.infy", "train"), (tmp_path / "b.infy", "test")]
    (tmp_path / "bad.txt").write_text("a.infy validation\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.txt")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _checkpoint(case):
    rng = np.random.default_rng(0)
    arch = InrArchitecture(depth=2, hidden_width=8, latent_dim=4, num_fourier_features=4)
    inrs = {t: SharedInrWeights.initialize(InrArchitecture.for_field(t, depth=2, hidden_width=8, latent_dim=4, num_fourier_features=4), rng, t) for t in FIELDS}
    psi = ProcessorWeights.initialize(arch.latent_dim, ProcessorConfig(hidden_width=8, hidden_layers=2), rng)
    return Checkpoint("seed = 3\n", inrs, psi, fit_normalization([case]))


def _assert_same(a: Checkpoint, b: Checkpoint):
    assert a.config_text == b.config_text
    assert set(a.inrs) == set(b.inrs)
    for t in a.inrs:
        assert a.inrs[t].arch == b.inrs[t].arch
        for k, v in a.inrs[t].state_dict().items():
            assert np.asarray(v).tobytes() == np.asarray(b.inrs[t].state_dict()[k]).tobytes(), (t, k)
    for k, v in a.processor.state_dict().items():
        assert np.asarray(v).tobytes() == np.asarray(b.processor.state_dict()[k]).tobytes(), k
    for t in a.stats.mean:
        assert a.stats.mean[t].tobytes() == b.stats.mean[t].tobytes()
        assert a.stats.std[t].tobytes() == b.stats.std[t].tobytes()


def test_checkpoint_f64_round_trip_is_bitwise(case, tmp_path):
    ck = _checkpoint(case)
    save_checkpoint(tmp_path / "m.infc", ck)
    back = load_checkpoint(tmp_path / "m.infc")
    _assert_same(ck, back)
    save_checkpoint(tmp_path / "again.infc", back)
    assert (tmp_path / "again.infc").read_bytes() == (tmp_path / "m.infc").read_bytes()


def test_checkpoint_f32_is_stable_after_first_cast(case, tmp_path):
    save_checkpoint(tmp_path / "a.infc", _checkpoint(case), "f32")
    once = load_checkpoint(tmp_path / "a.infc")
    save_checkpoint(tmp_path / "b.infc", once, "f32")
    _assert_same(once, load_checkpoint(tmp_path / "b.infc"))
    assert (tmp_path / "b.infc").read_bytes() == (tmp_path / "a.infc").read_bytes()


def test_checkpoint_partial_and_merge(case):
    full = _checkpoint(case)
    geo = Checkpoint.from_sections(unpack_sections(pack_sections(Checkpoint(inrs={"d": full.inrs["d"]}).to_sections())))
    assert set(geo.inrs) == {"d"} and geo.processor is None and geo.stats is None
    merged = Checkpoint(stats=full.stats).merge(geo)
    assert merged.stats is full.stats and set(merged.inrs) == {"d"}


def test_checkpoint_magic_error(case):
    buf = pack_sections(_checkpoint(case).to_sections())
    with pytest.raises(CheckpointMagicError):
        unpack_sections(b"XNFC" + buf[4:])


def test_checkpoint_version_error(case):
    buf = bytearray(pack_sections(_checkpoint(case).to_sections()))
    buf[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointVersionError):
        unpack_sections(bytes(buf))


def test_checkpoint_truncated(case):
    buf = pack_sections(_checkpoint(case).to_sections())
    for cut in (2, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointTruncatedError):
            unpack_sections(buf[:cut])


def test_checkpoint_size_errors():
    buf = bytearray(pack_sections({"w": np.arange(3.0)}))
    # shape claims 3 values; shrink it to 2 so the byte count disagrees
    dims_at = 4 + 8 + 2 + 1 + 2
    buf[dims_at : dims_at + 4] = struct.pack("<I", 2)
    with pytest.raises(CheckpointSizeError):
        unpack_sections(bytes(buf))
    with pytest.raises(CheckpointSizeError):
        unpack_sections(pack_sections({"w": np.arange(3.0)}) + b"\0")
