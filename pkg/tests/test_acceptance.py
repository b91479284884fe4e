"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion.

The heavy checks (INR expressiveness, the 200/50 benchmark) take minutes to
an hour on one CPU core; everything else runs in seconds.
"""

import csv
import struct
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from infinity import diffcore as dc
from infinity.caseio import (
    CountMismatchError,
    MagicMismatchError,
    TruncatedCaseError,
    VersionMismatchError,
    decode_case,
    encode_case,
)
from infinity.checkpoint import (
    Checkpoint,
    CheckpointMagicError,
    CheckpointSizeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    pack_sections,
    unpack_sections,
)
from infinity.cli import main
from infinity.dataset import GeneratorConfig, PotentialFlow, case_observations, fit_normalization, generate_case, physical_flow, sweep_configs
from infinity.evaluation import case_force_coefficients, field_mse, relative_error, spearman
from infinity.geometry import surface_quadrature
from infinity.inr import FIELDS, InrArchitecture, SharedInrWeights, reconstruction_loss
from infinity.meta import MetaConfig, fit_inr, inner_loop_encode, meta_gradients, meta_train_step, reconstruction_mse

from . import oracles
from .test_diffcore import BINARY, UNARY, _trace

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


# ---------------------------------------------------------------------------
# gradients and literal semantics
# ---------------------------------------------------------------------------


def _tiny_inr(seed, latent=4, width=8, m=4, out=1):
    arch = InrArchitecture(output_dim=out, num_fourier_features=m, depth=2, hidden_width=width, latent_dim=latent)
    w = SharedInrWeights.initialize(arch, np.random.default_rng(seed), "p")
    rng = np.random.default_rng(seed + 100)
    n = arch.depth + 1
    return w.with_parameters([p.data + (0.1 * rng.standard_normal(p.shape) if i >= n else 0) for i, p in enumerate(w.parameters())])


# central-difference step balancing truncation against roundoff
FD_STEP = np.finfo(float).eps ** (1 / 3)


def test_gradient_correctness(report_criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        for fn in UNARY.values():
            rec, xs = _trace(fn, (2, 3), seed=seed)
            worst = max(worst, dc.finite_difference_check(rec, xs, 0, step=FD_STEP))
        for fn in BINARY.values():
            rec, xs = _trace(fn, (2, 3), (2, 3), seed=seed)
            worst = max(worst, *(dc.finite_difference_check(rec, xs, k, step=FD_STEP) for k in (0, 1)))
        w = _tiny_inr(seed, latent=3, width=4, m=5)
        rng = np.random.default_rng(seed)
        pts, y = rng.standard_normal((6, 2)), rng.standard_normal((6, 1))
        n = w.arch.depth + 1

        def loss(z, *ps):
            return reconstruction_loss(z, SharedInrWeights(w.arch, w.fourier, list(ps[:n]), list(ps[n : 2 * n]), ps[-2], ps[-1]), pts, y)

        inputs = [rng.standard_normal(w.arch.latent_dim), *(p.data for p in w.parameters())]
        rec = dc.Record.trace(loss, *inputs)
        worst = max(worst, *(dc.finite_difference_check(rec, inputs, k, step=FD_STEP) for k in range(len(inputs))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 60
    report_criterion(
        "gradient correctness",
        ok,
        f"max relative error {worst:.2e} over {len(UNARY) + len(BINARY)} primitives and the INR loss, 20 seeds (< 1e-5); {elapsed:.1f} s (< 60 s)",
    )
    assert ok


def test_second_order_meta_gradient(report_criterion):
    t0 = time.perf_counter()
    w = _tiny_inr(0, latent=4, width=8)
    rng = np.random.default_rng(0)
    xs, ys = [rng.uniform(-1, 1, (6, 2)) for _ in range(3)], [rng.standard_normal((6, 1)) for _ in range(3)]
    from infinity.meta import FieldObservations

    obs = [FieldObservations(f"c{i}", "p", x, y) for i, (x, y) in enumerate(zip(xs, ys))]
    _, grads = meta_gradients(obs, w, MetaConfig(inner_steps=3, inner_lr=0.5, points_per_case=None))
    ad = np.concatenate([g.ravel() for g in grads])
    fd = oracles.meta_gradient_fd(xs, ys, oracles.params_of(w), 3, 0.5)
    norm_rel = np.linalg.norm(ad - fd) / np.linalg.norm(fd)
    # entry-wise, skipping entries whose size is at the finite-difference noise floor
    big = np.abs(fd) > 1e-6
    entry_rel = float(np.max(np.abs(ad - fd)[big] / np.abs(fd[big])))
    elapsed = time.perf_counter() - t0
    ok = norm_rel < 1e-4 and entry_rel < 1e-4 and elapsed < 60
    report_criterion(
        "second-order meta-gradient",
        ok,
        f"latent 4, width 8, K=3: relative error {norm_rel:.2e} (norm), {entry_rel:.2e} (max entry) vs unrolled FD (< 1e-4); {elapsed:.1f} s",
    )
    assert ok


def test_literal_semantics(report_criterion):
    from infinity.meta import FieldObservations

    w = _tiny_inr(1)
    rng = np.random.default_rng(1)
    obs = [FieldObservations(f"c{i}", "p", rng.uniform(-1, 1, (5, 2)), rng.standard_normal(5)) for i in range(3)]
    z0 = inner_loop_encode(obs[0], w, MetaConfig(inner_steps=0)).z
    zero_ok = bool(np.all(z0 == 0.0))
    cfg = MetaConfig(inner_steps=3, inner_lr=0.0, outer_lr=0.05, points_per_case=None)
    new, _ = meta_train_step(obs, w, cfg)
    total = dc.mean(dc.concat([dc.reshape(reconstruction_loss(np.zeros(4), w, o.points, o.values), (1,)) for o in obs], axis=0))
    grads = dc.grad(total, w.parameters())
    gap = max(float(np.max(np.abs(a.data - (p.data - 0.05 * g.data)))) for a, p, g in zip(new.parameters(), w.parameters(), grads))
    ok = zero_ok and gap <= 1e-12
    report_criterion("literal inner-loop semantics", ok, f"K=0 gives z=0: {zero_ok}; alpha=0 step vs plain GD max gap {gap:.1e} (<= 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# INR expressiveness
# ---------------------------------------------------------------------------

# one analytic case; the surface normal field flips sign across the trailing-edge
# cusp between two neighbouring samples, which only a high-frequency embedding resolves
SINGLE_ARCH = dict(depth=4, hidden_width=64, latent_dim=16, num_fourier_features=64, fourier_scale=2.0)
SINGLE_SCALE = {"n": 1000.0}
# the outer loss is taken before each update, so the oscillating normal fit stops with margin
SINGLE_TARGET = {"n": 1e-6}
SINGLE_META = MetaConfig(inner_lr=1e-2, outer_lr=1e-2, batch_size=1, points_per_case=None, max_iterations=5000, tol=None, target_loss=5e-5, optimizer="adam")

HELD_OUT_FIELD = "p"
HELD_OUT_ARCH = dict(depth=4, hidden_width=64, latent_dim=64, num_fourier_features=64, fourier_scale=1.0)
HELD_OUT_META = MetaConfig(inner_lr=1.0, outer_lr=1e-3, batch_size=8, points_per_case=256, max_iterations=1000, tol=None, optimizer="adam")


def test_inr_expressiveness(report_criterion):
    t0 = time.perf_counter()
    case = generate_case(GeneratorConfig(n_vol=256, n_surf=64, seed=0), "single")
    stats = fit_normalization([case])
    single = {}
    for tag in FIELDS:
        arch = InrArchitecture.for_field(tag, **{**SINGLE_ARCH, "fourier_scale": SINGLE_SCALE.get(tag, SINGLE_ARCH["fourier_scale"])})
        obs = case_observations(case, tag, stats)
        meta = replace(SINGLE_META, target_loss=SINGLE_TARGET.get(tag, SINGLE_META.target_loss))
        w, log = fit_inr([obs], meta, SharedInrWeights.initialize(arch, 0, tag), rng=0)
        single[tag] = (reconstruction_mse(obs, inner_loop_encode(obs, w, SINGLE_META), w), len(log.losses))
    t1 = time.perf_counter()

    cases = [generate_case(c, f"c{i}") for i, c in enumerate(sweep_configs(40, seed=0, base=GeneratorConfig(n_vol=2048, n_surf=256)))]
    train, held = cases[:32], cases[32:]
    stats = fit_normalization(train)
    arch = InrArchitecture.for_field(HELD_OUT_FIELD, **HELD_OUT_ARCH)
    w, _ = fit_inr([case_observations(c, HELD_OUT_FIELD, stats) for c in train], HELD_OUT_META, SharedInrWeights.initialize(arch, 0, HELD_OUT_FIELD), rng=0)
    held_obs = [case_observations(c, HELD_OUT_FIELD, stats) for c in held]
    held_mse = float(np.mean([reconstruction_mse(o, inner_loop_encode(o, w, HELD_OUT_META), w) for o in held_obs]))
    elapsed = time.perf_counter() - t0

    single_ok = all(mse < 1e-4 and its <= 5000 for mse, its in single.values())
    ok = single_ok and held_mse < 1e-2 and elapsed < 15 * 60
    per_field = ", ".join(f"{t} {mse:.1e}/{its} it" for t, (mse, its) in single.items())
    report_criterion(
        "INR expressiveness",
        ok,
        f"single case MSE {per_field} (< 1e-4 in 5k); held-out {HELD_OUT_FIELD} 3-step MSE {held_mse:.2e} after 32 cases (< 1e-2); "
        f"{t1 - t0:.0f} + {elapsed - (t1 - t0):.0f} s (< 900 s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


def _report_values(path):
    out = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if not row["group"].startswith("case_"):
                out[(row["group"], row["quantity"])] = float(row["value"])
    return out


def test_benchmark(report_criterion, tmp_path):
    t0 = time.perf_counter()
    status = main(["run-all", "--config", str(CONFIGS / "benchmark.cfg"), "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    assert status == 0
    r = _report_values(tmp_path / "report.csv")
    vol = {t: r[("volume_mse", t)] for t in ("vx", "vy", "p")}
    surf, cl, rho = r[("surface_mse", "p")], r[("relative_error", "C_L")], r[("spearman", "rho_L")]
    ok = all(v < 5e-2 for v in vol.values()) and surf < 5e-2 and rho >= 0.9 and cl < 0.15 and elapsed < 2 * 3600
    report_criterion(
        "synthetic benchmark (200/50, |X|=2048)",
        ok,
        "volume MSE " + ", ".join(f"{t} {v:.2e}" for t, v in vol.items()) + " (< 5e-2); "
        f"surface p MSE {surf:.2e} (< 5e-2); rho_L {rho:.3f} (>= 0.9); C_L rel. error {cl:.3f} (< 0.15); {elapsed / 60:.1f} min (< 120)",
    )
    assert ok


# ---------------------------------------------------------------------------
# physics, metrics, persistence, determinism
# ---------------------------------------------------------------------------


def test_physics_oracles(report_criterion):
    tangency = 0.0
    for cfg in sweep_configs(10, seed=7, base=GeneratorConfig(n_vol=512, n_surf=256)):
        c = generate_case(cfg)
        vn = c.vx[: c.n_surf] * c.normals[:, 0] + c.vy[: c.n_surf] * c.normals[:, 1]
        tangency = max(tangency, float(np.max(np.abs(vn)) / c.freestream_speed))

    cyl = GeneratorConfig(family="cylinder", center=(0.0, 0.0), angle_of_attack=0.0, freestream_speed=2.0, n_vol=512, n_surf=256)
    u, v = PotentialFlow(cyl).velocity(np.array([-1.0 + 0j]))
    stag = float(abs(0.5 * (4.0 - (u[0] ** 2 + v[0] ** 2)) / (0.5 * 4.0) - 1.0))

    cfg = GeneratorConfig(n_vol=600, n_surf=256, seed=3)
    case, vel = generate_case(cfg), physical_flow(cfg)
    pts = case.x_vol[case.n_surf :][case.d[case.n_surf :] > 1e-2]
    h = 1e-6
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    div = float(np.max(np.abs(vel(pts + ex)[:, 0] - vel(pts - ex)[:, 0] + vel(pts + ey)[:, 1] - vel(pts - ey)[:, 1]) / (2 * h)))

    n, w = surface_quadrature(case.x_surf)
    closure = float(np.max(np.abs(np.sum(n * w[:, None], axis=0))))

    lifted = generate_case(replace(cyl, circulation=3.0, angle_of_attack=0.25))
    _, cl = case_force_coefficients(lifted.x_surf, lifted.p_surf, lifted.inlet_velocity, lifted.chord)
    lift = cl * 0.5 * lifted.freestream_speed**2 * lifted.chord
    kj = abs(lift / (lifted.freestream_speed * lifted.params["circulation"]) - 1.0)

    ok = tangency < 1e-8 and stag < 1e-12 and div < 1e-4 and closure < 1e-12 and kj < 5e-3
    report_criterion(
        "physics and geometry oracles",
        ok,
        f"tangency {tangency:.1e}|V| (< 1e-8), stagnation p error {stag:.1e}, divergence {div:.1e} (< 1e-4), "
        f"|sum n ds| {closure:.1e}, Kutta-Joukowski lift error {100 * kj:.3f}% at N=256 (< 0.5%)",
    )
    assert ok


def test_metric_units(report_criterion):
    rho = spearman([1, 2, 3], [2, 1, 3])
    rev = spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1])
    ref = np.array([0.3, -1.2, 2.0])
    rel = relative_error(1.1 * ref, ref)
    case = generate_case(GeneratorConfig(n_vol=128, n_surf=32))
    stats = fit_normalization([case])
    mse = field_mse(case.vx + stats.std["vx"][0], case.vx, stats, "vx")
    ok = rho == 0.5 and rev == -1.0 and abs(rel - 0.1) < 1e-12 and abs(mse - 1.0) < 1e-12
    report_criterion("metric unit tests", ok, f"spearman {rho!r} (0.5), reversed {rev!r} (-1), 10% inflation {rel:.15f} (0.1), unit offset MSE {mse:.15f} (1.0)")
    assert ok


def _raises(fn, exc):
    try:
        fn()
    except exc:
        return True
    except Exception:
        return False
    return False


def test_persistence(report_criterion):
    case = generate_case(GeneratorConfig(n_vol=64, n_surf=16, seed=1))
    buf = encode_case(case)
    case_stable = encode_case(decode_case(buf)) == buf
    bad_version = bytearray(buf)
    bad_version[4:8] = struct.pack("<I", 7)
    bad_count = bytearray(buf)
    bad_count[8:12] = struct.pack("<I", 65)
    case_errors = [
        _raises(lambda: decode_case(b"XXXX" + buf[4:]), MagicMismatchError),
        _raises(lambda: decode_case(bytes(bad_version)), VersionMismatchError),
        _raises(lambda: decode_case(buf[:-8]), TruncatedCaseError),
        _raises(lambda: decode_case(bytes(bad_count)), (CountMismatchError, TruncatedCaseError)),
        _raises(lambda: decode_case(buf + b"\0" * 4), CountMismatchError),
    ]

    rng = np.random.default_rng(0)
    inrs = {t: SharedInrWeights.initialize(InrArchitecture.for_field(t, depth=2, hidden_width=8, latent_dim=4, num_fourier_features=4), rng, t) for t in FIELDS}
    ck = Checkpoint("seed = 0\n", inrs, None, fit_normalization([case]))
    stable = []
    for precision in ("f64", "f32"):
        once = pack_sections(Checkpoint.from_sections(unpack_sections(pack_sections(ck.to_sections(), precision))).to_sections(), precision)
        stable.append(pack_sections(Checkpoint.from_sections(unpack_sections(once)).to_sections(), precision) == once)
    stable.append(pack_sections(Checkpoint.from_sections(unpack_sections(pack_sections(ck.to_sections()))).to_sections()) == pack_sections(ck.to_sections()))
    cbuf = pack_sections(ck.to_sections())
    cver = bytearray(cbuf)
    cver[4:8] = struct.pack("<I", 5)
    ck_errors = [
        _raises(lambda: unpack_sections(b"XXXX" + cbuf[4:]), CheckpointMagicError),
        _raises(lambda: unpack_sections(bytes(cver)), CheckpointVersionError),
        _raises(lambda: unpack_sections(cbuf[:-3]), CheckpointTruncatedError),
        _raises(lambda: unpack_sections(cbuf + b"\0"), CheckpointSizeError),
    ]
    ok = case_stable and all(case_errors) and all(stable) and all(ck_errors)
    report_criterion(
        "persistence",
        ok,
        f"case round trip bitwise {case_stable}, checkpoint round trips (f64, f32, original f64) {stable}, "
        f"error classes detected: case {sum(case_errors)}/{len(case_errors)}, checkpoint {sum(ck_errors)}/{len(ck_errors)}",
    )
    assert ok


def test_determinism(report_criterion, tmp_path):
    cfg = str(CONFIGS / "micro.cfg")
    assert main(["run-all", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["run-all", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "report.csv").read_bytes(), (tmp_path / "b" / "report.csv").read_bytes()
    ok = a == b
    report_criterion("determinism", ok, f"two micro runs with seed 3 give {'identical' if ok else 'different'} report CSVs ({len(a)} bytes)")
    assert ok
