"""Field errors, force coefficients, rank correlations and the test report."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .geometry import surface_quadrature
from .inr import PHYSICS_FIELDS


class ZeroReferenceError(ValueError):
    pass


class ConstantSequenceError(ValueError):
    pass


def field_mse(pred, ref, stats=None, tag: str | None = None) -> float:
    """Mean squared error, in normalized units when ``stats`` is given."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match reference {ref.shape}")
    diff = pred - ref
    if stats is not None:
        std = stats.std[tag]
        diff = diff / (std if diff.ndim > 1 else std[0])
    return float(np.mean(diff * diff))


def force_coefficients(pressure, normals, weights, inlet_velocity, chord: float = 1.0, wall_shear=None):
    """Drag and lift coefficients from surface pressure (per unit density).

    ``F = -sum p_i n_i w_i (+ sum tau_i w_i)``; drag is the component along
    the inlet velocity, lift the component 90 degrees counter-clockwise.
    """
    p = np.asarray(pressure, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(p) < 3 or n.shape != (len(p), 2) or w.shape != (len(p),):
        raise ValueError("degenerate contour: need >= 3 points with matching normals and weights")
    if np.sum(w) <= 0:
        raise ValueError("degenerate contour: zero perimeter")
    force = -np.sum(p[:, None] * n * w[:, None], axis=0)
    if wall_shear is not None:
        force = force + np.sum(np.asarray(wall_shear, dtype=np.float64) * w[:, None], axis=0)
    V = np.asarray(inlet_velocity, dtype=np.float64)
    speed = float(np.hypot(*V))
    if speed <= 0:
        raise ValueError("inlet velocity must be nonzero")
    e_drag = V / speed
    e_lift = np.array([-e_drag[1], e_drag[0]])
    q = 0.5 * speed**2 * chord
    return float(force @ e_drag / q), float(force @ e_lift / q)


def case_force_coefficients(surface_points, pressure, inlet_velocity, chord: float = 1.0):
    normals, weights = surface_quadrature(surface_points)
    return force_coefficients(pressure, normals, weights, inlet_velocity, chord)


def relative_error(pred, ref, atol: float = 1e-12, skip_zero: bool = False):
    """Mean over cases of ``|pred - ref| / |ref|``.

    With ``skip_zero`` the cases whose reference is within ``atol`` of zero
    are excluded and the result is ``(value, n_flagged)``; ``value`` is NaN if
    every case is flagged. Otherwise such a case raises.
    """
    pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    ref = np.atleast_1d(np.asarray(ref, dtype=np.float64))
    if pred.shape != ref.shape:
        raise ValueError("prediction and reference lengths differ")
    zero = np.abs(ref) <= atol
    if not skip_zero:
        if np.any(zero):
            raise ZeroReferenceError(f"{int(zero.sum())} case(s) have a zero reference")
        return float(np.mean(np.abs(pred - ref) / np.abs(ref)))
    keep = ~zero
    value = float(np.mean(np.abs(pred[keep] - ref[keep]) / np.abs(ref[keep]))) if keep.any() else float("nan")
    return value, int(zero.sum())


def spearman(pred, ref) -> float:
    """Pearson correlation of average ranks."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if len(pred) < 2:
        raise ValueError("spearman needs at least two values")
    rp, rr = rankdata(pred) - (len(pred) + 1) / 2.0, rankdata(ref) - (len(ref) + 1) / 2.0
    den = np.sqrt(np.sum(rp * rp) * np.sum(rr * rr))
    if den == 0:
        raise ConstantSequenceError("rank variance is zero for a constant sequence")
    return float(np.clip(np.sum(rp * rr) / den, -1.0, 1.0))


@dataclass
class CaseResult:
    case_id: str
    volume_mse: dict
    surface_mse: float
    cd_pred: float
    cl_pred: float
    cd_ref: float
    cl_ref: float


@dataclass
class EvaluationReport:
    volume_mse: dict
    surface_mse: float
    cd_rel_error: float
    cl_rel_error: float
    cd_flagged: int
    cl_flagged: int
    rho_d: float
    rho_l: float
    cases: list = field(default_factory=list)
    time_us_per_point: tuple = (float("nan"), float("nan"))
    time_ms_per_case: tuple = (float("nan"), float("nan"))

    def rows(self) -> list:
        """Metric rows ``(group, quantity, value)`` (timing excluded)."""
        out = [("volume_mse", t, self.volume_mse[t]) for t in PHYSICS_FIELDS if t in self.volume_mse]
        out += [
            ("surface_mse", "p", self.surface_mse),
            ("relative_error", "C_D", self.cd_rel_error),
            ("relative_error", "C_L", self.cl_rel_error),
            ("flagged_zero_reference", "C_D", self.cd_flagged),
            ("flagged_zero_reference", "C_L", self.cl_flagged),
            ("spearman", "rho_D", self.rho_d),
            ("spearman", "rho_L", self.rho_l),
        ]
        return out

    def to_csv(self, path=None) -> str:
        """Metrics and per-case forces as CSV; timing goes to :meth:`timing_csv`."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "quantity", "value"])
        for g, q, v in self.rows():
            w.writerow([g, q, repr(float(v))])
        for c in self.cases:
            w.writerow(["case_cd", c.case_id, f"{c.cd_pred!r};{c.cd_ref!r}"])
            w.writerow(["case_cl", c.case_id, f"{c.cl_pred!r};{c.cl_ref!r}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def timing_csv(self, path=None) -> str:
        text = (
            "quantity,mean,std\n"
            f"us_per_point,{self.time_us_per_point[0]!r},{self.time_us_per_point[1]!r}\n"
            f"ms_per_case,{self.time_ms_per_case[0]!r},{self.time_ms_per_case[1]!r}\n"
        )
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        def fmt(v, scale=1.0):
            return "n/a" if not np.isfinite(v) else f"{v * scale:.4f}"

        lines = [
            f"{'':24s}{'INFINITY':>12s}",
            "Volume (x1e-2)",
        ]
        names = {"vx": "v_x", "vy": "v_y", "p": "p", "nut": "nu_t"}
        for t in PHYSICS_FIELDS:
            if t in self.volume_mse:
                lines.append(f"  {names[t]:22s}{fmt(self.volume_mse[t], 100):>12s}")
        lines += [
            "Surface (x1e-1)",
            f"  {'p|S':22s}{fmt(self.surface_mse, 10):>12s}",
            "Relative error",
            f"  {'C_D':22s}{fmt(self.cd_rel_error):>12s}",
            f"  {'C_L':22s}{fmt(self.cl_rel_error):>12s}",
            "Spearman correlation",
            f"  {'rho_D':22s}{fmt(self.rho_d):>12s}",
            f"  {'rho_L':22s}{fmt(self.rho_l):>12s}",
            f"{'Inference time (us/pt)':24s}{self.time_us_per_point[0]:>8.2f} +- {self.time_us_per_point[1]:.2f}",
            f"{'Inference time (ms/case)':24s}{self.time_ms_per_case[0]:>8.2f} +- {self.time_ms_per_case[1]:.2f}",
        ]
        if self.cd_flagged:
            lines.append(f"note: {self.cd_flagged} case(s) with zero reference C_D excluded from its relative error")
        return "\n".join(lines)


def _safe_spearman(pred, ref) -> float:
    try:
        return spearman(pred, ref)
    except (ConstantSequenceError, ValueError):
        return float("nan")


def evaluate_model(cases, model, stats, coefficient_atol: float = 1e-6) -> EvaluationReport:
    """Run ``model.infer_case`` on every test case and assemble the metrics.

    ``model.infer_case(case)`` must return a callable ``query(points)`` giving
    a dict of physical-unit fields. ``stats`` defines the normalized units.
    """
    if len(cases) == 0:
        raise ValueError("empty test split")
    results, us_per_point, ms_per_case = [], [], []
    for case in cases:
        t0 = time.perf_counter()
        query = model.infer_case(case)
        t1 = time.perf_counter()
        vol = query(case.x_vol)
        t2 = time.perf_counter()
        p_surf = query(case.x_surf, fields=("p",))["p"]
        us_per_point.append(1e6 * (t2 - t1) / case.n_vol)
        ms_per_case.append(1e3 * (t2 - t0))
        vmse = {t: field_mse(vol[t], case.field(t), stats, t) for t in PHYSICS_FIELDS}
        smse = field_mse(p_surf, case.p_surf, stats, "p")
        cd, cl = case_force_coefficients(case.x_surf, p_surf, case.inlet_velocity, case.chord)
        results.append(CaseResult(case.case_id, vmse, smse, cd, cl, case.cd_ref, case.cl_ref))
    cd_pred = np.array([r.cd_pred for r in results])
    cl_pred = np.array([r.cl_pred for r in results])
    cd_ref = np.array([r.cd_ref for r in results])
    cl_ref = np.array([r.cl_ref for r in results])
    cd_err, cd_flag = relative_error(cd_pred, cd_ref, atol=coefficient_atol, skip_zero=True)
    cl_err, cl_flag = relative_error(cl_pred, cl_ref, atol=coefficient_atol, skip_zero=True)
    return EvaluationReport(
        volume_mse={t: float(np.mean([r.volume_mse[t] for r in results])) for t in PHYSICS_FIELDS},
        surface_mse=float(np.mean([r.surface_mse for r in results])),
        cd_rel_error=cd_err,
        cl_rel_error=cl_err,
        cd_flagged=cd_flag,
        cl_flagged=cl_flag,
        rho_d=_safe_spearman(cd_pred, cd_ref),
        rho_l=_safe_spearman(cl_pred, cl_ref),
        cases=results,
        time_us_per_point=(float(np.mean(us_per_point)), float(np.std(us_per_point))),
        time_ms_per_case=(float(np.mean(ms_per_case)), float(np.std(ms_per_case))),
    )
