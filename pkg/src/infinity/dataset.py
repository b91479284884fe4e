"""Synthetic airfoil cases from 2-D potential flow, plus field normalization.

A case is flow past a Joukowski airfoil (or a circular cylinder), computed
from the complex potential of a circle with circulation:

    dw/dzeta = V (e^{-i a} - R^2 e^{i a} / (zeta - zeta0)^2) + i G / (2 pi (zeta - zeta0))

mapped by ``z = zeta + c^2 / zeta``. For airfoils the circulation ``G``
comes from the Kutta condition at the trailing edge. Coordinates are
rescaled so the chord is 1 with the leading edge at the origin. Pressure is
per unit density, ``p = (V^2 - |v|^2) / 2``. The turbulent viscosity is a
smooth wall-decaying surrogate, ``nu0 * exp(-d / ell)``; it is not physics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import distance_to_surface
from .meta import FieldObservations

FIELD_COMPONENTS = {"d": 1, "n": 2, "vx": 1, "vy": 1, "p": 1, "nut": 1}


class DegenerateShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    family: str = "joukowski"
    center: tuple = (-0.1, 0.05)
    radius: float = 1.0
    angle_of_attack: float = np.deg2rad(5.0)
    freestream_speed: float = 30.0
    circulation: float = 0.0
    n_vol: int = 2048
    n_surf: int = 256
    gap_min: float = 1e-3
    gap_max: float = 5.0
    nut_scale: float = 1e-3
    nut_length: float = 0.1
    seed: int = 0

    def validate(self):
        if self.family not in ("cylinder", "joukowski"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.n_surf < 8 or self.n_vol < 8:
            raise ValueError("point counts must be >= 8")
        if self.n_vol <= self.n_surf:
            raise ValueError("n_vol must exceed n_surf (surface points are part of the volume set)")
        if not (self.radius > 0 and self.freestream_speed > 0 and self.nut_scale > 0 and self.nut_length > 0):
            raise ValueError("physical parameters must be positive")
        if not 0 < self.gap_min < self.gap_max:
            raise ValueError("need 0 < gap_min < gap_max")
        if self.family == "joukowski":
            offset = abs(complex(*self.center))
            if self.radius <= offset:
                raise DegenerateShapeError(f"radius {self.radius} must exceed center offset {offset:.6g}")
            if self.center[0] > 0:
                raise DegenerateShapeError("center must not lie right of the imaginary axis")
        return self


class PotentialFlow:
    """Exact flow around the mapped circle, in raw (unscaled) coordinates."""

    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        self.cfg = cfg
        self.zeta0 = complex(*cfg.center)
        self.a = float(cfg.radius)
        self.speed = float(cfg.freestream_speed)
        self.alpha = float(cfg.angle_of_attack)
        if cfg.family == "joukowski":
            self.c = self.zeta0.real + np.sqrt(self.a**2 - self.zeta0.imag**2)
            beta = np.arctan2(self.zeta0.imag, self.c - self.zeta0.real)
            self.theta_te = -beta
            self.gamma = 4.0 * np.pi * self.a * self.speed * np.sin(self.alpha + beta)
        else:
            self.c = 0.0
            self.theta_te = 0.0
            self.gamma = float(cfg.circulation)

    def to_z(self, zeta):
        zeta = np.asarray(zeta, dtype=complex)
        return zeta + self.c**2 / zeta if self.c else zeta

    def to_zeta(self, z):
        z = np.asarray(z, dtype=complex)
        if not self.c:
            return z
        root = np.sqrt(z * z - 4.0 * self.c**2)
        r1, r2 = 0.5 * (z + root), 0.5 * (z - root)
        return np.where(np.abs(r1 - self.zeta0) >= np.abs(r2 - self.zeta0), r1, r2)

    def dz_dzeta(self, zeta):
        zeta = np.asarray(zeta, dtype=complex)
        return 1.0 - self.c**2 / zeta**2 if self.c else np.ones_like(zeta)

    def dw_dzeta(self, zeta):
        s = np.asarray(zeta, dtype=complex) - self.zeta0
        e = np.exp(1j * self.alpha)
        return self.speed * (np.conj(e) - self.a**2 * e / s**2) + 1j * self.gamma / (2.0 * np.pi * s)

    def velocity_zeta(self, zeta):
        """(u, v) in the physical plane at the image of ``zeta``."""
        w = self.dw_dzeta(zeta) / self.dz_dzeta(zeta)
        return np.real(w), -np.imag(w)

    def velocity(self, z):
        """(u, v) at raw physical coordinates ``z`` (complex) outside the body."""
        return self.velocity_zeta(self.to_zeta(z))

    def surface_zeta(self, n: int):
        theta = self.theta_te + 2.0 * np.pi * (np.arange(n) + 0.5) / n
        return self.zeta0 + self.a * np.exp(1j * theta)

    def surface_normals_exact(self, zeta):
        """Outward unit normals of the mapped contour (counter-clockwise)."""
        d = self.dz_dzeta(zeta) * (np.asarray(zeta) - self.zeta0)
        d = d / np.abs(d)
        return np.column_stack([d.real, d.imag])


@dataclass
class CaseSample:
    """One airfoil case. Volume points include the surface points first."""

    case_id: str
    x_vol: np.ndarray
    x_surf: np.ndarray
    d: np.ndarray
    normals: np.ndarray
    inlet_velocity: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    p: np.ndarray
    nut: np.ndarray
    p_surf: np.ndarray
    chord: float = 1.0
    freestream_speed: float = 1.0
    cl_ref: float = 0.0
    cd_ref: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        nv, ns = len(self.x_vol), len(self.x_surf)
        for name in ("d", "vx", "vy", "p", "nut"):
            if len(getattr(self, name)) != nv:
                raise ValueError(f"{name} has {len(getattr(self, name))} values for {nv} volume points")
        if len(self.normals) != ns or len(self.p_surf) != ns:
            raise ValueError("surface arrays disagree with the surface point count")

    @property
    def n_vol(self) -> int:
        return len(self.x_vol)

    @property
    def n_surf(self) -> int:
        return len(self.x_surf)

    def field(self, tag: str) -> np.ndarray:
        return {"d": self.d, "n": self.normals, "vx": self.vx, "vy": self.vy, "p": self.p, "nut": self.nut}[tag]

    def points_for(self, tag: str) -> np.ndarray:
        return self.x_surf if tag == "n" else self.x_vol


def generate_case(cfg: GeneratorConfig, case_id: str = "case") -> CaseSample:
    """Sample a case; deterministic given ``cfg`` (including its seed)."""
    flow = PotentialFlow(cfg)
    rng = np.random.default_rng(cfg.seed)

    zs = flow.surface_zeta(cfg.n_surf)
    z_surf = flow.to_z(zs)
    z_te = flow.to_z(flow.zeta0 + flow.a * np.exp(1j * flow.theta_te))
    far = np.argmax(np.abs(z_surf - z_te))
    z_le = z_surf[far]
    chord_raw = float(np.abs(z_te - z_le))
    scale = 1.0 / chord_raw

    n_in = cfg.n_vol - cfg.n_surf
    gap = np.exp(rng.uniform(np.log(cfg.gap_min), np.log(cfg.gap_max), n_in))
    theta = rng.uniform(0.0, 2.0 * np.pi, n_in)
    zv = flow.zeta0 + flow.a * (1.0 + gap) * np.exp(1j * theta)
    zeta_all = np.concatenate([zs, zv])

    z_all = (flow.to_z(zeta_all) - z_le) * scale
    x_vol = np.column_stack([z_all.real, z_all.imag])
    x_surf = x_vol[: cfg.n_surf].copy()
    u, v = flow.velocity_zeta(zeta_all)
    V = flow.speed
    p = 0.5 * (V * V - (u * u + v * v))
    d = np.concatenate([np.zeros(cfg.n_surf), distance_to_surface(x_vol[cfg.n_surf :], x_surf)])
    nut = cfg.nut_scale * np.exp(-d / cfg.nut_length)
    gamma_phys = flow.gamma * scale
    return CaseSample(
        case_id=case_id,
        x_vol=x_vol,
        x_surf=x_surf,
        d=d,
        normals=flow.surface_normals_exact(zs),
        inlet_velocity=np.array([V * np.cos(flow.alpha), V * np.sin(flow.alpha)]),
        vx=u,
        vy=v,
        p=p,
        nut=nut,
        p_surf=p[: cfg.n_surf].copy(),
        chord=1.0,
        freestream_speed=V,
        cl_ref=2.0 * gamma_phys / V,
        cd_ref=0.0,
        params={"circulation": gamma_phys, "z_le": z_le, "scale": scale},
    )


def physical_flow(case_cfg: GeneratorConfig):
    """Velocity function in the scaled coordinates that ``generate_case`` emits."""
    flow = PotentialFlow(case_cfg)
    zs = flow.surface_zeta(case_cfg.n_surf)
    z_surf = flow.to_z(zs)
    z_te = flow.to_z(flow.zeta0 + flow.a * np.exp(1j * flow.theta_te))
    z_le = z_surf[np.argmax(np.abs(z_surf - z_te))]
    scale = 1.0 / float(np.abs(z_te - z_le))

    def velocity(xy):
        xy = np.atleast_2d(xy)
        return np.column_stack(flow.velocity((xy[:, 0] + 1j * xy[:, 1]) / scale + z_le))

    return velocity


@dataclass(frozen=True)
class SweepRanges:
    """Parameter box for benchmark sweeps (angles in degrees)."""

    thickness: tuple = (0.05, 0.15)
    camber: tuple = (0.02, 0.12)
    angle_deg: tuple = (3.0, 12.0)
    speed: tuple = (25.0, 35.0)


def sweep_configs(n: int, seed: int, base: GeneratorConfig | None = None, ranges: SweepRanges | None = None) -> list:
    """``n`` Joukowski configs with shape, angle and speed drawn uniformly."""
    base = base or GeneratorConfig()
    r = ranges or SweepRanges()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = rng.uniform(*r.thickness)
        cam = rng.uniform(*r.camber)
        out.append(
            replace(
                base,
                family="joukowski",
                center=(-t, cam),
                radius=1.0,
                angle_of_attack=float(np.deg2rad(rng.uniform(*r.angle_deg))),
                freestream_speed=float(rng.uniform(*r.speed)),
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


class ZeroVarianceError(ValueError):
    pass


@dataclass
class NormalizationStats:
    """Per-field z-score statistics (population std) from training cases."""

    mean: dict
    std: dict

    def apply(self, tag: str, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean[tag]) / self.std[tag]

    def invert(self, tag: str, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std[tag] + self.mean[tag]


def fit_normalization(cases) -> NormalizationStats:
    if len(cases) == 0:
        raise ValueError("need at least one training case")
    mean, std = {}, {}
    for tag, comps in FIELD_COMPONENTS.items():
        vals = np.concatenate([np.asarray(c.field(tag), dtype=np.float64).reshape(-1, comps) for c in cases])
        m = vals.mean(axis=0)
        s = vals.std(axis=0)
        if np.any(s <= 0):
            raise ZeroVarianceError(f"field {tag} has zero variance in the training split")
        mean[tag] = m if comps > 1 else np.array([m[0]])
        std[tag] = s if comps > 1 else np.array([s[0]])
    return NormalizationStats(mean, std)


def case_observations(case: CaseSample, tag: str, stats: NormalizationStats | None = None) -> FieldObservations:
    """Field samples of a case, z-scored when ``stats`` is given."""
    values = np.asarray(case.field(tag), dtype=np.float64).reshape(len(case.points_for(tag)), -1)
    if stats is not None:
        values = stats.apply(tag, values)
    return FieldObservations(
        case.case_id, tag, case.points_for(tag), values, domain="surface" if tag == "n" else "volume"
    )
