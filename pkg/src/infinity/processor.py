"""Latent map from geometry codes and inlet velocity to physics codes.

Training happens entirely in code space. Inference chains the three steps:
encode ``d`` and ``n`` with a few auto-decoding steps, map the codes, and
return a query object that decodes the predicted codes anywhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .inr import GEOMETRY_FIELDS, PHYSICS_FIELDS, LatentCode, SharedInrWeights, decode
from .meta import FieldObservations, MetaConfig, inner_loop_encode

logger = logging.getLogger(__name__)

_ACT = {"gelu": dc.gelu, "relu": dc.relu}


class MissingTargetsError(ValueError):
    pass


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class CaseCodes:
    case_id: str
    z_d: np.ndarray
    z_n: np.ndarray
    inlet_velocity: np.ndarray
    targets: dict | None = None

    def __post_init__(self):
        self.z_d = np.asarray(self.z_d, dtype=np.float64)
        self.z_n = np.asarray(self.z_n, dtype=np.float64)
        self.inlet_velocity = np.asarray(self.inlet_velocity, dtype=np.float64)
        if self.z_d.shape != self.z_n.shape:
            raise ValueError("geometry codes must share one latent dimension")
        if self.inlet_velocity.shape != (2,) or not np.all(np.isfinite(self.inlet_velocity)):
            raise ValueError("inlet velocity must be two finite numbers")

    def input_vector(self) -> np.ndarray:
        return np.concatenate([self.z_d, self.z_n, self.inlet_velocity])

    def target_vector(self) -> np.ndarray:
        if not self.targets or any(t not in self.targets for t in PHYSICS_FIELDS):
            raise MissingTargetsError(f"case {self.case_id} lacks target codes")
        return np.concatenate([np.asarray(self.targets[t], dtype=np.float64) for t in PHYSICS_FIELDS])


@dataclass
class ProcessorConfig:
    hidden_width: int = 256
    hidden_layers: int = 3
    activation: str = "gelu"
    lr: float = 1e-3
    iterations: int = 3000
    batch_size: int | None = None
    weight_decay: float = 0.0
    standardize: bool = True


@dataclass
class ProcessorWeights:
    """MLP parameters plus the input/output standardization constants."""

    weights: list
    biases: list
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    latent_dim: int
    activation: str = "gelu"

    @classmethod
    def initialize(cls, latent_dim: int, cfg: ProcessorConfig, rng=None, stats=None):
        rng = np.random.default_rng(rng)
        dims = [2 * latent_dim + 2] + [cfg.hidden_width] * cfg.hidden_layers + [4 * latent_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
        if stats is None:
            stats = (np.zeros(dims[0]), np.ones(dims[0]), np.zeros(dims[-1]), np.ones(dims[-1]))
        return cls(weights, biases, *stats, latent_dim=latent_dim, activation=cfg.activation)

    def parameters(self) -> list:
        return [*self.weights, *self.biases]

    def with_parameters(self, arrays) -> "ProcessorWeights":
        n = len(self.weights)
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        return ProcessorWeights(
            leaves[:n], leaves[n:], self.in_mean, self.in_std, self.out_mean, self.out_std, self.latent_dim, self.activation
        )

    def state_dict(self) -> dict:
        out = {f"W{j}": w.data.copy() for j, w in enumerate(self.weights)}
        out.update({f"b{j}": b.data.copy() for j, b in enumerate(self.biases)})
        out.update(in_mean=self.in_mean, in_std=self.in_std, out_mean=self.out_mean, out_std=self.out_std)
        return out

    @classmethod
    def from_state_dict(cls, state: dict, latent_dim: int, activation: str = "gelu"):
        n = sum(1 for k in state if k.startswith("W"))
        leaf = lambda k: Tensor(np.array(state[k], dtype=np.float64), requires_grad=True)  # noqa: E731
        return cls(
            [leaf(f"W{j}") for j in range(n)],
            [leaf(f"b{j}") for j in range(n)],
            *(np.array(state[k], dtype=np.float64) for k in ("in_mean", "in_std", "out_mean", "out_std")),
            latent_dim=latent_dim,
            activation=activation,
        )


def _mlp(x: Tensor, psi: ProcessorWeights) -> Tensor:
    """Forward in standardized units."""
    act = _ACT[psi.activation]
    h = x
    for W, b in zip(psi.weights[:-1], psi.biases[:-1]):
        h = act(dc.matmul(h, W) + b)
    return dc.matmul(h, psi.weights[-1]) + psi.biases[-1]


def processor_forward(codes: CaseCodes, psi: ProcessorWeights) -> dict:
    """Predicted ``LatentCode`` per physics field."""
    x = codes.input_vector()
    if x.shape != (2 * psi.latent_dim + 2,):
        raise ValueError(f"processor expects input of length {2 * psi.latent_dim + 2}, got {x.shape[0]}")
    with dc.no_grad():
        y = _mlp(Tensor((x - psi.in_mean) / psi.in_std), psi).data * psi.out_std + psi.out_mean
    parts = np.split(y, len(PHYSICS_FIELDS))
    return {t: LatentCode(part, t) for t, part in zip(PHYSICS_FIELDS, parts)}


def _standardizer(a: np.ndarray):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


@dataclass
class ProcessorLog:
    losses: list = field(default_factory=list)


def code_mse(dataset, psi: ProcessorWeights) -> float:
    """Mean squared error of predicted vs target codes (raw code units)."""
    err = []
    for c in dataset:
        pred = processor_forward(c, psi)
        err.append(np.concatenate([pred[t].z for t in PHYSICS_FIELDS]) - c.target_vector())
    return float(np.mean(np.square(err)))


def train_processor(dataset, cfg: ProcessorConfig, rng=None, psi: ProcessorWeights | None = None):
    """Fit the MLP by Adam on the squared code error. Returns ``(psi, log)``."""
    if len(dataset) == 0:
        raise ValueError("need at least one case")
    X = np.stack([c.input_vector() for c in dataset])
    Y = np.stack([c.target_vector() for c in dataset])
    return fit_processor_arrays(X, Y, cfg, rng, psi)


def fit_processor_arrays(X, Y, cfg: ProcessorConfig, rng=None, psi: ProcessorWeights | None = None):
    """Array form of :func:`train_processor`: ``X`` is ``(n, 2L+2)``, ``Y`` is ``(n, 4L)``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    latent = (X.shape[1] - 2) // 2
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y) or Y.shape[1] != 4 * latent or 2 * latent + 2 != X.shape[1]:
        raise ValueError(f"inconsistent processor data shapes {X.shape} and {Y.shape}")
    rng = np.random.default_rng(rng)
    if psi is None:
        stats = (*_standardizer(X), *_standardizer(Y)) if cfg.standardize else None
        psi = ProcessorWeights.initialize(latent, cfg, rng, stats)
    Xs = (X - psi.in_mean) / psi.in_std
    Ys = (Y - psi.out_mean) / psi.out_std
    # squared error in raw code units, so the objective is the plain code MSE
    scale = psi.out_std**2
    params = [p.data for p in psi.parameters()]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    log = ProcessorLog()
    n = len(X)
    bs = cfg.batch_size or n
    for it in range(1, cfg.iterations + 1):
        idx = rng.choice(n, size=bs, replace=False) if bs < n else slice(None)
        cur = psi.with_parameters(params)
        diff = _mlp(Tensor(Xs[idx]), cur) - Ys[idx]
        loss = dc.mean(diff * diff * scale)
        grads = [g.data for g in dc.grad(loss, cur.parameters())]
        log.losses.append(float(loss.data))
        if not np.isfinite(log.losses[-1]):
            raise FloatingPointError(f"processor loss diverged at iteration {it}")
        for i, g in enumerate(grads):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * params[i]
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            step = cfg.lr * (m[i] / (1 - b1**it)) / (np.sqrt(v[i] / (1 - b2**it)) + eps)
            params[i] = params[i] - step
        if it % 500 == 0:
            logger.info("processor iteration %d code mse %.3e", it, log.losses[-1])
    return psi.with_parameters(params), log


def processor_predict(X, psi: ProcessorWeights) -> np.ndarray:
    """Batched forward on raw input rows; returns raw output rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    with dc.no_grad():
        return _mlp(Tensor((X - psi.in_mean) / psi.in_std), psi).data * psi.out_std + psi.out_mean


class FieldQuery:
    """Decodes predicted physics codes at arbitrary coordinates.

    Values are returned in physical units unless ``normalized=True``.
    """

    def __init__(self, codes: dict, inrs: dict, stats=None):
        self.codes = codes
        self.inrs = inrs
        self.stats = stats

    def field(self, tag: str, points, normalized: bool = False) -> np.ndarray:
        out = decode(self.codes[tag], self.inrs[tag], points)
        out = out[:, 0] if out.shape[1] == 1 else out
        if normalized or self.stats is None:
            return out
        return self.stats.invert(tag, out)

    def __call__(self, points, fields=PHYSICS_FIELDS, normalized: bool = False) -> dict:
        return {t: self.field(t, points, normalized) for t in fields}


def encode_geometry(d_obs: FieldObservations, n_obs: FieldObservations, inrs: dict, meta_cfg):
    """``meta_cfg`` is one ``MetaConfig`` or a dict of them keyed by field."""
    if isinstance(meta_cfg, MetaConfig):
        meta_cfg = {"d": meta_cfg, "n": meta_cfg}
    return inner_loop_encode(d_obs, inrs["d"], meta_cfg["d"]), inner_loop_encode(n_obs, inrs["n"], meta_cfg["n"])


def infer_case(
    d_obs: FieldObservations,
    n_obs: FieldObservations,
    inlet_velocity,
    inrs: dict,
    psi: ProcessorWeights | None,
    meta_cfg,
    stats=None,
):
    """Encode geometry, process, and return ``(FieldQuery, predicted codes)``.

    ``d_obs``/``n_obs`` must already be normalized the same way as the INR
    training data. ``meta_cfg`` is as in :func:`encode_geometry`.
    """
    missing = [t for t in (*GEOMETRY_FIELDS, *PHYSICS_FIELDS) if not isinstance(inrs.get(t), SharedInrWeights)]
    if missing or psi is None:
        raise UntrainedModelError(f"missing trained weights for {missing or ['processor']}")
    z_d, z_n = encode_geometry(d_obs, n_obs, inrs, meta_cfg)
    codes = CaseCodes(d_obs.case_id, z_d.z, z_n.z, inlet_velocity)
    pred = processor_forward(codes, psi)
    return FieldQuery(pred, inrs, stats), pred
