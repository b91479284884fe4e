"""Auto-decoding inner loop and second-order meta-training of one field's INR.

Codes always start at zero and take ``inner_steps`` plain gradient steps on
the reconstruction loss. During training the outer gradient flows through
those steps (gradients of gradients), then the shared parameters receive a
plain gradient-descent update averaged over the batch.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .inr import LatentCode, SharedInrWeights, reconstruction_loss

logger = logging.getLogger(__name__)


class EncodingError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Outer loss became non-finite; ``weights`` holds the last finite state."""

    def __init__(self, message: str, weights: SharedInrWeights, iteration: int | None = None):
        super().__init__(message)
        self.weights = weights
        self.iteration = iteration


@dataclass
class MetaConfig:
    inner_steps: int = 3
    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    batch_size: int = 16
    max_iterations: int = 1000
    tol: float | None = 1e-8
    window: int = 50
    target_loss: float | None = None
    points_per_case: int | None = 512
    optimizer: str = "sgd"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class FieldObservations:
    """Samples of one field of one case.

    ``values`` is ``(N, output_dim)``; 1-D values are promoted to a column.
    """

    case_id: str
    field_tag: str
    points: np.ndarray
    values: np.ndarray
    domain: str = "volume"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (N, 2), got {self.points.shape}")
        if len(self.points) == 0:
            raise ValueError(f"case {self.case_id}: empty observations for field {self.field_tag}")
        if len(self.points) != len(self.values):
            raise ValueError(
                f"case {self.case_id}: {len(self.points)} points but {len(self.values)} values"
            )
        if self.domain not in ("volume", "surface"):
            raise ValueError("domain must be 'volume' or 'surface'")

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def stack_observations(batch: Sequence[FieldObservations], budget: int | None = None, rng=None):
    """Pad a batch to ``(B, N, .)`` arrays plus a 0/1 mask (None if unpadded).

    Cases with more than ``budget`` points are subsampled uniformly without
    replacement using ``rng``.
    """
    pts, vals = [], []
    for obs in batch:
        p, v = obs.points, obs.values
        if budget is not None and len(p) > budget:
            if rng is None:
                raise ValueError("subsampling needs an rng")
            idx = rng.choice(len(p), size=budget, replace=False)
            p, v = p[idx], v[idx]
        pts.append(p)
        vals.append(v)
    n = max(len(p) for p in pts)
    if all(len(p) == n for p in pts):
        return np.stack(pts), np.stack(vals), None
    B, C = len(pts), vals[0].shape[1]
    points = np.zeros((B, n, 2))
    values = np.zeros((B, n, C))
    mask = np.zeros((B, n))
    for b, (p, v) in enumerate(zip(pts, vals)):
        points[b, : len(p)] = p
        values[b, : len(v)] = v
        mask[b, : len(p)] = 1.0
    return points, values, mask


def _check_tags(batch, weights):
    tags = {o.field_tag for o in batch}
    if len(tags) != 1:
        raise ValueError(f"batch mixes fields {sorted(tags)}")
    tag = tags.pop()
    if weights.field_tag is not None and weights.field_tag != tag:
        raise ValueError(f"weights belong to field {weights.field_tag!r}, observations to {tag!r}")


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------


def unrolled_codes(points, values, mask, weights: SharedInrWeights, steps: int, lr: float, create_graph: bool) -> Tensor:
    """Run ``steps`` code updates from zero for a stacked batch.

    With ``create_graph`` the returned codes are differentiable functions of
    the shared weights.
    """
    B = points.shape[0]
    z = Tensor(np.zeros((B, weights.arch.latent_dim)), requires_grad=True)
    for k in range(steps):
        loss = dc.sum(reconstruction_loss(z, weights, points, values, mask))
        if not np.isfinite(loss.data):
            raise EncodingError(f"non-finite reconstruction loss at inner step {k}: {loss.data}")
        g = dc.grad(loss, z, create_graph=create_graph)
        if create_graph:
            z = z - lr * g
        else:
            z = Tensor(z.data - lr * g.data, requires_grad=True)
    return z


def inner_loop_encode(obs: FieldObservations, weights: SharedInrWeights, cfg: MetaConfig, steps: int | None = None) -> LatentCode:
    """Auto-decode one function: ``z <- z - lr * grad_z loss`` from ``z = 0``."""
    _check_tags([obs], weights)
    steps = cfg.inner_steps if steps is None else steps
    z = unrolled_codes(obs.points[None], obs.values[None], None, weights, steps, cfg.inner_lr, False)
    if not np.all(np.isfinite(z.data)):
        raise EncodingError(f"case {obs.case_id}: code diverged during encoding")
    return LatentCode(z.data[0].copy(), obs.field_tag)


def meta_objective(points, values, mask, weights: SharedInrWeights, cfg: MetaConfig) -> Tensor:
    """Batch-mean reconstruction loss after the unrolled inner loop."""
    z = unrolled_codes(points, values, mask, weights, cfg.inner_steps, cfg.inner_lr, create_graph=True)
    return dc.mean(reconstruction_loss(z, weights, points, values, mask))


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


class OuterOptimizer:
    """Plain gradient descent, or Adam when ``cfg.optimizer == 'adam'``."""

    def __init__(self, cfg: MetaConfig):
        self.cfg = cfg
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list, grads: list) -> list:
        lr = self.cfg.outer_lr
        if self.cfg.optimizer == "sgd":
            return [p - lr * g for p, g in zip(params, grads)]
        b1, b2 = self.cfg.adam_betas
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            out.append(p - lr * mhat / (np.sqrt(vhat) + self.cfg.adam_eps))
        return out


def meta_gradients(batch: Sequence[FieldObservations], weights: SharedInrWeights, cfg: MetaConfig, rng=None):
    """Outer loss and its gradient w.r.t. every shared parameter."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    _check_tags(batch, weights)
    points, values, mask = stack_observations(batch, cfg.points_per_case, rng)
    loss = meta_objective(points, values, mask, weights, cfg)
    grads = dc.grad(loss, weights.parameters())
    return float(loss.data), [g.data for g in grads]


def meta_train_step(
    batch: Sequence[FieldObservations],
    weights: SharedInrWeights,
    cfg: MetaConfig,
    optimizer: OuterOptimizer | None = None,
    rng=None,
):
    """One outer update. Returns ``(new_weights, outer_loss)``.

    ``weights`` is not modified. Raises :class:`DivergenceError` carrying the
    incoming weights if the loss or gradients are non-finite.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    try:
        loss, grads = meta_gradients(batch, weights, cfg, rng)
    except EncodingError as exc:
        raise DivergenceError(str(exc), weights) from exc
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(f"outer loss is not finite ({loss})", weights)
    optimizer = optimizer or OuterOptimizer(cfg)
    new = optimizer.step([p.data for p in weights.parameters()], grads)
    return weights.with_parameters(new), loss


@dataclass
class TrainingLog:
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    converged: bool = False

    def append(self, iteration: int, loss: float, seconds: float):
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.wall_clock.append(seconds)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "outer_loss", "wall_clock_s"])
            for row in zip(self.iterations, self.losses, self.wall_clock):
                w.writerow([row[0], repr(row[1]), f"{row[2]:.3f}"])


def _converged(losses: list, window: int, tol) -> bool:
    if tol is None or len(losses) < 2 * window:
        return False
    best_before = min(losses[:-window])
    return best_before - min(losses[-window:]) < tol


def fit_inr(
    dataset: Sequence[FieldObservations],
    cfg: MetaConfig,
    weights: SharedInrWeights,
    rng=None,
    callback=None,
):
    """Meta-train ``weights`` on ``dataset`` until convergence or the budget.

    Batches are drawn uniformly without replacement within each epoch.
    Training also stops once the outer loss falls below ``cfg.target_loss``.
    ``cfg.tol = None`` disables the plateau rule, which is useful when
    minibatch noise dominates the window-to-window change.
    Returns ``(trained_weights, TrainingLog)``.
    """
    if len(dataset) == 0:
        raise ValueError("fit_inr needs at least one case")
    _check_tags(dataset, weights)
    rng = np.random.default_rng(rng)
    optimizer = OuterOptimizer(cfg)
    log = TrainingLog()
    start = time.perf_counter()
    order: list = []
    for it in range(cfg.max_iterations):
        if not order:
            order = list(rng.permutation(len(dataset)))
        take, order = order[: cfg.batch_size], order[cfg.batch_size :]
        batch = [dataset[i] for i in take]
        weights, loss = meta_train_step(batch, weights, cfg, optimizer, rng)
        log.append(it, loss, time.perf_counter() - start)
        if callback is not None:
            callback(it, loss)
        if it % 100 == 0:
            logger.info("field %s iteration %d outer loss %.3e", weights.field_tag, it, loss)
        reached = cfg.target_loss is not None and loss < cfg.target_loss
        if reached or _converged(log.losses, cfg.window, cfg.tol):
            log.converged = True
            break
    return weights, log


def encode_dataset(dataset: Sequence[FieldObservations], weights: SharedInrWeights, cfg: MetaConfig) -> dict:
    """Encode each case independently with ``cfg.inner_steps`` steps."""
    return {obs.case_id: inner_loop_encode(obs, weights, cfg) for obs in dataset}


def reconstruction_mse(obs: FieldObservations, code, weights: SharedInrWeights) -> float:
    z = code.z if isinstance(code, LatentCode) else np.asarray(code)
    with dc.no_grad():
        return float(reconstruction_loss(z, weights, obs.points, obs.values).data)
