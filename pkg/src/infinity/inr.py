"""Shift-modulated Fourier-feature MLP and its linear hypernetwork."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

FIELDS = ("d", "n", "vx", "vy", "p", "nut")
GEOMETRY_FIELDS = ("d", "n")
PHYSICS_FIELDS = ("vx", "vy", "p", "nut")
SURFACE_FIELDS = ("n",)

_ACTIVATIONS = {"gelu": dc.gelu, "relu": dc.relu}


@dataclass(frozen=True)
class InrArchitecture:
    input_dim: int = 2
    output_dim: int = 1
    num_fourier_features: int = 64
    fourier_scale: float = 1.0
    depth: int = 4
    hidden_width: int = 128
    latent_dim: int = 128
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "num_fourier_features", "depth", "hidden_width", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.fourier_scale > 0:
            raise ValueError("fourier_scale must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @classmethod
    def for_field(cls, tag: str, **kwargs) -> "InrArchitecture":
        """Default architecture for a field; ``n`` is one 2-output network."""
        if tag not in FIELDS:
            raise ValueError(f"unknown field {tag!r}")
        kwargs.setdefault("output_dim", 2 if tag == "n" else 1)
        return cls(**kwargs)


@dataclass
class SharedInrWeights:
    """Parameters shared by every function of one field.

    ``weights[j]`` has shape (fan_in, fan_out), so layer j computes
    ``h @ weights[j] + biases[j]``. The hypernetwork maps a code ``z`` to
    ``z @ hyper_w + hyper_b`` reshaped to ``(depth, hidden_width)``.
    """

    arch: InrArchitecture
    fourier: np.ndarray
    weights: list
    biases: list
    hyper_w: Tensor
    hyper_b: Tensor
    field_tag: str | None = None

    def __post_init__(self):
        self.fourier = np.array(self.fourier, dtype=np.float64)
        self.fourier.setflags(write=False)
        a = self.arch
        if self.fourier.shape != (a.num_fourier_features, a.input_dim):
            raise ValueError(f"fourier matrix shape {self.fourier.shape} does not match architecture")
        if len(self.weights) != a.depth + 1 or len(self.biases) != a.depth + 1:
            raise ValueError("need depth + 1 layers")
        dims = [2 * a.num_fourier_features] + [a.hidden_width] * a.depth + [a.output_dim]
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[j], dims[j + 1]) or b.shape != (dims[j + 1],):
                raise ValueError(f"layer {j} has shapes {w.shape}, {b.shape}")
        if self.hyper_w.shape != (a.latent_dim, a.depth * a.hidden_width):
            raise ValueError(f"hypernetwork weight has shape {self.hyper_w.shape}")
        if self.hyper_b.shape != (a.depth * a.hidden_width,):
            raise ValueError(f"hypernetwork bias has shape {self.hyper_b.shape}")

    @classmethod
    def initialize(cls, arch: InrArchitecture, rng=None, field_tag=None, hyper_scale: float = 1.0):
        """Random init: uniform(+-1/sqrt(fan_in)) weights, zero biases.

        ``hyper_b`` starts at zero so ``z = 0`` reproduces the plain network.
        ``hyper_w`` is random (scaled by ``hyper_scale``); an all-zero
        hypernetwork is a stationary point of second-order meta-training.
        """
        rng = np.random.default_rng(rng)
        fourier = rng.normal(0.0, arch.fourier_scale, size=(arch.num_fourier_features, arch.input_dim))
        dims = [2 * arch.num_fourier_features] + [arch.hidden_width] * arch.depth + [arch.output_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
            biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
        bound = hyper_scale / np.sqrt(arch.latent_dim)
        hyper_w = rng.uniform(-bound, bound, size=(arch.latent_dim, arch.depth * arch.hidden_width))
        return cls(
            arch,
            fourier,
            weights,
            biases,
            Tensor(hyper_w, requires_grad=True),
            Tensor(np.zeros(arch.depth * arch.hidden_width), requires_grad=True),
            field_tag,
        )

    def parameters(self) -> list:
        """Trainable tensors in a fixed order: W_0..W_L, b_0..b_L, W_h, c_h."""
        return [*self.weights, *self.biases, self.hyper_w, self.hyper_b]

    def parameter_names(self) -> list:
        n = self.arch.depth + 1
        return [f"W{j}" for j in range(n)] + [f"b{j}" for j in range(n)] + ["Wh", "ch"]

    def with_parameters(self, arrays: Sequence) -> "SharedInrWeights":
        """New weights object holding fresh leaf tensors built from ``arrays``."""
        n = self.arch.depth + 1
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        return SharedInrWeights(
            self.arch, self.fourier, leaves[:n], leaves[n : 2 * n], leaves[2 * n], leaves[2 * n + 1], self.field_tag
        )

    def copy(self) -> "SharedInrWeights":
        return self.with_parameters([p.data for p in self.parameters()])

    def state_dict(self) -> dict:
        out = {"fourier": self.fourier.copy()}
        for name, p in zip(self.parameter_names(), self.parameters()):
            out[name] = p.data.copy()
        return out

    @classmethod
    def from_state_dict(cls, arch: InrArchitecture, state: dict, field_tag=None) -> "SharedInrWeights":
        n = arch.depth + 1
        leaf = lambda k: Tensor(np.array(state[k], dtype=np.float64), requires_grad=True)  # noqa: E731
        return cls(
            arch,
            state["fourier"],
            [leaf(f"W{j}") for j in range(n)],
            [leaf(f"b{j}") for j in range(n)],
            leaf("Wh"),
            leaf("ch"),
            field_tag,
        )


@dataclass
class LatentCode:
    z: np.ndarray
    field_tag: str | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if not np.all(np.isfinite(self.z)):
            raise ValueError("latent code contains non-finite entries")


@dataclass
class Modulations:
    shifts: list = field(default_factory=list)


def fourier_embed(x, fourier) -> Tensor:
    """``[cos(2 pi B x), sin(2 pi B x)]`` along the last axis."""
    proj = dc.matmul(dc.as_tensor(x) * (2.0 * np.pi), np.asarray(fourier).T)
    return dc.concat([dc.cos(proj), dc.sin(proj)], axis=-1)


def _code_tensor(z) -> Tensor:
    if isinstance(z, LatentCode):
        return Tensor(z.z)
    return dc.as_tensor(z)


def modulations_from_code(z, weights: SharedInrWeights) -> Tensor:
    """Per-layer shifts, shape ``z.shape[:-1] + (depth, hidden_width)``."""
    z = _code_tensor(z)
    a = weights.arch
    if z.shape[-1] != a.latent_dim:
        raise ValueError(f"code has dimension {z.shape[-1]}, expected {a.latent_dim}")
    phi = dc.matmul(z, weights.hyper_w) + weights.hyper_b
    return dc.reshape(phi, z.shape[:-1] + (a.depth, a.hidden_width))


def inr_forward(x, z, weights: SharedInrWeights) -> Tensor:
    """Evaluate the modulated field at coordinates ``x``.

    Shapes: ``x`` is ``(2,)``, ``(N, 2)`` with ``z`` of ``(latent_dim,)``, or
    ``(B, N, 2)`` with ``z`` of ``(B, latent_dim)``. The output drops the
    coordinate axis in favour of ``output_dim``.
    """
    x = dc.as_tensor(x)
    z = _code_tensor(z)
    a = weights.arch
    if x.shape[-1] != a.input_dim:
        raise ValueError(f"coordinates have dimension {x.shape[-1]}, expected {a.input_dim}")
    single = x.ndim == 1
    if single:
        x = dc.reshape(x, (1, a.input_dim))
    if x.ndim - 1 != z.ndim:
        raise ValueError(f"coordinate batch {x.shape} does not match code batch {z.shape}")
    act = _ACTIVATIONS[a.activation]
    phi = modulations_from_code(z, weights)
    h = fourier_embed(x, weights.fourier)
    for j in range(a.depth):
        shift = dc.reshape(phi[..., j, :], z.shape[:-1] + (1, a.hidden_width))
        h = act(dc.matmul(h, weights.weights[j]) + weights.biases[j] + shift)
    out = dc.matmul(h, weights.weights[-1]) + weights.biases[-1]
    if single:
        out = dc.reshape(out, (a.output_dim,))
    return out


def reconstruction_loss(z, weights: SharedInrWeights, points, values, mask=None) -> Tensor:
    """Mean squared error over points and output components.

    For a batch of codes the result has one entry per case. ``mask`` (shape
    of ``points`` without the coordinate axis) weights points; padded points
    get weight 0.
    """
    points = np.asarray(points, dtype=np.float64) if not isinstance(points, Tensor) else points
    values = np.asarray(values, dtype=np.float64)
    if points.shape[-2] == 0:
        raise ValueError("reconstruction loss needs at least one point")
    pred = inr_forward(points, z, weights)
    if values.shape != pred.shape:
        values = values.reshape(pred.shape)
    diff = pred - values
    sq = dc.sum(diff * diff, axis=-1)
    if mask is None:
        return dc.mean(sq, axis=-1) * (1.0 / weights.arch.output_dim)
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=-1) * weights.arch.output_dim
    return dc.sum(sq * mask, axis=-1) / counts


def decode(z, weights: SharedInrWeights, points, chunk: int = 8192) -> np.ndarray:
    """Evaluate a code on many points without recording a graph."""
    points = np.asarray(points, dtype=np.float64)
    z = z.z if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
    with dc.no_grad():
        parts = [inr_forward(points[i : i + chunk], z, weights).data for i in range(0, len(points), chunk)]
    if not parts:
        return np.zeros((0, weights.arch.output_dim))
    return np.concatenate(parts, axis=0)
