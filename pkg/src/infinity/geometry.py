"""Closed-contour geometry: distances, normals and surface quadrature."""

from __future__ import annotations

import numpy as np


def _closed(contour) -> np.ndarray:
    c = np.asarray(contour, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2 or len(c) < 3:
        raise ValueError(f"contour must be (M, 2) with M >= 3, got {c.shape}")
    if np.allclose(c[0], c[-1]):
        c = c[:-1]
    return c


def signed_area(contour) -> float:
    """Shoelace area, positive for counter-clockwise traversal."""
    c = _closed(contour)
    x, y = c[:, 0], c[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def distance_to_surface(points, contour, chunk: int = 2048) -> np.ndarray:
    """Euclidean distance from each point to the closed polyline ``contour``.

    Accepts a single ``(2,)`` point or an ``(N, 2)`` array.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    c = _closed(contour)
    a = c
    ab = np.roll(c, -1, axis=0) - c
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ab2 = np.where(ab2 > 0, ab2, 1.0)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s : s + chunk, None, :]
        ap = p - a[None]
        t = np.clip(np.einsum("nij,ij->ni", ap, ab) / ab2, 0.0, 1.0)
        nearest = a[None] + t[..., None] * ab[None]
        out[s : s + chunk] = np.sqrt(np.min(np.sum((p - nearest) ** 2, axis=-1), axis=1))
    return out[0] if single else out


def surface_normals(contour) -> np.ndarray:
    """Outward unit normals from central differences of the closed contour.

    The orientation is fixed from the signed area, so the result does not
    depend on traversal direction.
    """
    c = _closed(contour)
    t = np.roll(c, -1, axis=0) - np.roll(c, 1, axis=0)
    length = np.linalg.norm(t, axis=1)
    if np.any(length == 0) or np.any(np.all(np.diff(np.vstack([c, c[:1]]), axis=0) == 0, axis=1)):
        raise ValueError("contour has repeated points")
    n = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    return n if signed_area(c) > 0 else -n


def surface_quadrature(contour):
    """Outward normals and arc weights whose products sum to exactly zero.

    ``normals[i] * weights[i]`` equals half the rotated chord between the
    neighbours of point ``i``; summed against a pressure this is the
    trapezoidal rule on the polygon, and the closed-surface identity holds to
    rounding.
    """
    c = _closed(contour)
    normals = surface_normals(c)
    weights = 0.5 * np.linalg.norm(np.roll(c, -1, axis=0) - np.roll(c, 1, axis=0), axis=1)
    return normals, weights


def arc_length_weights(contour) -> np.ndarray:
    """Trapezoidal arc-length weights: half of each adjacent segment."""
    c = _closed(contour)
    seg = np.linalg.norm(np.roll(c, -1, axis=0) - c, axis=1)
    return 0.5 * (seg + np.roll(seg, 1))
