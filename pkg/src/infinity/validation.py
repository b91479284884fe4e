"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .dataset import CaseSample
from .inr import FIELDS
from .meta import FieldObservations


def check_field_tag(tag: str) -> str:
    if tag not in FIELDS:
        raise ValueError(f"unknown field {tag!r}; expected one of {', '.join(FIELDS)}")
    return tag


def check_observations(X, field_tag: str | None = None) -> list:
    """Non-empty list of ``FieldObservations`` of a single field."""
    if isinstance(X, FieldObservations):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one FieldObservations")
    for obs in X:
        if not isinstance(obs, FieldObservations):
            raise TypeError(f"expected FieldObservations, got {type(obs).__name__}")
    tags = {obs.field_tag for obs in X}
    if len(tags) != 1:
        raise ValueError(f"observations mix fields {sorted(tags)}")
    if field_tag is not None and tags != {field_tag}:
        raise ValueError(f"observations are for field {tags.pop()!r}, estimator models {field_tag!r}")
    return X


def check_cases(cases) -> list:
    if isinstance(cases, CaseSample):
        cases = [cases]
    cases = list(cases)
    if not cases:
        raise ValueError("expected at least one case")
    for c in cases:
        if not isinstance(c, CaseSample):
            raise TypeError(f"expected CaseSample, got {type(c).__name__}")
    return cases


def check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    return check_array(pts, dtype=np.float64, ensure_min_samples=1)


def check_codes(codes, latent_dim: int) -> np.ndarray:
    codes = check_array(np.atleast_2d(codes), dtype=np.float64)
    if codes.shape[1] != latent_dim:
        raise ValueError(f"codes have {codes.shape[1]} columns, latent_dim is {latent_dim}")
    return codes
