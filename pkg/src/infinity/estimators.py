"""scikit-learn style wrappers around the INR, the processor and the full surrogate."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import CaseSample, NormalizationStats, case_observations, fit_normalization
from .inr import FIELDS, GEOMETRY_FIELDS, PHYSICS_FIELDS, InrArchitecture, SharedInrWeights, decode
from .meta import MetaConfig, encode_dataset, fit_inr, inner_loop_encode, reconstruction_mse
from .processor import (
    CaseCodes,
    ProcessorConfig,
    ProcessorWeights,
    UntrainedModelError,
    fit_processor_arrays,
    infer_case,
    processor_predict,
)
from .validation import check_cases, check_codes, check_field_tag, check_observations, check_points

logger = logging.getLogger(__name__)


class ModulatedINR(TransformerMixin, BaseEstimator):
    """Shift-modulated Fourier-feature INR for one field, meta-trained on a set of cases.

    ``fit`` takes a list of ``FieldObservations``; ``transform`` maps
    observations to latent codes by ``inner_steps`` gradient steps from zero.

    Parameters
    ----------
    field_tag : str
        One of ``d, n, vx, vy, p, nut``.
    depth, hidden_width, latent_dim, num_fourier_features, fourier_scale, activation
        Network architecture.
    hyper_scale : float
        Initial scale of the hypernetwork matrix.
    inner_steps, inner_lr, outer_lr, batch_size, max_iterations, tol, window,
    target_loss, points_per_case, optimizer
        Meta-training settings, see ``MetaConfig``.
    random_state : int or None
    """

    def __init__(
        self,
        field_tag="p",
        depth=4,
        hidden_width=128,
        latent_dim=128,
        num_fourier_features=64,
        fourier_scale=1.0,
        activation="gelu",
        hyper_scale=1.0,
        inner_steps=3,
        inner_lr=1e-2,
        outer_lr=1e-3,
        batch_size=16,
        max_iterations=1000,
        tol=1e-8,
        window=50,
        target_loss=None,
        points_per_case=512,
        optimizer="sgd",
        random_state=None,
    ):
        self.field_tag = field_tag
        self.depth = depth
        self.hidden_width = hidden_width
        self.latent_dim = latent_dim
        self.num_fourier_features = num_fourier_features
        self.fourier_scale = fourier_scale
        self.activation = activation
        self.hyper_scale = hyper_scale
        self.inner_steps = inner_steps
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.batch_size = batch_size
        self.max_iterations = max_iterations
        self.tol = tol
        self.window = window
        self.target_loss = target_loss
        self.points_per_case = points_per_case
        self.optimizer = optimizer
        self.random_state = random_state

    def architecture(self) -> InrArchitecture:
        return InrArchitecture.for_field(
            check_field_tag(self.field_tag),
            depth=self.depth,
            hidden_width=self.hidden_width,
            latent_dim=self.latent_dim,
            num_fourier_features=self.num_fourier_features,
            fourier_scale=self.fourier_scale,
            activation=self.activation,
        )

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            inner_steps=self.inner_steps,
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            batch_size=self.batch_size,
            max_iterations=self.max_iterations,
            tol=self.tol,
            window=self.window,
            target_loss=self.target_loss,
            points_per_case=self.points_per_case,
            optimizer=self.optimizer,
        )

    def fit(self, X, y=None, weights: SharedInrWeights | None = None, callback=None):
        X = check_observations(X, self.field_tag)
        rng = np.random.default_rng(self.random_state)
        if weights is None:
            weights = SharedInrWeights.initialize(self.architecture(), rng, self.field_tag, self.hyper_scale)
        self.weights_, self.log_ = fit_inr(X, self.meta_config(), weights, rng, callback)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_observations(X, self.field_tag)
        codes = encode_dataset(X, self.weights_, self.meta_config())
        return np.stack([codes[obs.case_id].z for obs in X])

    def decode(self, codes, points) -> np.ndarray:
        """Field values ``(n_codes, n_points, output_dim)`` in normalized units."""
        check_is_fitted(self, "weights_")
        codes = check_codes(codes, self.weights_.arch.latent_dim)
        pts = check_points(points)
        return np.stack([decode(z, self.weights_, pts) for z in codes])

    def reconstruction_errors(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_observations(X, self.field_tag)
        codes = self.transform(X)
        return np.array([reconstruction_mse(obs, z, self.weights_) for obs, z in zip(X, codes)])

    def score(self, X, y=None) -> float:
        """Negative mean reconstruction MSE (higher is better)."""
        return -float(np.mean(self.reconstruction_errors(X)))


class LatentProcessor(RegressorMixin, BaseEstimator):
    """MLP from ``z_d ++ z_n ++ (V_x, V_y)`` to the four concatenated physics codes."""

    def __init__(
        self,
        hidden_width=256,
        hidden_layers=3,
        activation="gelu",
        lr=1e-3,
        iterations=3000,
        batch_size=None,
        weight_decay=0.0,
        standardize=True,
        random_state=None,
    ):
        self.hidden_width = hidden_width
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.lr = lr
        self.iterations = iterations
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.random_state = random_state

    def config(self) -> ProcessorConfig:
        return ProcessorConfig(
            hidden_width=self.hidden_width,
            hidden_layers=self.hidden_layers,
            activation=self.activation,
            lr=self.lr,
            iterations=self.iterations,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            standardize=self.standardize,
        )

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} rows, y has {len(y)}")
        self.weights_, self.log_ = fit_processor_arrays(X, y, self.config(), self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, processor expects {self.n_features_in_}")
        return processor_predict(X, self.weights_)


def _field_seed(random_state, tag: str) -> np.random.SeedSequence:
    base = 0 if random_state is None else int(random_state)
    return np.random.SeedSequence([base, FIELDS.index(tag)])


class InfinitySurrogate(BaseEstimator):
    """Encode-process-decode surrogate over whole cases.

    Training is two-step: one INR per field (``fit_field``), then the
    processor on codes (``fit_processor``). ``fit`` runs both.

    Parameters
    ----------
    inr_params : dict or None
        ``ModulatedINR`` parameters shared by every field.
    field_params : dict or None
        Per-field overrides, ``{tag: {param: value}}``.
    processor_params : dict or None
        ``LatentProcessor`` parameters.
    random_state : int
    """

    def __init__(self, inr_params=None, field_params=None, processor_params=None, random_state=0):
        self.inr_params = inr_params
        self.field_params = field_params
        self.processor_params = processor_params
        self.random_state = random_state

    def field_estimator(self, tag: str) -> ModulatedINR:
        params = dict(self.inr_params or {})
        params.update((self.field_params or {}).get(tag, {}))
        seed = int(_field_seed(self.random_state, tag).generate_state(1)[0])
        est = ModulatedINR(field_tag=tag, random_state=seed)
        return est.set_params(**params)

    def _ensure_state(self):
        if not hasattr(self, "inrs_"):
            self.inrs_ = {}
        if not hasattr(self, "meta_configs_"):
            self.meta_configs_ = {}

    def fit_normalization(self, cases):
        self.stats_ = fit_normalization(check_cases(cases))
        return self

    def fit_field(self, tag: str, cases, callback=None):
        cases = check_cases(cases)
        check_is_fitted(self, "stats_")
        self._ensure_state()
        est = self.field_estimator(check_field_tag(tag))
        est.fit([case_observations(c, tag, self.stats_) for c in cases], callback=callback)
        self.inrs_[tag] = est.weights_
        self.meta_configs_[tag] = est.meta_config()
        self.logs_ = {**getattr(self, "logs_", {}), tag: est.log_}
        return self

    def encode(self, cases) -> list:
        """Codes of every field for each case, as ``CaseCodes`` with targets."""
        cases = check_cases(cases)
        missing = [t for t in FIELDS if t not in getattr(self, "inrs_", {})]
        if missing or not hasattr(self, "stats_"):
            raise UntrainedModelError(f"missing trained INRs for {missing}")
        codes = {}
        for tag in FIELDS:
            obs = [case_observations(c, tag, self.stats_) for c in cases]
            codes[tag] = encode_dataset(obs, self.inrs_[tag], self.meta_configs_[tag])
        return [
            CaseCodes(
                c.case_id,
                codes["d"][c.case_id].z,
                codes["n"][c.case_id].z,
                c.inlet_velocity,
                {t: codes[t][c.case_id].z for t in PHYSICS_FIELDS},
            )
            for c in cases
        ]

    def fit_processor(self, case_codes):
        X = np.stack([c.input_vector() for c in case_codes])
        Y = np.stack([c.target_vector() for c in case_codes])
        params = dict(self.processor_params or {})
        seed = int(np.random.SeedSequence([0 if self.random_state is None else int(self.random_state), len(FIELDS)]).generate_state(1)[0])
        est = LatentProcessor(random_state=seed).set_params(**params)
        est.fit(X, Y)
        self.processor_ = est.weights_
        self.processor_log_ = est.log_
        return self

    def fit(self, cases, y=None):
        cases = check_cases(cases)
        self.fit_normalization(cases)
        for tag in FIELDS:
            self.fit_field(tag, cases)
        return self.fit_processor(self.encode(cases))

    def set_trained(self, inrs: dict, processor: ProcessorWeights | None, stats: NormalizationStats, meta_configs: dict):
        """Install externally loaded weights (for instance from a checkpoint)."""
        self.inrs_ = dict(inrs)
        self.processor_ = processor
        self.stats_ = stats
        self.meta_configs_ = dict(meta_configs)
        return self

    def infer_case(self, case: CaseSample):
        """Field query for a case using only its geometry and inlet velocity."""
        check_is_fitted(self, ["inrs_", "processor_", "stats_"])
        d_obs = case_observations(case, "d", self.stats_)
        n_obs = case_observations(case, "n", self.stats_)
        meta_cfg = {t: self.meta_configs_.get(t, MetaConfig()) for t in GEOMETRY_FIELDS}
        query, _ = infer_case(d_obs, n_obs, case.inlet_velocity, self.inrs_, self.processor_, meta_cfg, self.stats_)
        return query

    def reconstruct(self, case: CaseSample, tag: str, points=None) -> np.ndarray:
        """Auto-decode the case's own ``tag`` field and decode it at ``points``.

        Physical units. Defaults to the points the field is sampled on.
        """
        check_is_fitted(self, ["inrs_", "stats_"])
        tag = check_field_tag(tag)
        if tag not in self.inrs_:
            raise UntrainedModelError(f"no trained INR for {tag}")
        obs = case_observations(case, tag, self.stats_)
        z = inner_loop_encode(obs, self.inrs_[tag], self.meta_configs_.get(tag, MetaConfig()))
        pts = case.points_for(tag) if points is None else check_points(points)
        out = self.stats_.invert(tag, decode(z, self.inrs_[tag], pts))
        return out[:, 0] if out.shape[1] == 1 else out

    def predict(self, case: CaseSample, points=None) -> dict:
        """Physical-unit fields at ``points`` (default: the case's volume points)."""
        query = self.infer_case(case)
        return query(case.x_vol if points is None else check_points(points))

    def score(self, cases, y=None) -> float:
        """Negative mean normalized volume MSE over the physics fields."""
        from .evaluation import evaluate_model

        report = evaluate_model(check_cases(cases), self, self.stats_)
        return -float(np.mean([report.volume_mse[t] for t in PHYSICS_FIELDS]))
