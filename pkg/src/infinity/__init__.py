"""Mesh-free flow surrogate built from meta-learned, shift-modulated implicit neural representations."""

from .dataset import CaseSample, GeneratorConfig, NormalizationStats, generate_case, sweep_configs
from .estimators import InfinitySurrogate, LatentProcessor, ModulatedINR
from .evaluation import EvaluationReport, evaluate_model
from .inr import FIELDS, InrArchitecture, SharedInrWeights
from .meta import FieldObservations, MetaConfig

__version__ = "0.1.0"

__all__ = [
    "CaseSample",
    "EvaluationReport",
    "FIELDS",
    "FieldObservations",
    "GeneratorConfig",
    "InfinitySurrogate",
    "InrArchitecture",
    "LatentProcessor",
    "MetaConfig",
    "ModulatedINR",
    "NormalizationStats",
    "SharedInrWeights",
    "evaluate_model",
    "generate_case",
    "sweep_configs",
]
