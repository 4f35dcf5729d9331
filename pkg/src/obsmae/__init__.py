"""Multi-modal masked autoencoder for gap filling and data assimilation of
satellite observations."""

from .core import (
    GridSpec,
    ModalityKind,
    ModalitySpec,
    NormalizationStats,
    ObservationCube,
    compute_norm_stats,
    denormalize,
    load_config,
    normalize,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "ModalityKind",
    "ModalitySpec",
    "NormalizationStats",
    "ObservationCube",
    "compute_norm_stats",
    "denormalize",
    "load_config",
    "normalize",
]
