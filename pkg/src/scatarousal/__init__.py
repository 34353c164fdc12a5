"""Sleep-arousal detection from multi-channel PSG: wavelet scattering features,
log-median normalization, a stacked-LSTM frame classifier, posterior
averaging and gross AUROC/AUPRC scoring."""
from ._accel import USE_NUMBA
from .filterbank import FilterBankConfig, build_filterbank, littlewood_paley_bounds
from .scattering import (
    ScatteringFeatures,
    ScatteringPath,
    apply_normalizer,
    fit_normalizer,
    frame_labels,
    path_count,
    scatter_channel,
    scatter_record,
)

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA",
    "FilterBankConfig",
    "build_filterbank",
    "littlewood_paley_bounds",
    "ScatteringFeatures",
    "ScatteringPath",
    "apply_normalizer",
    "fit_normalizer",
    "frame_labels",
    "path_count",
    "scatter_channel",
    "scatter_record",
]
