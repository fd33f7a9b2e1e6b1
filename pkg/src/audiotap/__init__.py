"""Audio tagging on top of a frozen speech-recognition encoder.

The package trains lightweight heads on the intermediate layer
representations of a frozen ASR encoder so that one encoder forward pass
yields both a transcript and audio event tags, and ships the analysis
tools used to study that setup: per-layer linear probing, SNR-controlled
noise mixing with WER measurement, and an analytic cost model.
"""

from .efficiency import CostReport, cost_report, count_macs, count_params, speedup_report
from .heads import (
    HeadConfig,
    HeadParams,
    HeadVariant,
    TaggingHead,
    TaggingResult,
    forward_last_mlp,
    forward_tl_tr,
    forward_wa_mlp,
    forward_wa_tr,
    load_checkpoint,
    save_checkpoint,
    temporal_pool,
    weighted_average,
)

__version__ = "0.1.0"

__all__ = [
    "CostReport",
    "HeadConfig",
    "HeadParams",
    "HeadVariant",
    "TaggingHead",
    "TaggingResult",
    "cost_report",
    "count_macs",
    "count_params",
    "forward_last_mlp",
    "forward_tl_tr",
    "forward_wa_mlp",
    "forward_wa_tr",
    "load_checkpoint",
    "save_checkpoint",
    "speedup_report",
    "temporal_pool",
    "weighted_average",
    "__version__",
]
