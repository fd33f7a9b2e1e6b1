"""Analytic multiply-accumulate and parameter counts for every head config.

Counting conventions:

- Dense layers (projections, FFN, classifier) are counted as one MAC per
  fused multiply-add, i.e. ``rows x d_in x d_out``.
- The two attention matmuls (query-key scores and attention-value mixing)
  are counted at two ops per element pair, the convention common FLOPs
  counters apply to batched matmuls; per block on a length-``m`` sequence
  of width ``d`` this contributes ``4 * m^2 * d``.
- Mean pooling, weighted layer averaging, normalizations, softmax,
  activations and bias adds are treated as free: they are add-dominated
  and orders of magnitude below the matmul terms.

Parameter counts are exact element counts of the tensors instantiated by
:class:`audiotap.heads.HeadParams` (verified tensor-for-tensor in the test
suite).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidInputError
from .heads import HeadConfig, HeadVariant

ATTN_MATMUL_OPS = 4  # coefficient of m^2 * d per transformer block

COMPONENTS = (
    "projection",
    "temporal_transformer",
    "layer_transformer",
    "weighted_average",
    "classifier",
    "positional",
)


@dataclass(frozen=True)
class CostReport:
    """MACs per clip and trainable parameters, with a per-component split."""

    macs: int
    params: int
    breakdown: dict[str, tuple[int, int]]  # component -> (macs, params)

    def to_dict(self) -> dict:
        return {
            "macs": self.macs,
            "params": self.params,
            "breakdown": {k: {"macs": m, "params": p}
                          for k, (m, p) in self.breakdown.items()},
        }


def block_param_count(dim: int, ffn_mult: int) -> int:
    """Parameters of one pre-norm transformer block of width ``dim``."""
    attn = 4 * dim * dim + 4 * dim
    ffn = 2 * ffn_mult * dim * dim + (ffn_mult + 1) * dim
    norms = 4 * dim
    return attn + ffn + norms


def block_mac_count(seq_len: int, dim: int, ffn_mult: int) -> int:
    """MACs of one transformer block applied to a length-``seq_len`` input."""
    projections = (4 + 2 * ffn_mult) * seq_len * dim * dim
    attention = ATTN_MATMUL_OPS * seq_len * seq_len * dim
    return projections + attention


def _component_costs(config: HeadConfig) -> dict[str, tuple[int, int]]:
    L = config.backbone_layers
    d = config.backbone_dim
    dp = config.head_dim
    np_ = config.pool_frames
    C = config.num_classes
    f = config.ffn_mult
    v = config.variant

    costs = {name: (0, 0) for name in COMPONENTS}
    costs["classifier"] = (config.classifier_in * C, config.classifier_in * C + C)

    if v in (HeadVariant.WA_MLP, HeadVariant.WA_TR):
        costs["weighted_average"] = (0, L)

    if v in (HeadVariant.WA_TR, HeadVariant.TL_TR):
        if config.has_projection:
            proj_params = d * dp + dp
            proj_rows = np_ if v is HeadVariant.WA_TR else L * np_
            costs["projection"] = (proj_rows * d * dp, proj_params)
        n_temporal = 1 if v is HeadVariant.WA_TR else L
        costs["temporal_transformer"] = (
            n_temporal * block_mac_count(np_, dp, f),
            block_param_count(dp, f),
        )
        pos_params = np_ * dp if config.use_time_pos else 0
        if v is HeadVariant.TL_TR:
            costs["layer_transformer"] = (
                block_mac_count(L, dp, f),
                block_param_count(dp, f),
            )
            if config.use_layer_pos:
                pos_params += L * dp
        costs["positional"] = (0, pos_params)

    return costs


def cost_report(config: HeadConfig) -> CostReport:
    """Analytic cost of one tagging forward pass for ``config``.

    The MAC total is per clip and independent of the raw clip length:
    pooling reduces every layer sequence to ``config.pool_frames`` before
    any counted matmul runs.
    """
    breakdown = _component_costs(config)
    macs = sum(m for m, _ in breakdown.values())
    params = sum(p for _, p in breakdown.values())
    return CostReport(macs=macs, params=params, breakdown=breakdown)


def count_params(config: HeadConfig) -> tuple[int, dict[str, int]]:
    """Exact trainable parameter count plus a per-component breakdown."""
    report = cost_report(config)
    return report.params, {k: p for k, (_, p) in report.breakdown.items()}


def count_macs(config: HeadConfig) -> tuple[int, dict[str, int]]:
    """Analytic MAC count per clip plus a per-component breakdown."""
    report = cost_report(config)
    return report.macs, {k: m for k, (m, _) in report.breakdown.items()}


def speedup_report(report: CostReport, reference_macs: int) -> float:
    """How many times cheaper this head is than a reference MAC budget."""
    if reference_macs <= 0:
        raise InvalidInputError("reference_macs must be positive")
    if report.macs <= 0:
        raise InvalidInputError("cost report has zero MACs")
    return reference_macs / report.macs
