"""Audio tagging heads over frozen encoder layer stacks.

Four head architectures operate on a layer stack of shape ``[L, n, d]``
(layers x frames x encoder dim):

- ``LAST_MLP``: linear classifier on the time-mean of the last layer.
- ``WA_MLP``: learnable softmax-weighted average over layers, time-mean,
  linear classifier.
- ``WA_TR``: weighted layer average, then one temporal transformer block
  over the pooled frame sequence, time-mean, classifier.
- ``TL_TR``: one shared temporal transformer block applied to every layer's
  pooled sequence, time-mean each into L summary tokens, one transformer
  block across those tokens, mean, classifier. An optional shared linear
  projection lowers the width from ``d`` to ``proj_dim`` before the
  transformer blocks.

All forward passes are pure functions of ``(stack, params)``; batched
training entry points live in :mod:`audiotap.training`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import nn
from .errors import CacheFormatError, InvalidInputError

CHECKPOINT_MAGIC = b"ATHC"
CHECKPOINT_VERSION = 1


class HeadVariant(str, Enum):
    LAST_MLP = "last_mlp"
    WA_MLP = "wa_mlp"
    WA_TR = "wa_tr"
    TL_TR = "tl_tr"


@dataclass(frozen=True)
class HeadConfig:
    """Architecture hyper-parameters; fully determines parameter layout.

    Args:
        variant: which head architecture to build.
        num_classes: size of the tag vocabulary (C).
        backbone_layers: number of encoder layers L in the input stack.
        backbone_dim: encoder width d.
        pool_frames: target frame count n' after non-overlapping mean
            pooling of each layer sequence.
        proj_dim: optional transformer width d'. ``None`` means no
            projection layer and d' = backbone_dim.
        attn_heads: attention heads in each transformer block (must divide
            the transformer width).
        ffn_mult: FFN hidden width as a multiple of the transformer width.
        use_time_pos: add a learnable positional embedding of length
            ``pool_frames`` before the temporal block. Off by default: the
            encoder's own positional encoding already orders the frames.
        use_layer_pos: add a learnable positional embedding of length
            ``backbone_layers`` before the layer-wise block (TL_TR only),
            so tokens keep their layer identity.
    """

    variant: HeadVariant
    num_classes: int
    backbone_layers: int
    backbone_dim: int
    pool_frames: int = 25
    proj_dim: int | None = None
    attn_heads: int = 1
    ffn_mult: int = 4
    use_time_pos: bool = False
    use_layer_pos: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", HeadVariant(self.variant))
        for name in ("num_classes", "backbone_layers", "backbone_dim", "pool_frames",
                     "attn_heads", "ffn_mult"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"HeadConfig.{name} must be positive")
        if self.proj_dim is not None:
            if self.proj_dim < 1:
                raise InvalidInputError("HeadConfig.proj_dim must be positive")
            if self.proj_dim > self.backbone_dim:
                raise InvalidInputError(
                    f"proj_dim {self.proj_dim} exceeds backbone_dim {self.backbone_dim}")
        if self.head_dim % self.attn_heads != 0:
            raise InvalidInputError(
                f"attn_heads {self.attn_heads} must divide transformer width {self.head_dim}")

    @property
    def head_dim(self) -> int:
        """Transformer width d' (backbone_dim when no projection)."""
        return self.backbone_dim if self.proj_dim is None else self.proj_dim

    @property
    def has_projection(self) -> bool:
        return self.proj_dim is not None

    @property
    def classifier_in(self) -> int:
        """Input width of the final classifier."""
        if self.variant in (HeadVariant.LAST_MLP, HeadVariant.WA_MLP):
            return self.backbone_dim
        return self.head_dim

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "num_classes": self.num_classes,
            "backbone_layers": self.backbone_layers,
            "backbone_dim": self.backbone_dim,
            "pool_frames": self.pool_frames,
            "proj_dim": self.proj_dim,
            "attn_heads": self.attn_heads,
            "ffn_mult": self.ffn_mult,
            "use_time_pos": self.use_time_pos,
            "use_layer_pos": self.use_layer_pos,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**d)


@dataclass
class TaggingResult:
    """Per-class scores plus the ranked top-k tags for one clip."""

    scores: np.ndarray                      # [C], each in [0, 1]
    top_k: list[tuple[str, float]]          # descending score, ties by index
    transcript: str | None = None


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class HeadParams:
    """Named parameter tensors for one head.

    Tensor names (presence depends on config):

    ``wa_weights`` [L]; ``proj.weight`` [d, d'], ``proj.bias`` [d'];
    ``time_pos`` [n', d']; ``layer_pos`` [L, d'];
    ``time_block.*`` and ``layer_block.*`` (see :mod:`audiotap.nn` for the
    per-block key list); ``classifier.weight`` [.., C], ``classifier.bias`` [C].
    """

    config: HeadConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: HeadConfig, seed: int = 0) -> "HeadParams":
        """Fresh parameters: zero classifier and layer weights (uniform
        softmax, 0.5 starting scores), scaled-uniform everything else."""
        rng = np.random.default_rng(seed)
        dp = config.head_dim
        t: dict[str, np.ndarray] = {}
        if config.variant in (HeadVariant.WA_MLP, HeadVariant.WA_TR):
            t["wa_weights"] = np.zeros(config.backbone_layers)
        if config.variant in (HeadVariant.WA_TR, HeadVariant.TL_TR):
            if config.has_projection:
                t["proj.weight"] = nn.scaled_uniform(
                    rng, (config.backbone_dim, dp), config.backbone_dim)
                t["proj.bias"] = np.zeros(dp)
            if config.use_time_pos:
                t["time_pos"] = nn.scaled_uniform(rng, (config.pool_frames, dp), dp)
            t.update(nn.init_block(rng, dp, config.ffn_mult, "time_block."))
        if config.variant is HeadVariant.TL_TR:
            if config.use_layer_pos:
                t["layer_pos"] = nn.scaled_uniform(rng, (config.backbone_layers, dp), dp)
            t.update(nn.init_block(rng, dp, config.ffn_mult, "layer_block."))
        t["classifier.weight"] = np.zeros((config.classifier_in, config.num_classes))
        t["classifier.bias"] = np.zeros(config.num_classes)
        return cls(config=config, tensors=t)

    def num_elements(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def copy(self) -> "HeadParams":
        return HeadParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.tensors.values())


# ---------------------------------------------------------------------------
# Stack operations
# ---------------------------------------------------------------------------


def temporal_pool(stack: np.ndarray, target: int) -> np.ndarray:
    """Non-overlapping mean pooling of the frame axis (-2) down to ``target``.

    The window size is ``floor(n / target)``; when ``target`` does not
    divide ``n`` the final window absorbs the remainder frames, so every
    input frame contributes to exactly one output frame.
    """
    n = stack.shape[-2]
    if target < 1:
        raise InvalidInputError("pool target must be positive")
    if n < target:
        raise InvalidInputError(f"cannot pool {n} frames down to {target}")
    k = n // target
    if n == target:
        return stack.copy()
    head = stack[..., : k * (target - 1), :]
    lead = head.reshape(*stack.shape[:-2], target - 1, k, stack.shape[-1]).mean(axis=-2)
    tail = stack[..., k * (target - 1):, :].mean(axis=-2, keepdims=True)
    return np.concatenate([lead, tail], axis=-2)


def weighted_average(stack: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Softmax-weighted convex combination over the layer axis (axis 0).

    ``stack`` is ``[L, ...]`` and ``w`` a raw score vector of length L;
    the output is ``sum_l softmax(w)_l * stack[l]``.
    """
    if w.ndim != 1 or w.shape[0] != stack.shape[0]:
        raise InvalidInputError(
            f"weight vector of length {w.shape} does not match {stack.shape[0]} layers")
    a, _ = nn.softmax_fwd(w)
    return np.tensordot(a, stack, axes=(0, 0))


# ---------------------------------------------------------------------------
# Batched core forward/backward
#
# Prepared inputs (see prepare_input): LAST_MLP [B, d]; WA_MLP [B, L, d];
# WA_TR / TL_TR [B, L, n', d]. All passes treat axis 0 as the batch.
# ---------------------------------------------------------------------------


def prepare_input(stack: np.ndarray, config: HeadConfig) -> np.ndarray:
    """Reduce a raw ``[L, n, d]`` stack to the head's training-time input.

    The reduction is deterministic and parameter-free, so it can be done
    once per clip: time-mean features for the MLP variants, pooled
    sequences for the transformer variants.
    """
    if stack.ndim != 3:
        raise InvalidInputError(f"expected stack [L, n, d], got shape {stack.shape}")
    L, _, d = stack.shape
    if L != config.backbone_layers or d != config.backbone_dim:
        raise InvalidInputError(
            f"stack {stack.shape} does not match config "
            f"(L={config.backbone_layers}, d={config.backbone_dim})")
    if config.variant is HeadVariant.LAST_MLP:
        return stack[-1].mean(axis=0)
    if config.variant is HeadVariant.WA_MLP:
        return stack.mean(axis=1)
    return temporal_pool(stack, config.pool_frames)


def forward_batch(x: np.ndarray, params: HeadParams):
    """Forward pass on a batch of prepared inputs.

    Returns ``(logits [B, C], cache)``; the cache feeds ``backward_batch``.
    """
    cfg = params.config
    t = params.tensors
    v = cfg.variant

    if v is HeadVariant.LAST_MLP:
        logits, c_cls = nn.linear_fwd(x, t["classifier.weight"], t["classifier.bias"])
        return logits, ("last", c_cls)

    if v is HeadVariant.WA_MLP:
        a, c_sm = nn.softmax_fwd(t["wa_weights"])
        feats = np.tensordot(x, a, axes=(1, 0))           # [B, d]
        logits, c_cls = nn.linear_fwd(feats, t["classifier.weight"], t["classifier.bias"])
        return logits, ("wa_mlp", x, a, c_sm, c_cls)

    if v is HeadVariant.WA_TR:
        a, c_sm = nn.softmax_fwd(t["wa_weights"])
        z = np.tensordot(a, x, axes=(0, 1))               # [B, n', d]
        c_proj = None
        if cfg.has_projection:
            z, c_proj = nn.linear_fwd(z, t["proj.weight"], t["proj.bias"])
        if cfg.use_time_pos:
            z = z + t["time_pos"]
        y, c_blk = nn.block_fwd(z, t, "time_block.", cfg.attn_heads)
        h = y.mean(axis=-2)
        logits, c_cls = nn.linear_fwd(h, t["classifier.weight"], t["classifier.bias"])
        return logits, ("wa_tr", x, a, c_sm, c_proj, c_blk, y.shape, c_cls)

    # TL_TR
    z = x                                                  # [B, L, n', d]
    c_proj = None
    if cfg.has_projection:
        z, c_proj = nn.linear_fwd(z, t["proj.weight"], t["proj.bias"])
    if cfg.use_time_pos:
        z = z + t["time_pos"]
    y, c_tb = nn.block_fwd(z, t, "time_block.", cfg.attn_heads)
    tok = y.mean(axis=-2)                                  # [B, L, d']
    if cfg.use_layer_pos:
        tok = tok + t["layer_pos"]
    u, c_lb = nn.block_fwd(tok, t, "layer_block.", cfg.attn_heads)
    pooled = u.mean(axis=-2)                               # [B, d']
    logits, c_cls = nn.linear_fwd(pooled, t["classifier.weight"], t["classifier.bias"])
    return logits, ("tl_tr", c_proj, c_tb, y.shape, c_lb, u.shape, c_cls)


def backward_batch(dlogits: np.ndarray, cache, params: HeadParams) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter tensor."""
    cfg = params.config
    grads: dict[str, np.ndarray] = {}
    kind = cache[0]

    if kind == "last":
        _, c_cls = cache
        _, dw, db = nn.linear_bwd(dlogits, c_cls)
        grads["classifier.weight"] = dw
        grads["classifier.bias"] = db
        return grads

    if kind == "wa_mlp":
        _, x, a, c_sm, c_cls = cache
        dfeats, dw, db = nn.linear_bwd(dlogits, c_cls)
        grads["classifier.weight"] = dw
        grads["classifier.bias"] = db
        da = np.einsum("bld,bd->l", x, dfeats)
        grads["wa_weights"] = nn.softmax_bwd(da, c_sm)
        return grads

    if kind == "wa_tr":
        _, x, a, c_sm, c_proj, c_blk, y_shape, c_cls = cache
        dh, dw, db = nn.linear_bwd(dlogits, c_cls)
        grads["classifier.weight"] = dw
        grads["classifier.bias"] = db
        dy = np.broadcast_to(dh[..., None, :], y_shape) / y_shape[-2]
        dz, blk_grads = nn.block_bwd(dy, c_blk, "time_block.")
        grads.update(blk_grads)
        if cfg.use_time_pos:
            grads["time_pos"] = dz.reshape(-1, *dz.shape[-2:]).sum(axis=0)
        if cfg.has_projection:
            dz, dpw, dpb = nn.linear_bwd(dz, c_proj)
            grads["proj.weight"] = dpw
            grads["proj.bias"] = dpb
        da = np.einsum("blnd,bnd->l", x, dz)
        grads["wa_weights"] = nn.softmax_bwd(da, c_sm)
        return grads

    # tl_tr
    _, c_proj, c_tb, y_shape, c_lb, u_shape, c_cls = cache
    dpooled, dw, db = nn.linear_bwd(dlogits, c_cls)
    grads["classifier.weight"] = dw
    grads["classifier.bias"] = db
    du = np.broadcast_to(dpooled[..., None, :], u_shape) / u_shape[-2]
    dtok, lb_grads = nn.block_bwd(du, c_lb, "layer_block.")
    grads.update(lb_grads)
    if cfg.use_layer_pos:
        grads["layer_pos"] = dtok.reshape(-1, *dtok.shape[-2:]).sum(axis=0)
    dy = np.broadcast_to(dtok[..., None, :], y_shape) / y_shape[-2]
    dz, tb_grads = nn.block_bwd(dy, c_tb, "time_block.")
    grads.update(tb_grads)
    if cfg.use_time_pos:
        grads["time_pos"] = dz.reshape(-1, *dz.shape[-2:]).sum(axis=0)
    if cfg.has_projection:
        _, dpw, dpb = nn.linear_bwd(dz, c_proj)
        grads["proj.weight"] = dpw
        grads["proj.bias"] = dpb
    return grads


# ---------------------------------------------------------------------------
# Spec-level single-stack forwards
# ---------------------------------------------------------------------------


def _forward_single(stack: np.ndarray, params: HeadParams) -> np.ndarray:
    x = prepare_input(stack, params.config)
    logits, _ = forward_batch(x[None], params)
    return logits[0]


def forward_last_mlp(stack: np.ndarray, params: HeadParams) -> np.ndarray:
    """Classifier on the time-mean of the last layer; returns logits [C]."""
    _expect(params, HeadVariant.LAST_MLP)
    return _forward_single(stack, params)


def forward_wa_mlp(stack: np.ndarray, params: HeadParams) -> np.ndarray:
    """Classifier on the time-mean of the learnable layer average."""
    _expect(params, HeadVariant.WA_MLP)
    return _forward_single(stack, params)


def forward_wa_tr(stack: np.ndarray, params: HeadParams) -> np.ndarray:
    """Weighted layer average -> temporal transformer -> classifier.

    ``stack`` may be raw ``[L, n, d]`` or already pooled to ``pool_frames``;
    pooling is applied here and is the identity when n == pool_frames.
    """
    _expect(params, HeadVariant.WA_TR)
    return _forward_single(stack, params)


def forward_tl_tr(stack: np.ndarray, params: HeadParams) -> np.ndarray:
    """Time transformer per layer, then transformer across layer tokens.

    Steps: pool each layer sequence to ``pool_frames``; apply the shared
    projection when configured; run the shared temporal block on each of
    the L sequences; time-mean each into a layer token; run the layer-wise
    block across the L tokens; mean and classify.
    """
    _expect(params, HeadVariant.TL_TR)
    return _forward_single(stack, params)


def _expect(params: HeadParams, variant: HeadVariant) -> None:
    if params.config.variant is not variant:
        raise InvalidInputError(
            f"params are for {params.config.variant.value}, not {variant.value}")


FORWARD_FNS = {
    HeadVariant.LAST_MLP: forward_last_mlp,
    HeadVariant.WA_MLP: forward_wa_mlp,
    HeadVariant.WA_TR: forward_wa_tr,
    HeadVariant.TL_TR: forward_tl_tr,
}


class TaggingHead:
    """A config + params bundle with convenience scoring methods."""

    def __init__(self, params: HeadParams):
        self.params = params

    @property
    def config(self) -> HeadConfig:
        return self.params.config

    @classmethod
    def create(cls, config: HeadConfig, seed: int = 0) -> "TaggingHead":
        return cls(HeadParams.initialize(config, seed=seed))

    def logits(self, stack: np.ndarray) -> np.ndarray:
        return FORWARD_FNS[self.config.variant](stack, self.params)

    def scores(self, stack: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(stack))

    def tag(self, stack: np.ndarray, class_names: list[str] | None = None,
            top_k: int = 5, transcript: str | None = None) -> TaggingResult:
        scores = self.scores(stack)
        if class_names is None:
            class_names = [str(i) for i in range(len(scores))]
        order = np.argsort(-scores, kind="stable")[:top_k]
        ranked = [(class_names[i], float(scores[i])) for i in order]
        return TaggingResult(scores=scores, top_k=ranked, transcript=transcript)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Checkpoint format
#
# Single little-endian file: magic "ATHC", u32 format version, u32 header
# length, JSON header {format_version, config, tensors: [{name, dtype,
# shape}]}, then each tensor's raw bytes in header order.
# ---------------------------------------------------------------------------

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path: str | Path, params: HeadParams) -> None:
    tensors = []
    payload = io.BytesIO()
    for name, arr in params.tensors.items():
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        tensors.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "tensors": tensors,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(payload.getvalue())


def load_checkpoint(path: str | Path) -> HeadParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CacheFormatError(f"{path}: not a head checkpoint (magic {magic!r})")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CacheFormatError(
                f"{path}: unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})")
        header = json.loads(f.read(header_len).decode("utf-8"))
        config = HeadConfig.from_dict(header["config"])
        tensors: dict[str, np.ndarray] = {}
        for spec in header["tensors"]:
            np_dtype = np.dtype(_DTYPES[spec["dtype"]])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = f.read(count * np_dtype.itemsize)
            if len(raw) != count * np_dtype.itemsize:
                raise CacheFormatError(f"{path}: truncated tensor {spec['name']}")
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(spec["shape"]).copy()
            tensors[spec["name"]] = arr
    return HeadParams(config=config, tensors=tensors)
