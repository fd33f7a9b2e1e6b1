"""Head training on cached representations: data, loss, optimizer, metrics.

The data unit is a JSONL manifest (one clip per line) plus a JSON class
map (name -> index). Training itself is plain numpy: BCE on sigmoid
outputs, Adam, seeded per-epoch shuffling, so a run is reproducible
bit-for-bit from ``(seed, manifest, cache)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import RepresentationCache
from .errors import InvalidInputError, TrainingError
from .heads import (
    HeadConfig,
    HeadParams,
    TaggingHead,
    backward_batch,
    forward_batch,
    load_checkpoint,
    prepare_input,
    sigmoid,
)
from .metrics import MetricsReport, compute_metrics

FOLD_SPLITS = tuple(f"fold{i}" for i in range(1, 6))
VALID_SPLITS = ("train", "eval") + FOLD_SPLITS


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    """One audio clip: where it lives, how long it is, what it contains."""

    utterance_id: str
    audio_path: str
    duration_s: float
    labels: frozenset[int]
    split: str

    def __post_init__(self):
        if self.split not in VALID_SPLITS:
            raise InvalidInputError(
                f"unknown split {self.split!r} (expected one of {VALID_SPLITS})")
        if self.duration_s <= 0:
            raise InvalidInputError(
                f"{self.utterance_id!r}: duration_s must be positive")
        if not self.labels:
            raise InvalidInputError(f"{self.utterance_id!r}: empty label set")


def load_class_map(path: str | Path) -> dict[str, int]:
    """JSON name -> index map; indices must be unique and non-negative."""
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict) or not raw:
        raise InvalidInputError(f"{path}: class map must be a non-empty JSON object")
    indices = list(raw.values())
    if any((not isinstance(i, int)) or i < 0 for i in indices):
        raise InvalidInputError(f"{path}: class indices must be non-negative integers")
    if len(set(indices)) != len(indices):
        raise InvalidInputError(f"{path}: duplicate class indices")
    return dict(raw)


def ingest_manifest(path: str | Path,
                    class_map: dict[str, int] | None = None,
                    num_classes: int | None = None) -> list[ManifestEntry]:
    """Parse and validate a JSONL manifest.

    Each line is an object with ``utterance_id``, ``audio_path``,
    ``duration_s``, ``labels`` and ``split``. Labels may be class names
    (resolved through ``class_map``) or bare indices. Errors carry the
    offending line number.
    """
    if class_map is not None and num_classes is None:
        num_classes = len(class_map)
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}:{lineno}: malformed JSON ({e})") from e
            try:
                labels = _resolve_labels(obj.get("labels"), class_map, num_classes)
                entry = ManifestEntry(
                    utterance_id=str(obj["utterance_id"]),
                    audio_path=str(obj["audio_path"]),
                    duration_s=float(obj["duration_s"]),
                    labels=labels,
                    split=str(obj["split"]),
                )
            except KeyError as e:
                raise InvalidInputError(f"{path}:{lineno}: missing field {e}") from e
            except InvalidInputError as e:
                raise InvalidInputError(f"{path}:{lineno}: {e}") from e
            entries.append(entry)
    return entries


def _resolve_labels(raw, class_map, num_classes) -> frozenset[int]:
    if not raw:
        raise InvalidInputError("missing or empty 'labels'")
    out = set()
    for item in raw:
        if isinstance(item, str):
            if class_map is None:
                raise InvalidInputError(
                    f"label {item!r} is a name but no class map was given")
            if item not in class_map:
                raise InvalidInputError(f"unknown label {item!r}")
            out.add(class_map[item])
        else:
            idx = int(item)
            if idx < 0 or (num_classes is not None and idx >= num_classes):
                raise InvalidInputError(f"label index {idx} out of range")
            out.add(idx)
    return frozenset(out)


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    """Serialize entries back to JSONL (label indices, not names)."""
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps({
                "utterance_id": e.utterance_id,
                "audio_path": e.audio_path,
                "duration_s": e.duration_s,
                "labels": sorted(e.labels),
                "split": e.split,
            }) + "\n")


def esc50_manifest(meta_csv: str | Path,
                   audio_dir: str | Path) -> tuple[list[ManifestEntry], dict[str, int]]:
    """Convert the ESC-50 metadata CSV to manifest entries plus a class map.

    Every clip is 5 seconds; the official fold column becomes the
    ``fold1..fold5`` split so the 5-fold protocol can run unchanged.
    """
    audio_dir = Path(audio_dir)
    entries = []
    class_map: dict[str, int] = {}
    with open(meta_csv, newline="") as f:
        for row in csv.DictReader(f):
            target = int(row["target"])
            class_map.setdefault(row["category"], target)
            entries.append(ManifestEntry(
                utterance_id=Path(row["filename"]).stem,
                audio_path=str(audio_dir / row["filename"]),
                duration_s=5.0,
                labels=frozenset([target]),
                split=f"fold{int(row['fold'])}",
            ))
    if not entries:
        raise InvalidInputError(f"{meta_csv}: no rows")
    return entries, class_map


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyper-parameters. Defaults follow the standard audio
    tagging pipeline: batch size 48 with Adam."""

    lr: float
    epochs: int
    batch_size: int = 48
    loss: str = "bce_multilabel"          # or "bce_onehot"
    seed: int = 0
    lr_schedule: str = "constant"         # or "step_decay"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidInputError("lr must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be >= 1")
        if self.loss not in ("bce_multilabel", "bce_onehot"):
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        if self.lr_schedule not in ("constant", "step_decay"):
            raise InvalidInputError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if self.lr_schedule == "constant" or epoch <= 10:
            return self.lr
        halvings = (epoch - 11) // 5 + 1
        return self.lr * (0.5 ** halvings)


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all entries, with its gradient.

    Computed in the numerically stable softplus form
    ``softplus(z) - t * z``; zero logits give ln(2) per entry.
    """
    z = logits
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    loss = float((softplus - targets * z).mean())
    dlogits = (sigmoid(z) - targets) / z.size
    return loss, dlogits


class Adam:
    """Adam over a named parameter dict, with bias correction."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# Feature access
# ---------------------------------------------------------------------------


class FeatureSource:
    """Prepared head inputs for a list of entries.

    Prepared features (see :func:`audiotap.heads.prepare_input`) are kept
    in memory as float32 when they fit under ``preload_budget_bytes``;
    otherwise each batch streams from the cache.
    """

    def __init__(self, entries: list[ManifestEntry], cache: RepresentationCache,
                 config: HeadConfig, preload_budget_bytes: int = 2 << 30):
        self.entries = entries
        self.cache = cache
        self.config = config
        missing = [e.utterance_id for e in entries if e.utterance_id not in cache]
        if missing:
            shown = ", ".join(missing[:10]) + ("..." if len(missing) > 10 else "")
            raise TrainingError(
                f"{len(missing)} utterance(s) missing from cache: {shown}")
        self._preloaded: np.ndarray | None = None
        if entries:
            first = self._prepare(entries[0].utterance_id)
            total = first.nbytes * len(entries)
            if total <= preload_budget_bytes:
                buf = np.empty((len(entries), *first.shape), dtype=np.float32)
                buf[0] = first
                for i, e in enumerate(entries[1:], start=1):
                    buf[i] = self._prepare(e.utterance_id)
                self._preloaded = buf

    def _prepare(self, utterance_id: str) -> np.ndarray:
        stack = self.cache.read(utterance_id)
        return prepare_input(stack.values.astype(np.float32), self.config)

    def __len__(self) -> int:
        return len(self.entries)

    def batch(self, indices: np.ndarray) -> np.ndarray:
        if self._preloaded is not None:
            return self._preloaded[indices]
        return np.stack([self._prepare(self.entries[i].utterance_id) for i in indices])


def entry_targets(entries: list[ManifestEntry], num_classes: int) -> np.ndarray:
    """Multi-hot target matrix ``[N, C]`` in entry order."""
    t = np.zeros((len(entries), num_classes))
    for i, e in enumerate(entries):
        for c in e.labels:
            if c >= num_classes:
                raise TrainingError(
                    f"{e.utterance_id!r}: label {c} >= num_classes {num_classes}")
            t[i, c] = 1.0
    return t


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    head: TaggingHead
    log: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        step_records = [r for r in self.log if "loss" in r]
        return step_records[-1]["loss"] if step_records else math.nan


def train_head(head_config: HeadConfig, train_config: TrainConfig,
               cache: RepresentationCache, manifest: list[ManifestEntry],
               train_splits: tuple[str, ...] = ("train",),
               eval_split: str | None = None,
               max_steps: int | None = None,
               preload_budget_bytes: int = 2 << 30) -> TrainOutcome:
    """Train one head on the cached representations of ``train_splits``.

    Data order is reshuffled every epoch by a generator seeded from
    ``train_config.seed``, and parameters are initialized from the same
    seed, so identical inputs give identical checkpoints. Aborts with the
    step number if the loss goes non-finite.
    """
    train_entries = [e for e in manifest if e.split in train_splits]
    if not train_entries:
        raise TrainingError(f"no manifest entries in splits {train_splits}")
    source = FeatureSource(train_entries, cache, head_config, preload_budget_bytes)
    targets = entry_targets(train_entries, head_config.num_classes)

    params = HeadParams.initialize(head_config, seed=train_config.seed)
    opt = Adam(params.tensors, train_config.lr,
               train_config.adam_beta1, train_config.adam_beta2, train_config.adam_eps)
    rng = np.random.default_rng(train_config.seed)

    log: list[dict] = []
    step = 0
    done = False
    for epoch in range(1, train_config.epochs + 1):
        lr = train_config.lr_at(epoch)
        order = rng.permutation(len(source))
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            x = source.batch(idx)
            y = targets[idx]
            logits, fwd_cache = forward_batch(x, params)
            loss, dlogits = bce_with_logits(logits, y)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step + 1}")
            grads = backward_batch(dlogits, fwd_cache, params)
            opt.step(params.tensors, grads, lr=lr)
            step += 1
            epoch_losses.append(loss)
            log.append({"step": step, "epoch": epoch, "loss": loss, "lr": lr})
            if max_steps is not None and step >= max_steps:
                done = True
                break
        summary = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses))}
        if eval_split is not None:
            report = evaluate(TaggingHead(params), cache, manifest, eval_split,
                              preload_budget_bytes=preload_budget_bytes)
            summary["eval_mAP"] = report.map
            summary["eval_accuracy"] = report.accuracy
        log.append(summary)
        if done:
            break

    if not params.all_finite():
        raise TrainingError("non-finite parameters after training")
    return TrainOutcome(head=TaggingHead(params), log=log)


def _as_head(model) -> TaggingHead:
    if isinstance(model, TaggingHead):
        return model
    if isinstance(model, HeadParams):
        return TaggingHead(model)
    return TaggingHead(load_checkpoint(model))


def predict_scores(model, cache: RepresentationCache, entries: list[ManifestEntry],
                   batch_size: int = 64,
                   preload_budget_bytes: int = 2 << 30) -> np.ndarray:
    """Sigmoid scores ``[N, C]`` for a list of entries, in manifest order."""
    head = _as_head(model)
    source = FeatureSource(entries, cache, head.config, preload_budget_bytes)
    out = np.empty((len(entries), head.config.num_classes))
    for start in range(0, len(entries), batch_size):
        idx = np.arange(start, min(start + batch_size, len(entries)))
        logits, _ = forward_batch(source.batch(idx), head.params)
        out[idx] = sigmoid(logits)
    return out


def evaluate(model, cache: RepresentationCache, manifest: list[ManifestEntry],
             split: str, threshold: float = 0.5, batch_size: int = 64,
             preload_budget_bytes: int = 2 << 30) -> MetricsReport:
    """Score every clip in ``split`` once and compute the metric suite.

    ``model`` may be a :class:`TaggingHead`, :class:`HeadParams`, or a
    checkpoint path.
    """
    head = _as_head(model)
    entries = [e for e in manifest if e.split == split]
    if not entries:
        raise TrainingError(f"split {split!r} has no manifest entries")
    scores = predict_scores(head, cache, entries, batch_size, preload_budget_bytes)
    targets = entry_targets(entries, head.config.num_classes)
    return compute_metrics(targets, scores, threshold)


@dataclass
class CrossValResult:
    accuracy: float                 # pooled over all held-out predictions
    fold_accuracies: dict[str, float]
    num_clips: int


def crossval_esc50(head_config: HeadConfig, train_config: TrainConfig,
                   cache: RepresentationCache, manifest: list[ManifestEntry],
                   preload_budget_bytes: int = 2 << 30) -> CrossValResult:
    """Official 5-fold protocol: five heads, each scored on its held-out
    fold; accuracy is pooled over every prediction."""
    by_fold = {s: [e for e in manifest if e.split == s] for s in FOLD_SPLITS}
    empty = [s for s, es in by_fold.items() if not es]
    if empty:
        raise TrainingError(f"manifest is missing folds: {', '.join(empty)}")

    correct = 0
    total = 0
    fold_accuracies = {}
    for held_out in FOLD_SPLITS:
        train_splits = tuple(s for s in FOLD_SPLITS if s != held_out)
        outcome = train_head(head_config, train_config, cache, manifest,
                             train_splits=train_splits,
                             preload_budget_bytes=preload_budget_bytes)
        entries = by_fold[held_out]
        scores = predict_scores(outcome.head, cache, entries,
                                preload_budget_bytes=preload_budget_bytes)
        pred = scores.argmax(axis=1)
        hits = sum(1 for p, e in zip(pred, entries) if int(p) in e.labels)
        fold_accuracies[held_out] = hits / len(entries)
        correct += hits
        total += len(entries)
    return CrossValResult(accuracy=correct / total,
                          fold_accuracies=fold_accuracies, num_clips=total)
