"""Noise-robustness and representation analysis tools.

Covers four related studies over a frozen encoder:

- SNR-controlled mixing of speech with background sound clips.
- Word error rate of transcripts against references.
- Per-layer linear probing of cached representations on a sound
  classification task.
- Class-wise comparison of ASR robustness to a background sound against
  linear-probe recognizability of that sound (rank correlation).

SNR uses the full-clip power convention ``P = mean(x^2)``; mixed output is
``speech + alpha * noise`` with no renormalization or clipping, so the
backbone sees exactly the energy ratio requested.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import spearmanr

from .cache import RepresentationCache
from .errors import InvalidInputError
from .metrics import per_class_f1
from .training import Adam, ManifestEntry

CLEAN = math.inf  # SNR sentinel: no noise added

TEXT_NORMALIZER_VERSION = "v1"  # lowercase, strip ASCII punctuation, collapse whitespace

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixSpec:
    """Provenance of one mixed clip."""

    speech_id: str
    noise_id: str
    snr_db: float
    seed: int


def signal_power(x: np.ndarray) -> float:
    """Mean squared amplitude over the full clip."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x)) if x.size else 0.0


def fit_noise_to_length(noise: np.ndarray, length: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Crop (or loop then crop) noise to ``length`` at a seeded offset."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise InvalidInputError("noise clip is empty")
    if noise.size < length:
        reps = -(-(length + noise.size) // noise.size)
        noise = np.tile(noise, reps)
    offset = int(rng.integers(0, noise.size - length + 1))
    return noise[offset:offset + length]


def mix_at_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float,
               seed: int = 0) -> np.ndarray:
    """Mix noise into speech at a target SNR in dB.

    The noise is cropped/looped to the speech length with a seeded offset,
    then scaled by ``alpha = sqrt(P_speech / (P_noise * 10^(snr/10)))`` so
    the component energy ratio equals ``snr_db`` exactly. ``snr_db`` may be
    the ``CLEAN`` sentinel (+inf), returning the speech unchanged.
    """
    speech = np.asarray(speech, dtype=np.float64)
    if speech.ndim != 1 or speech.size == 0:
        raise InvalidInputError("speech must be a non-empty 1-D waveform")
    p_speech = signal_power(speech)
    if p_speech == 0.0:
        raise InvalidInputError("speech has zero power; SNR is undefined")
    if math.isinf(snr_db) and snr_db > 0:
        return speech.copy()
    if not math.isfinite(snr_db):
        raise InvalidInputError(f"snr_db must be finite or +inf, got {snr_db}")

    rng = np.random.default_rng(seed)
    fitted = fit_noise_to_length(np.asarray(noise, dtype=np.float64).ravel(),
                                 speech.size, rng)
    p_noise = signal_power(fitted)
    if p_noise == 0.0:
        raise InvalidInputError("noise has zero power at finite SNR")
    alpha = math.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return speech + alpha * fitted


def measured_snr_db(speech: np.ndarray, scaled_noise: np.ndarray) -> float:
    """Re-measure the component SNR of an existing mix."""
    return 10.0 * math.log10(signal_power(speech) / signal_power(scaled_noise))


# ---------------------------------------------------------------------------
# Word error rate
# ---------------------------------------------------------------------------


def normalize_text(text: str) -> list[str]:
    """Tokenize for WER: lowercase, drop ASCII punctuation, split on
    whitespace (normalizer ``v1``; pinned so fixtures stay stable)."""
    return text.lower().translate(_PUNCT_TABLE).split()


def wer(reference: str, hypothesis: str) -> float:
    """(substitutions + deletions + insertions) / reference length.

    Both strings pass through :func:`normalize_text` first; the edit
    distance is computed over word tokens by dynamic programming.
    """
    ref = normalize_text(reference)
    hyp = normalize_text(hypothesis)
    if not ref:
        raise InvalidInputError("reference is empty after normalization")
    prev = np.arange(len(hyp) + 1)
    for i, rtok in enumerate(ref, start=1):
        cur = np.empty(len(hyp) + 1, dtype=np.int64)
        cur[0] = i
        for j, htok in enumerate(hyp, start=1):
            sub = prev[j - 1] + (rtok != htok)
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return float(prev[-1]) / len(ref)


# ---------------------------------------------------------------------------
# SNR sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpeechClip:
    clip_id: str
    waveform: np.ndarray
    reference: str


@dataclass(frozen=True)
class NoiseClip:
    clip_id: str
    waveform: np.ndarray
    noise_class: str = ""


@dataclass(frozen=True)
class MixRecord:
    speech_id: str
    noise_id: str
    noise_class: str
    snr_db: float
    wer: float


@dataclass
class SweepResult:
    """Mean WER per SNR plus every underlying (speech, noise, SNR) record."""

    mean_wer: dict[float, float]
    records: list[MixRecord] = field(default_factory=list)

    def per_class_wer(self, snr_db: float) -> dict[str, float]:
        """Mean WER per noise class at one SNR point."""
        sums: dict[str, list[float]] = {}
        for r in self.records:
            if r.snr_db == snr_db:
                sums.setdefault(r.noise_class, []).append(r.wer)
        return {cls: float(np.mean(v)) for cls, v in sorted(sums.items())}


def snr_sweep(speech_clips: list[SpeechClip], noise_clips: list[NoiseClip],
              snr_list: list[float],
              transcriber: Callable[[np.ndarray], str],
              seed: int = 0, noises_per_speech: int = 1) -> SweepResult:
    """Transcribe speech mixed with sampled noise at each SNR.

    For every speech clip, ``noises_per_speech`` noise clips are drawn
    (seeded, without replacement when possible) and the same draw is used
    at every SNR so points along the sweep are comparable. The ``CLEAN``
    sentinel skips mixing entirely.
    """
    if not speech_clips:
        raise InvalidInputError("no speech clips given")
    rng = np.random.default_rng(seed)
    pairs: list[tuple[SpeechClip, NoiseClip, int]] = []
    for clip in speech_clips:
        if noise_clips:
            k = min(noises_per_speech, len(noise_clips))
            chosen = rng.choice(len(noise_clips), size=k, replace=False)
            for idx in chosen:
                pairs.append((clip, noise_clips[int(idx)], int(rng.integers(2 ** 31))))
        else:
            pairs.append((clip, None, 0))

    mean_wer: dict[float, float] = {}
    records: list[MixRecord] = []
    for snr_db in snr_list:
        errors = []
        for clip, noise, mix_seed in pairs:
            if noise is None or (math.isinf(snr_db) and snr_db > 0):
                mixed = clip.waveform
            else:
                mixed = mix_at_snr(clip.waveform, noise.waveform, snr_db, seed=mix_seed)
            hyp = transcriber(mixed)
            e = wer(clip.reference, hyp)
            errors.append(e)
            records.append(MixRecord(
                speech_id=clip.clip_id,
                noise_id=noise.clip_id if noise is not None else "",
                noise_class=noise.noise_class if noise is not None else "",
                snr_db=snr_db, wer=e))
        mean_wer[snr_db] = float(np.mean(errors))
    return SweepResult(mean_wer=mean_wer, records=records)


# ---------------------------------------------------------------------------
# Layer probing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """Fixed training budget applied to every layer, so accuracies are
    comparable across layers and backbones."""

    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    standardize: bool = True  # per-dim train-set z-scoring before the probe


@dataclass(frozen=True)
class ProbeResult:
    layer_index: int
    accuracy: float
    per_class_f1: np.ndarray


def _layer_mean_features(cache: RepresentationCache,
                         entries: list[ManifestEntry]) -> np.ndarray:
    """[N, L, d] time-mean features, one cache read per clip."""
    feats = None
    for i, e in enumerate(entries):
        stack = cache.read(e.utterance_id)
        m = stack.values.astype(np.float32).mean(axis=1)
        if feats is None:
            feats = np.empty((len(entries), *m.shape), dtype=np.float32)
        feats[i] = m
    return feats


def _train_linear_probe(x: np.ndarray, y: np.ndarray, num_classes: int,
                        cfg: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression, Adam, seeded shuffling."""
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    opt = Adam({"w": w, "b": b}, cfg.lr)
    onehot = np.eye(num_classes)[y]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = x[idx] @ w + b
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            dlogits = (p - onehot[idx]) / len(idx)
            opt.step({"w": w, "b": b},
                     {"w": x[idx].T @ dlogits, "b": dlogits.sum(axis=0)})
    return w, b


def probe_layers(cache: RepresentationCache, manifest: list[ManifestEntry],
                 num_classes: int | None = None,
                 train_split: str = "train", eval_split: str = "eval",
                 config: ProbeConfig = ProbeConfig()) -> list[ProbeResult]:
    """Train one linear probe per layer; report held-out accuracy and F1.

    Features are the time-mean of each layer's representation. Every layer
    gets the identical training budget from ``config``.
    """
    train_entries = [e for e in manifest if e.split == train_split]
    eval_entries = [e for e in manifest if e.split == eval_split]
    if not train_entries or not eval_entries:
        raise InvalidInputError(
            f"need entries in both {train_split!r} and {eval_split!r}")

    def single_label(e: ManifestEntry) -> int:
        return min(e.labels)

    y_train = np.array([single_label(e) for e in train_entries])
    y_eval = np.array([single_label(e) for e in eval_entries])
    if num_classes is None:
        num_classes = int(max(y_train.max(), y_eval.max())) + 1
    if len(np.unique(y_train)) < 2:
        raise InvalidInputError("probing needs at least 2 classes in the train split")

    x_train = _layer_mean_features(cache, train_entries)
    x_eval = _layer_mean_features(cache, eval_entries)
    num_layers = x_train.shape[1]

    results = []
    eye = np.eye(num_classes)
    for layer in range(num_layers):
        xt = x_train[:, layer, :].astype(np.float64)
        xe = x_eval[:, layer, :].astype(np.float64)
        if config.standardize:
            mu = xt.mean(axis=0)
            sd = xt.std(axis=0) + 1e-8
            xt = (xt - mu) / sd
            xe = (xe - mu) / sd
        w, b = _train_linear_probe(xt, y_train, num_classes, config)
        pred = (xe @ w + b).argmax(axis=1)
        accuracy = float((pred == y_eval).mean())
        f1 = per_class_f1(eye[y_eval], eye[pred], threshold=0.5)
        results.append(ProbeResult(layer_index=layer, accuracy=accuracy,
                                   per_class_f1=f1))
    return results


def best_layer_histogram(results: list[ProbeResult]) -> np.ndarray:
    """For each class, the argmax-F1 layer (ties to the lower layer);
    returns counts per layer, summing to the class count."""
    if not results:
        raise InvalidInputError("no probe results")
    ordered = sorted(results, key=lambda r: r.layer_index)
    f1 = np.stack([r.per_class_f1 for r in ordered])   # [L, C]
    best = f1.argmax(axis=0)
    return np.bincount(best, minlength=f1.shape[0])


# ---------------------------------------------------------------------------
# Robustness vs recognizability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessPoint:
    """One background sound class: how much it hurts ASR vs how well the
    encoder's representation can identify it."""

    sound_class: str
    wer_increase: float  # WER at the low SNR minus WER at the high SNR
    f1: float


def robustness_vs_recognizability(
        wer_low_snr: dict[str, float], wer_high_snr: dict[str, float],
        f1_by_class: dict[str, float]) -> tuple[list[RobustnessPoint], float]:
    """Per-class robustness points plus the Spearman rank correlation
    between robustness (negated WER increase) and probe F1."""
    for name, table in (("low-SNR WER", wer_low_snr), ("high-SNR WER", wer_high_snr)):
        missing = set(table) ^ set(f1_by_class)
        if missing:
            raise InvalidInputError(
                f"class sets differ between {name} and probe F1: {sorted(missing)}")
    points = [RobustnessPoint(cls,
                              wer_low_snr[cls] - wer_high_snr[cls],
                              f1_by_class[cls])
              for cls in sorted(f1_by_class)]
    if len(points) < 2:
        raise InvalidInputError("need at least two classes for a correlation")
    rho = spearmanr([-p.wer_increase for p in points],
                    [p.f1 for p in points]).statistic
    return points, float(rho)
