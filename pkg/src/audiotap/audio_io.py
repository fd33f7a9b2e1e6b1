"""WAV loading with mono downmix and resampling to the backbone rate.

Ingestion is deliberately plain: integer samples are scaled to [-1, 1] by
their dtype range, channels are averaged to mono, and resampling uses a
polyphase filter. No peak normalization is applied, so extraction stays
deterministic and comparable across runs.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import InvalidInputError, LoadError

_INT_SCALES = {
    np.dtype(np.int16): 32768.0,
    np.dtype(np.int32): 2147483648.0,
    np.dtype(np.uint8): 128.0,
}


def load_wav(path: str | Path, target_sample_rate: int) -> np.ndarray:
    """Read a WAV file as mono float32 at ``target_sample_rate``."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise LoadError(f"cannot read {path}: {e}") from e
    if data.size == 0:
        raise InvalidInputError(f"{path}: empty audio")

    if data.dtype in _INT_SCALES:
        scale = _INT_SCALES[data.dtype]
        offset = scale if data.dtype == np.dtype(np.uint8) else 0.0
        samples = (data.astype(np.float64) - offset) / scale
    else:
        samples = data.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)

    if rate != target_sample_rate:
        g = math.gcd(rate, target_sample_rate)
        samples = resample_poly(samples, target_sample_rate // g, rate // g)
    return samples.astype(np.float32)


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float32 samples (clipped to [-1, 1]) as 16-bit PCM."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sample_rate, (clipped * 32767.0).astype(np.int16))
