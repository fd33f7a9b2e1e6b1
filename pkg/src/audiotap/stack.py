"""Layer representation stacks: one utterance's activations from every layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

DTYPE_TAGS = {"f16": np.float16, "f32": np.float32}


@dataclass
class RepresentationStack:
    """Encoder activations for one utterance, shape ``[L, n, d]``.

    ``n`` is the number of frames covering the true audio duration (the
    encoder's padded context is trimmed away), at ``frame_rate`` frames
    per second.
    """

    values: np.ndarray
    utterance_id: str
    frame_rate: float
    dtype_tag: str = "f32"

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InvalidInputError(
                f"stack values must be [L, n, d], got shape {self.values.shape}")
        if self.dtype_tag not in DTYPE_TAGS:
            raise InvalidInputError(f"unknown dtype_tag {self.dtype_tag!r}")
        if self.frame_rate <= 0:
            raise InvalidInputError("frame_rate must be positive")
        if not np.isfinite(self.values).all():
            raise InvalidInputError(
                f"stack for {self.utterance_id!r} contains non-finite values")

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.frame_rate

    def astype(self, dtype_tag: str) -> "RepresentationStack":
        """Copy of this stack stored at ``dtype_tag`` precision."""
        if dtype_tag not in DTYPE_TAGS:
            raise InvalidInputError(f"unknown dtype_tag {dtype_tag!r}")
        return RepresentationStack(
            values=self.values.astype(DTYPE_TAGS[dtype_tag]),
            utterance_id=self.utterance_id,
            frame_rate=self.frame_rate,
            dtype_tag=dtype_tag,
        )
