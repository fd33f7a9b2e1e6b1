"""Frozen speech-encoder backbones that expose per-layer representations.

A backbone wraps a pretrained encoder-decoder ASR model whose weights are
never updated here. One ``encode`` call produces both the full layer stack
(for tagging heads) and the final encoder sequence (for the decoder), so
tags and transcript come out of a single encoder forward pass. An internal
counter tracks encoder invocations so the single-pass contract is testable.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .stack import RepresentationStack

#: Encoder geometry by model id, for error messages and documentation; the
#: authoritative values are always read from the loaded checkpoint.
KNOWN_WHISPER_MODELS = {
    "tiny": {"layers": 4, "dim": 384, "hf_repo": "openai/whisper-tiny"},
    "base": {"layers": 6, "dim": 512, "hf_repo": "openai/whisper-base"},
    "small": {"layers": 12, "dim": 768, "hf_repo": "openai/whisper-small"},
    "medium": {"layers": 24, "dim": 1024, "hf_repo": "openai/whisper-medium"},
    "large": {"layers": 32, "dim": 1280, "hf_repo": "openai/whisper-large"},
    "large-v2": {"layers": 32, "dim": 1280, "hf_repo": "openai/whisper-large-v2"},
    "large-v3": {"layers": 32, "dim": 1280, "hf_repo": "openai/whisper-large-v3"},
}


@dataclass(frozen=True)
class BackboneInfo:
    """Geometry of a loaded encoder, read from its checkpoint config."""

    model_id: str
    num_layers: int
    hidden_dim: int
    frame_rate: float          # encoder output frames per second
    max_context_seconds: float
    sample_rate: int

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise InvalidInputError("backbone must have >= 1 layer and dim")
        if self.frame_rate <= 0 or self.max_context_seconds <= 0:
            raise InvalidInputError("frame_rate and max_context must be positive")


@dataclass
class EncoderOutput:
    """One encoder pass: the trimmed layer stack plus whatever the decoder
    needs to run without touching the encoder again."""

    hidden_stack: np.ndarray     # [L, n, d] float32, trimmed to true duration
    num_frames: int
    duration_s: float
    decoder_state: Any = None    # adapter-private handle for transcription


class Backbone(ABC):
    """Interface every encoder adapter implements."""

    @property
    @abstractmethod
    def info(self) -> BackboneInfo: ...

    @property
    @abstractmethod
    def encoder_calls(self) -> int:
        """How many encoder forward passes this instance has run."""

    @abstractmethod
    def encode(self, waveform: np.ndarray) -> EncoderOutput: ...

    @abstractmethod
    def transcribe_encoded(self, encoded: EncoderOutput) -> str:
        """Decode a transcript from an existing encoder pass."""

    @abstractmethod
    def weight_checksum(self) -> str:
        """Digest over all model weights; must never change."""

    def extract(self, waveform: np.ndarray, utterance_id: str) -> RepresentationStack:
        encoded = self.encode(waveform)
        return RepresentationStack(
            values=encoded.hidden_stack,
            utterance_id=utterance_id,
            frame_rate=self.info.frame_rate,
            dtype_tag="f32",
        )

    def transcribe(self, waveform: np.ndarray) -> str:
        return self.transcribe_encoded(self.encode(waveform))

    def _check_waveform(self, waveform: np.ndarray) -> np.ndarray:
        waveform = np.asarray(waveform)
        if waveform.ndim != 1 or waveform.size == 0:
            raise InvalidInputError("waveform must be non-empty mono (1-D)")
        duration = waveform.size / self.info.sample_rate
        if duration > self.info.max_context_seconds + 1e-9:
            raise InvalidInputError(
                f"clip is {duration:.2f}s but the encoder context is "
                f"{self.info.max_context_seconds:.0f}s; segment the audio first")
        return waveform.astype(np.float32)

    def num_output_frames(self, duration_s: float) -> int:
        """Frames covering ``duration_s`` at the encoder frame rate."""
        return max(1, int(duration_s * self.info.frame_rate + 0.5))


def load_backbone(model_id: str, model_dir: str | Path | None = None,
                  models_root: str | Path | None = None) -> Backbone:
    """Load a frozen encoder adapter from a local checkpoint directory.

    The checkpoint directory is ``model_dir`` when given, otherwise
    ``models_root / model_id``. ``model_id`` must be one of
    :data:`KNOWN_WHISPER_MODELS` unless an explicit ``model_dir`` is given.
    Weights are loaded read-only and frozen; loading the same directory
    twice yields identical :class:`BackboneInfo`.
    """
    if model_dir is None:
        if model_id not in KNOWN_WHISPER_MODELS:
            raise ConfigurationError(
                f"unknown backbone id {model_id!r}; known ids: "
                f"{', '.join(sorted(KNOWN_WHISPER_MODELS))} "
                f"(or pass an explicit model_dir)")
        if models_root is None:
            raise ConfigurationError(
                "no model_dir or models_root configured; point one at a local "
                "checkpoint directory (see README: fetching backbone weights)")
        model_dir = Path(models_root) / model_id

    from .whisper_backbone import WhisperBackbone

    return WhisperBackbone(model_dir, model_id=model_id)


def extract_representations(waveform: np.ndarray, backbone: Backbone,
                            utterance_id: str = "") -> RepresentationStack:
    """Layer stack ``[L, n, d]`` for one clip; pure in (audio, weights)."""
    return backbone.extract(waveform, utterance_id)


def transcribe(waveform: np.ndarray, backbone: Backbone) -> str:
    """Transcript from the unmodified ASR decoder."""
    return backbone.transcribe(waveform)
