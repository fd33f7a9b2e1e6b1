"""Whisper-family adapter built on ``torch`` + ``transformers``.

Loads a local checkpoint directory (the layout ``save_pretrained``
produces: config, safetensors weights, feature extractor and tokenizer
files) and exposes it through the :class:`audiotap.backbone.Backbone`
interface. Weights are frozen at load time; extraction and greedy
transcription run under ``no_grad`` on CPU or the configured device.

The layer stack is taken from the encoder's hidden states: one entry per
transformer block, excluding the convolutional frontend embedding. The
final entry comes after the encoder's closing layer norm, matching what
the decoder consumes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneInfo, EncoderOutput
from .errors import InvalidInputError, LoadError

try:
    import torch
    from transformers import (
        WhisperFeatureExtractor,
        WhisperForConditionalGeneration,
        WhisperTokenizer,
    )
    _IMPORT_ERROR = None
except ImportError as e:  # pragma: no cover - exercised only without extras
    torch = None
    _IMPORT_ERROR = e

#: Special tokens prepended to the decoder input when the tokenizer knows
#: them (the tiny test checkpoints don't carry language/task tokens).
_PROMPT_TOKENS = ("<|{language}|>", "<|transcribe|>", "<|notimestamps|>")


@dataclass
class _DecoderState:
    encoder_sequence: "torch.Tensor"  # [1, n_full, d]


class WhisperBackbone(Backbone):
    """A frozen Whisper checkpoint as a layer-representation producer."""

    def __init__(self, model_dir: str | Path, model_id: str = "",
                 language: str = "en", max_new_tokens: int = 224,
                 device: str = "cpu"):
        if torch is None:  # pragma: no cover
            raise LoadError(
                f"torch/transformers are required for the whisper backbone "
                f"(install the 'whisper' extra): {_IMPORT_ERROR}")
        model_dir = Path(model_dir)
        if not model_dir.exists():
            raise LoadError(f"backbone checkpoint directory not found: {model_dir}")
        try:
            self._model = WhisperForConditionalGeneration.from_pretrained(
                model_dir, local_files_only=True)
            self._feature_extractor = WhisperFeatureExtractor.from_pretrained(
                model_dir, local_files_only=True)
            self._tokenizer = WhisperTokenizer.from_pretrained(
                model_dir, local_files_only=True)
        except Exception as e:
            raise LoadError(f"failed to load backbone from {model_dir}: {e}") from e

        self._model.eval()
        self._model.requires_grad_(False)
        self._device = torch.device(device)
        self._model.to(self._device)

        cfg = self._model.config
        fe = self._feature_extractor
        # mel hop -> conv stride 2 halves the frame rate of the spectrogram
        frame_rate = fe.sampling_rate / (fe.hop_length * 2)
        self._info = BackboneInfo(
            model_id=model_id or model_dir.name,
            num_layers=cfg.encoder_layers,
            hidden_dim=cfg.d_model,
            frame_rate=frame_rate,
            max_context_seconds=fe.chunk_length,
            sample_rate=fe.sampling_rate,
        )
        self._encoder_calls = 0
        self._max_new_tokens = max_new_tokens
        self._prompt_ids = self._build_prompt_ids(language)

    # -- Backbone interface -------------------------------------------------

    @property
    def info(self) -> BackboneInfo:
        return self._info

    @property
    def encoder_calls(self) -> int:
        return self._encoder_calls

    def encode(self, waveform: np.ndarray) -> EncoderOutput:
        waveform = self._check_waveform(waveform)
        duration = waveform.size / self._info.sample_rate
        features = self._feature_extractor(
            waveform, sampling_rate=self._info.sample_rate,
            return_tensors="pt").input_features.to(self._device)
        self._encoder_calls += 1
        with torch.no_grad():
            out = self._model.model.encoder(features, output_hidden_states=True)
        # hidden_states[0] is the conv frontend embedding; [1:] are the L
        # block outputs (the last one past the final layer norm).
        stack = torch.stack(out.hidden_states[1:], dim=0)[:, 0]  # [L, n_full, d]
        n = min(self.num_output_frames(duration), stack.shape[1])
        trimmed = stack[:, :n].to(torch.float32).cpu().numpy()
        if not np.isfinite(trimmed).all():
            raise InvalidInputError("encoder produced non-finite activations")
        return EncoderOutput(
            hidden_stack=trimmed,
            num_frames=n,
            duration_s=duration,
            decoder_state=_DecoderState(encoder_sequence=out.last_hidden_state),
        )

    def transcribe_encoded(self, encoded: EncoderOutput) -> str:
        state = encoded.decoder_state
        if not isinstance(state, _DecoderState):
            raise InvalidInputError("EncoderOutput was not produced by this adapter")
        ids = list(self._prompt_ids)
        eos = self._model.config.eos_token_id
        past = None
        with torch.no_grad():
            tokens = torch.tensor([ids], device=self._device)
            generated: list[int] = []
            for _ in range(self._max_new_tokens):
                out = self._model(
                    decoder_input_ids=tokens if past is None else tokens[:, -1:],
                    encoder_outputs=(state.encoder_sequence,),
                    past_key_values=past, use_cache=True)
                past = out.past_key_values
                next_id = int(out.logits[0, -1].argmax())
                if next_id == eos:
                    break
                generated.append(next_id)
                tokens = torch.cat(
                    [tokens, torch.tensor([[next_id]], device=self._device)], dim=1)
        return self._tokenizer.decode(generated, skip_special_tokens=True).strip()

    def weight_checksum(self) -> str:
        digest = hashlib.sha256()
        state = self._model.state_dict()
        for name in sorted(state):
            digest.update(name.encode("utf-8"))
            digest.update(state[name].cpu().numpy().tobytes())
        return digest.hexdigest()

    # -- internals -----------------------------------------------------------

    def _build_prompt_ids(self, language: str) -> list[int]:
        ids = [self._model.config.decoder_start_token_id]
        vocab = self._tokenizer.get_vocab()
        for template in _PROMPT_TOKENS:
            token = template.format(language=language)
            if token in vocab:
                ids.append(vocab[token])
        return ids
