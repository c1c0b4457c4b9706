"""
Flat key=value run configuration.

Every stage of the pipeline reads its knobs from one `RunConfig`. The file format is
one `key = value` pair per line; `#` starts a comment. Unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_type_hints

from musicflow.utils import settings
from musicflow.utils.errors import ConfigError
from musicflow.utils.support import text_digest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    # Reproducibility
    seed: int = 0
    workers: int = 1

    # Paths
    corpus_dir: str = "runs/corpus"
    codec_path: str = "runs/codec.bin"
    run_dir: str = "runs/train"
    out_dir: str = "runs/generate"

    # Corpus
    corpus_size: int = 2000

    # Features
    melody_threshold: float = 0.5
    chord_threshold: float = settings.CHORD_THRESHOLD
    chord_median: int = settings.CHORD_MEDIAN

    # Codec
    n_enc: int = settings.N_ENC
    mel_bands: int = settings.MEL_BANDS
    rvq_codebooks: int = settings.RVQ_CODEBOOKS
    rvq_size: int = settings.RVQ_SIZE
    kmeans_iters: int = settings.KMEANS_ITERS

    # Conditioning
    blur_window_audio: int = settings.BLUR_AUDIO
    blur_window_drums: int = settings.BLUR_DRUMS
    d_crd: int = settings.D_CRD
    d_mld: int = settings.D_MLD
    bpf_low: float = settings.BPF_LOW
    bpf_high: float = settings.BPF_HIGH
    iop_fraction_min: float = settings.IOP_FRACTION_MIN
    iop_fraction_max: float = settings.IOP_FRACTION_MAX
    p_all: float = 0.2
    p_each: float = 0.5
    p_iop: float = 0.7
    p_style: float = -1.0
    controls: str = "chords,melody,audio,drums,inpaint"
    audio_without_drums: bool = False

    # Model
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    conv_pos_kernel: int = 15
    style_tokens: int = 2
    cross_attention_every: int = 1
    conditioning: str = settings.Conditioning.CONCAT

    # Training
    batch_size: int = 16
    steps: int = 20000
    lr: float = 1e-4
    warmup_steps: int = 500
    clip_norm: float = 0.2
    sigma_min: float = settings.SIGMA_MIN
    loss_weighting: str = settings.LossWeighting.ONE_PLUS_T
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    log_every: int = 50
    checkpoint_every: int = 1000

    # Inference
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 1000
    fixed_step: float = 0.0
    alpha_text: float = 0.5
    alpha_local: float = 0.0
    alpha_both: float = 1.5
    n_generate: int = 64

    # Evaluation
    eval_chord_reference: str = settings.ChordReference.AUDIO

    def __post_init__(self) -> None:
        valid = {control.value for control in settings.Control}
        for name in self._control_names():
            if name not in valid:
                raise ConfigError(f"Unknown control '{name}' in controls={self.controls}")
        for key, enum in (
            ("conditioning", settings.Conditioning),
            ("loss_weighting", settings.LossWeighting),
            ("eval_chord_reference", settings.ChordReference),
        ):
            value = getattr(self, key)
            if value not in {member.value for member in enum}:
                raise ConfigError(f"{key}={value} is not one of {[m.value for m in enum]}")

    def _control_names(self) -> list[str]:
        return [name.strip() for name in self.controls.split(",") if name.strip()]

    @property
    def control_set(self) -> tuple[settings.Control, ...]:
        return tuple(settings.Control(name) for name in self._control_names())

    @classmethod
    def from_file(cls, path: Path | None, **overrides: Any) -> RunConfig:
        values: dict[str, str] = {}
        if path is not None:
            try:
                text = path.read_text()
            except OSError as err:
                raise ConfigError(f"Cannot read config file {path}: {err.strerror}") from err
            for lineno, raw in enumerate(text.splitlines(), start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got '{raw}'")
                key, value = (part.strip() for part in line.split("=", 1))
                values[key] = value
        return cls.from_mapping(values, **overrides)

    @classmethod
    def from_mapping(cls, values: dict[str, Any], **overrides: Any) -> RunConfig:
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        merged = {**values, **{k: v for k, v in overrides.items() if v is not None}}

        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")

        coerced = {key: _coerce(key, value, hints[key]) for key, value in merged.items()}
        return cls(**coerced)

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(
            f"{f.name} = {_format(getattr(self, f.name))}\n"
            for f in sorted(fields(self), key=lambda f: f.name)
        )

    def digest(self) -> str:
        return text_digest(self.to_text())

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _coerce(key: str, value: Any, kind: Any) -> Any:
    if not isinstance(value, str):
        return value
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(value)
            return lowered in {"true", "1", "yes"}
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{value}' as {kind.__name__}") from None
    return value


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
