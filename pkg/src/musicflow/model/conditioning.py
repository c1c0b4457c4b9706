"""
Condition block of the vector field.

Controls travel in two forms. `ControlFeatures` holds the raw per-clip streams
(chord labels, binary melody, blurred first-stream latents, the masked latent) as
plain numpy arrays. `ConditionEncoder` turns a batch of those into a `ConditionSet`
of projected, differentiable arrays; the projections carry no bias, so a zeroed raw
stream projects to zeros and "absent" and "dropped" look the same to the model.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from musicflow.audio.features import (
    chord_labels,
    chroma,
    melody_matrix,
    notes_to_matrix,
    resample_features,
)
from musicflow.autodiff import ops
from musicflow.autodiff.array import Array
from musicflow.utils.errors import ShapeError
from musicflow.utils.settings import (
    BPF_HIGH,
    BPF_LOW,
    D_AUD,
    D_CRD,
    D_DRM,
    D_MLD,
    IOP_FRACTION_MAX,
    IOP_FRACTION_MIN,
    LOCAL_CONTROLS,
    N_CHORDS,
    N_MELODY_BINS,
    SAMPLE_RATE,
    ChordReference,
    Control,
    InterpMode,
    PaintMode,
)
from musicflow.utils.typing import TYPE_CHECKING, as_rng

if TYPE_CHECKING:
    from musicflow.audio.codec import ToyCodec
    from musicflow.audio.corpus import Clip
    from musicflow.model.layers import Parameters
    from musicflow.utils.config import RunConfig
    from musicflow.utils.typing import FloatArray, IntArray, SeedLike, Waveform

logger = logging.getLogger(__name__)

BPF_ORDER = 4


# Signal helpers
def temporal_blur(x: np.ndarray, window: int) -> np.ndarray:
    """
    Replace each non-overlapping window of frames by its mean.

    The trailing partial window is averaged over its actual length.
    """
    if window <= 0:
        raise ValueError(f"Blur window must be positive, got {window}")
    values = np.asarray(x, dtype=np.float64)
    if window == 1 or values.shape[0] == 0:
        return values.copy()
    starts = np.arange(0, values.shape[0], window)
    counts = np.diff(np.append(starts, values.shape[0]))
    means = np.add.reduceat(values, starts, axis=0) / counts.reshape(-1, *([1] * (values.ndim - 1)))
    return np.repeat(means, counts, axis=0)


def band_pass_sos(low: float = BPF_LOW, high: float = BPF_HIGH, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    if not 0 < low < high < sample_rate / 2:
        raise ValueError(f"Invalid pass band [{low}, {high}] Hz at {sample_rate} Hz")
    return signal.butter(BPF_ORDER, [low, high], btype="bandpass", fs=sample_rate, output="sos")


def band_pass(
    waveform: Waveform,
    low: float = BPF_LOW,
    high: float = BPF_HIGH,
    sample_rate: int = SAMPLE_RATE,
) -> Waveform:
    """Zero-phase Butterworth band-pass (filtered forward and backward)."""
    return signal.sosfiltfilt(band_pass_sos(low, high, sample_rate), np.asarray(waveform, dtype=np.float64))


def inpaint_condition(
    z: FloatArray,
    mode: PaintMode | str,
    fraction: float,
    rng: SeedLike,
    side: str | None = None,
) -> FloatArray:
    """
    Zero a contiguous run of round(fraction * T) latent frames.

    Args:
        z: (T, N_enc) latent of the reference.
        mode: inpaint masks an interior segment at a random offset; outpaint masks a
            prefix or a suffix.
        fraction: Masked share of the frames, within [0.4, 0.9].
        rng: Random source for the offset and the outpaint side.
        side: "prefix" or "suffix" to pin the outpaint side instead of a coin flip.
    """
    if not IOP_FRACTION_MIN <= fraction <= IOP_FRACTION_MAX:
        raise ValueError(f"Mask fraction {fraction} outside [{IOP_FRACTION_MIN}, {IOP_FRACTION_MAX}]")
    rng = as_rng(rng)
    latent = np.asarray(z, dtype=np.float64)
    n_frames = latent.shape[0]
    masked = round(fraction * n_frames)

    match PaintMode(mode):
        case PaintMode.INPAINT:
            # Interior when there is room on both sides
            low, high = (1, n_frames - masked - 1) if n_frames - masked >= 2 else (0, n_frames - masked)
            start = int(rng.integers(low, high + 1))
        case PaintMode.OUTPAINT:
            if side is None:
                side = "prefix" if rng.random() < 0.5 else "suffix"
            if side not in {"prefix", "suffix"}:
                raise ValueError(f"Outpaint side must be prefix or suffix, got {side}")
            start = 0 if side == "prefix" else n_frames - masked

    out = latent.copy()
    out[start : start + masked] = 0.0
    return out


# Raw controls
@dataclass(frozen=True, eq=False)
class ControlFeatures:
    """Raw controls of one clip on the latent frame grid."""

    chords: IntArray  # (T,)
    melody: IntArray  # (T, 53)
    audio: FloatArray  # (T, N_enc)
    drums: FloatArray  # (T, N_enc)
    inpaint: FloatArray  # (T, N_enc)
    style: int = 0
    present: frozenset[Control] = field(default_factory=frozenset)
    style_present: bool = False

    def __post_init__(self) -> None:
        lengths = {self.chords.shape[0], self.melody.shape[0], self.audio.shape[0], self.drums.shape[0], self.inpaint.shape[0]}
        if len(lengths) != 1:
            raise ShapeError(
                "ControlFeatures",
                self.chords.shape,
                self.melody.shape,
                self.audio.shape,
                self.drums.shape,
                self.inpaint.shape,
            )

    @classmethod
    def empty(cls, n_frames: int, n_enc: int, style: int = 0) -> ControlFeatures:
        return cls(
            chords=np.zeros(n_frames, dtype=np.int64),
            melody=np.zeros((n_frames, N_MELODY_BINS), dtype=np.int64),
            audio=np.zeros((n_frames, n_enc)),
            drums=np.zeros((n_frames, n_enc)),
            inpaint=np.zeros((n_frames, n_enc)),
            style=style,
        )

    @property
    def n_frames(self) -> int:
        return self.chords.shape[0]

    @property
    def n_enc(self) -> int:
        return self.audio.shape[1]

    def with_control(self, control: Control, values: np.ndarray) -> ControlFeatures:
        if values.shape[0] != self.n_frames:
            raise ShapeError(f"with_control({control})", values.shape, (self.n_frames,))
        return dataclasses.replace(self, **{control.value: values}, present=self.present | {control})

    def with_style(self, style: int) -> ControlFeatures:
        return dataclasses.replace(self, style=style, style_present=True)

    def only(self, controls: Sequence[Control]) -> ControlFeatures:
        """Keep the listed local controls and zero the rest."""
        keep = frozenset(controls)
        changes: dict[str, object] = {c.value: np.zeros_like(getattr(self, c.value)) for c in LOCAL_CONTROLS if c not in keep}
        return dataclasses.replace(self, **changes, present=self.present & keep)


class ControlExtractor:
    """Derives `ControlFeatures` for a clip from its annotations, mix and stems."""

    def __init__(self, codec: ToyCodec, cfg: RunConfig) -> None:
        self.codec = codec
        self.cfg = cfg
        self.controls = cfg.control_set
        self.sos = band_pass_sos(cfg.bpf_low, cfg.bpf_high, codec.sample_rate)

    # Symbolic controls
    def chords_from_labels(self, labels: Sequence[int], n_frames: int) -> IntArray:
        out = resample_features(np.asarray(labels, dtype=np.int64), n_frames, InterpMode.NEAREST)
        if out.min(initial=0) < 0 or out.max(initial=0) >= N_CHORDS:
            raise ValueError(f"Chord labels must lie in [0, {N_CHORDS - 1}]")
        return out

    def chords_from_audio(self, waveform: Waveform, n_frames: int) -> IntArray:
        labels = chord_labels(chroma(waveform), self.cfg.chord_threshold, self.cfg.chord_median)
        return self.chords_from_labels(labels, n_frames)

    def melody_from_notes(self, notes: Sequence[int], n_frames: int) -> IntArray:
        binary = notes_to_matrix(np.asarray(notes, dtype=np.int64))
        return np.rint(resample_features(binary, n_frames, InterpMode.LINEAR)).astype(np.int64)

    def melody_from_audio(self, waveform: Waveform, n_frames: int) -> IntArray:
        binary = melody_matrix(waveform, self.cfg.melody_threshold)
        return np.rint(resample_features(binary, n_frames, InterpMode.LINEAR)).astype(np.int64)

    # Audio controls
    def audio_from_waveform(self, waveform: Waveform, n_frames: int) -> FloatArray:
        coarse = resample_features(self.codec.first_stream(waveform), n_frames, InterpMode.LINEAR)
        return temporal_blur(coarse, self.cfg.blur_window_audio)

    def drums_from_waveform(self, drum_stem: Waveform, n_frames: int) -> FloatArray:
        filtered = signal.sosfiltfilt(self.sos, np.asarray(drum_stem, dtype=np.float64))
        coarse = resample_features(self.codec.first_stream(filtered), n_frames, InterpMode.LINEAR)
        return temporal_blur(coarse, self.cfg.blur_window_drums)

    def inpaint(self, z: FloatArray, rng: SeedLike, mode: PaintMode | None = None) -> FloatArray:
        """Random in/out-painting mask with a uniformly drawn fraction."""
        rng = as_rng(rng)
        if mode is None:
            mode = PaintMode.INPAINT if rng.random() < 0.5 else PaintMode.OUTPAINT
        fraction = float(rng.uniform(self.cfg.iop_fraction_min, self.cfg.iop_fraction_max))
        return inpaint_condition(z, mode, fraction, rng)

    def from_clip(
        self,
        clip: Clip,
        z: FloatArray,
        rng: SeedLike | None = None,
        chords_from: ChordReference = ChordReference.ANNOTATION,
    ) -> ControlFeatures:
        """
        All configured controls of `clip` aligned to its latent `z`.

        The in/out-painting control is only filled when `rng` is given; training draws a
        fresh mask every step instead.
        """
        n_frames = z.shape[0]
        features = ControlFeatures.empty(n_frames, z.shape[1]).with_style(clip.annotations.style_tag)

        for control in self.controls:
            match control:
                case Control.CHORDS:
                    if chords_from is ChordReference.AUDIO:
                        values = self.chords_from_audio(clip.mix, n_frames)
                    else:
                        values = self.chords_from_labels(clip.annotations.chords, n_frames)
                case Control.MELODY:
                    values = self.melody_from_notes(clip.annotations.melody, n_frames)
                case Control.AUDIO:
                    source = clip.stems.without_drums() if self.cfg.audio_without_drums else clip.mix
                    values = self.audio_from_waveform(source, n_frames)
                case Control.DRUMS:
                    values = self.drums_from_waveform(clip.stems.drums, n_frames)
                case Control.INPAINT:
                    if rng is None:
                        continue
                    values = self.inpaint(z, rng)
            features = features.with_control(control, values)

        logger.debug(f"{clip.id}: controls {sorted(c.value for c in features.present)} over {n_frames} frames")
        return features


# Dropout
@dataclass(frozen=True)
class DropoutPolicy:
    """
    Structured condition dropout.

    `p_style=None` ties the style tag to the all-local draw, so the all-dropped branch
    also trains the unconditional field.
    """

    p_all: float = 0.2
    p_each: float = 0.5
    p_iop: float = 0.7
    p_style: float | None = None

    def __post_init__(self) -> None:
        for name in ("p_all", "p_each", "p_iop", "p_style"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    @classmethod
    def for_controls(cls, controls: Sequence[Control], cfg: RunConfig) -> DropoutPolicy:
        """Single-control models drop their one control 40% of the time."""
        p_style = None if cfg.p_style < 0 else cfg.p_style
        if len(controls) == 1:
            return cls(p_all=0.4, p_each=0.0, p_iop=0.0, p_style=p_style)
        return cls(cfg.p_all, cfg.p_each, cfg.p_iop, p_style)

    def draw(self, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
        """Keep-mask over `LOCAL_CONTROLS` and whether the style tag is kept."""
        u = rng.random(len(LOCAL_CONTROLS) + 2)
        drop_all = u[0] < self.p_all
        probabilities = np.array([self.p_iop if c is Control.INPAINT else self.p_each for c in LOCAL_CONTROLS])
        keep = ~(drop_all | (u[1 : 1 + len(LOCAL_CONTROLS)] < probabilities))
        keep_style = not drop_all if self.p_style is None else bool(u[-1] >= self.p_style)
        return keep, keep_style


# Projected conditions
@dataclass(frozen=True, eq=False)
class ConditionSet:
    """
    Projected conditions for a batch.

    Local arrays are (B, T, d); `present` is (B, 5) in `LOCAL_CONTROLS` order.
    """

    chords: Array
    melody: Array
    audio: Array
    drums: Array
    inpaint: Array
    style: IntArray
    style_present: np.ndarray
    present: np.ndarray

    def __post_init__(self) -> None:
        batch, n_frames = self.chords.shape[:2]
        for arr in self.local_arrays():
            if arr.shape[:2] != (batch, n_frames):
                raise ShapeError("ConditionSet", self.chords.shape, arr.shape)

    @property
    def batch(self) -> int:
        return self.chords.shape[0]

    @property
    def n_frames(self) -> int:
        return self.chords.shape[1]

    def local_arrays(self) -> list[Array]:
        return [getattr(self, c.value) for c in LOCAL_CONTROLS]

    def masked(self, keep: np.ndarray, keep_style: np.ndarray) -> ConditionSet:
        """Zero the controls whose (B, 5) `keep` entry is false; values of kept ones are untouched."""
        keep = np.asarray(keep, dtype=bool).reshape(self.batch, len(LOCAL_CONTROLS))
        changes: dict[str, Array] = {}
        for i, control in enumerate(LOCAL_CONTROLS):
            arr = getattr(self, control.value)
            if keep[:, i].all():
                continue
            mask = np.broadcast_to(keep[:, i, None, None], arr.shape).astype(arr.dtype)
            changes[control.value] = ops.mul(arr, Array(mask))
        return dataclasses.replace(
            self,
            **changes,
            present=self.present & keep,
            style_present=self.style_present & np.asarray(keep_style, dtype=bool).reshape(self.batch),
        )

    def without_local(self) -> ConditionSet:
        return self.masked(np.zeros((self.batch, len(LOCAL_CONTROLS)), dtype=bool), np.ones(self.batch, dtype=bool))

    def without_style(self) -> ConditionSet:
        return self.masked(np.ones((self.batch, len(LOCAL_CONTROLS)), dtype=bool), np.zeros(self.batch, dtype=bool))

    def without_all(self) -> ConditionSet:
        return self.masked(np.zeros((self.batch, len(LOCAL_CONTROLS)), dtype=bool), np.zeros(self.batch, dtype=bool))

    @classmethod
    def concat(cls, sets: Sequence[ConditionSet]) -> ConditionSet:
        """Stack condition sets along the batch axis."""
        return cls(
            *(ops.concat([getattr(s, c.value) for s in sets], axis=0) for c in LOCAL_CONTROLS),
            style=np.concatenate([s.style for s in sets]),
            style_present=np.concatenate([s.style_present for s in sets]),
            present=np.concatenate([s.present for s in sets]),
        )


def apply_condition_dropout(cs: ConditionSet, policy: DropoutPolicy, rng: SeedLike) -> ConditionSet:
    rng = as_rng(rng)
    draws = [policy.draw(rng) for _ in range(cs.batch)]
    keep = np.stack([k for k, _ in draws])
    keep_style = np.array([s for _, s in draws])
    return cs.masked(keep, keep_style)


class ConditionEncoder:
    """Learned chord table and the bias-free control projections."""

    def __init__(self, params: Parameters, n_enc: int, d_crd: int = D_CRD, d_mld: int = D_MLD) -> None:
        self.n_enc = n_enc
        self.chord_table = params.create("cond.chord_table", (N_CHORDS, d_crd), std=1.0 / np.sqrt(d_crd))
        self.melody_proj = params.create("cond.melody_proj", (N_MELODY_BINS, d_mld))
        self.audio_proj = params.create("cond.audio_proj", (n_enc, D_AUD))
        self.drums_proj = params.create("cond.drums_proj", (n_enc, D_DRM))

    @property
    def width(self) -> int:
        """Channels contributed by the local conditions."""
        return self.chord_table.shape[1] + self.melody_proj.shape[1] + D_AUD + D_DRM + self.n_enc

    def __call__(self, features: Sequence[ControlFeatures]) -> ConditionSet:
        return build_condition_set(features, self)


def build_condition_set(features: Sequence[ControlFeatures], encoder: ConditionEncoder) -> ConditionSet:
    if not features:
        raise ValueError("Cannot build a condition set from an empty batch")
    n_frames = features[0].n_frames
    for f in features:
        if f.n_frames != n_frames or f.n_enc != encoder.n_enc:
            raise ShapeError("build_condition_set", (n_frames, encoder.n_enc), (f.n_frames, f.n_enc))

    dtype = encoder.melody_proj.dtype
    present = np.array([[c in f.present for c in LOCAL_CONTROLS] for f in features])

    def stacked(name: str) -> Array:
        rows = [getattr(f, name) * (getattr(Control, name.upper()) in f.present) for f in features]
        return Array(np.stack(rows).astype(dtype))

    # Chord label 0 is a real "no chord" row, so absence is masked after the lookup
    labels = np.stack([f.chords for f in features])
    chords = ops.embedding(encoder.chord_table, labels)
    chord_mask = np.broadcast_to(present[:, 0, None, None], chords.shape).astype(dtype)
    chords = ops.mul(chords, Array(chord_mask))

    return ConditionSet(
        chords=chords,
        melody=ops.matmul(stacked("melody"), encoder.melody_proj),
        audio=ops.matmul(stacked("audio"), encoder.audio_proj),
        drums=ops.matmul(stacked("drums"), encoder.drums_proj),
        inpaint=stacked("inpaint"),
        style=np.array([f.style for f in features], dtype=np.int64),
        style_present=np.array([f.style_present for f in features], dtype=bool),
        present=present,
    )


def assemble_input(z_t: Array, cs: ConditionSet) -> Array:
    """Channel-wise [z_t | chords | melody | audio | drums | inpaint]."""
    if z_t.shape[:2] != (cs.batch, cs.n_frames):
        raise ShapeError("assemble_input", z_t.shape, cs.chords.shape)
    return ops.concat([z_t, *cs.local_arrays()], axis=-1)
