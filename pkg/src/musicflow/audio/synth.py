"""
Synthetic music clips with exact annotations.

A clip is a chord progression (additive, band-limited triads), a monophonic melody
(harmonic tone with an attack/decay envelope) and a drum track (band-passed noise
bursts). Every clip is rendered from a `ClipSpec`; the same spec always renders
the same samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import librosa
import numpy as np
from scipy import signal

from musicflow.audio.chords import chord_intervals, chord_pitch_classes
from musicflow.utils.settings import (
    CLIP_SECONDS,
    FRAME_RATE,
    MIDI_MAX,
    MIDI_MIN,
    N_CHORDS,
    N_STYLES,
    NO_CHORD,
    REST,
    SAMPLE_RATE,
)
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.typing import Waveform

HARMONY_ROOT_MIDI = 48
HARMONY_GAIN = 0.12
MELODY_GAIN = 0.3
DRUM_GAIN = 0.5
DRUM_BURST = 0.12
FADE = 0.01
PEAK = 0.99


@dataclass(frozen=True)
class StyleTimbre:
    tempo_range: tuple[float, float]
    harmony_partials: int
    harmony_rolloff: float
    melody_partials: int
    melody_rolloff: float
    drum_band: tuple[float, float]
    drum_decay: float


# The eight style tags stand in for text prompts: each fixes a tempo range and timbre.
STYLES: tuple[StyleTimbre, ...] = (
    StyleTimbre((70, 90), 2, 0.4, 2, 0.3, (150, 900), 0.040),
    StyleTimbre((80, 100), 3, 0.5, 3, 0.5, (200, 1500), 0.030),
    StyleTimbre((90, 110), 4, 0.5, 2, 0.4, (300, 2500), 0.025),
    StyleTimbre((100, 120), 2, 0.6, 4, 0.5, (150, 700), 0.050),
    StyleTimbre((110, 130), 3, 0.35, 3, 0.35, (400, 3000), 0.020),
    StyleTimbre((120, 140), 4, 0.4, 2, 0.6, (250, 1200), 0.035),
    StyleTimbre((75, 95), 3, 0.6, 4, 0.3, (500, 3500), 0.015),
    StyleTimbre((95, 125), 2, 0.5, 3, 0.45, (180, 2000), 0.030),
)


@dataclass(frozen=True)
class ClipSpec:
    seed: int
    duration: float = CLIP_SECONDS
    tempo: float = 120.0
    progression: tuple[tuple[int, float], ...] = ()
    melody: tuple[tuple[int, float, float], ...] = ()
    drum_pattern: tuple[tuple[float, float], ...] = ()
    style_tag: int = 0

    def __post_init__(self) -> None:
        if self.tempo <= 0:
            raise ValueError(f"Tempo must be positive, got {self.tempo}")
        if self.duration <= 0:
            raise ValueError(f"Duration must be positive, got {self.duration}")
        if not 0 <= self.style_tag < N_STYLES:
            raise ValueError(f"Style tag {self.style_tag} outside [0, {N_STYLES})")
        for label, beats in self.progression:
            if not 0 <= label < N_CHORDS or beats <= 0:
                raise ValueError(f"Invalid progression entry ({label}, {beats})")
        for note, onset, length in self.melody:
            if not MIDI_MIN <= note <= MIDI_MAX:
                raise ValueError(f"Melody note {note} outside [{MIDI_MIN}, {MIDI_MAX}]")
            if length <= 0 or not 0 <= self.seconds(onset) < self.duration:
                raise ValueError(f"Melody note at beat {onset} outside the clip")
        for onset, velocity in self.drum_pattern:
            if not 0 <= self.seconds(onset) < self.duration or not 0 < velocity <= 1:
                raise ValueError(f"Invalid drum onset ({onset}, {velocity})")

    @property
    def beat(self) -> float:
        return 60.0 / self.tempo

    @property
    def n_samples(self) -> int:
        return round(self.duration * SAMPLE_RATE)

    @property
    def n_frames(self) -> int:
        return round(self.duration * FRAME_RATE)

    def seconds(self, beats: float) -> float:
        return beats * self.beat

    def chord_spans(self) -> list[tuple[int, float, float]]:
        spans, start = [], 0.0
        for label, beats in self.progression:
            if start >= self.duration:
                break
            end = min(start + self.seconds(beats), self.duration)
            spans.append((label, start, end))
            start = end
        return spans

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> ClipSpec:
        return cls(
            seed=int(payload["seed"]),
            duration=float(payload["duration"]),
            tempo=float(payload["tempo"]),
            progression=tuple((int(label), float(beats)) for label, beats in payload["progression"]),
            melody=tuple((int(n), float(o), float(d)) for n, o, d in payload["melody"]),
            drum_pattern=tuple((float(o), float(v)) for o, v in payload["drum_pattern"]),
            style_tag=int(payload["style_tag"]),
        )


@dataclass
class Stems:
    harmony: Waveform
    melody: Waveform
    drums: Waveform
    sample_rate: int = SAMPLE_RATE

    @property
    def mix(self) -> Waveform:
        return self.harmony + self.melody + self.drums

    def without_drums(self) -> Waveform:
        return self.harmony + self.melody


@dataclass
class Annotations:
    chords: list[int]
    melody: list[int]
    drum_onsets: list[float]
    style_tag: int
    frame_rate: int = FRAME_RATE
    duration: float = CLIP_SECONDS

    @property
    def n_frames(self) -> int:
        return len(self.chords)

    def to_dict(self) -> dict:
        return {
            "frame_rate": self.frame_rate,
            "n_frames": self.n_frames,
            "duration": self.duration,
            "sample_rate": SAMPLE_RATE,
            "chords": self.chords,
            "melody": self.melody,
            "drum_onsets": self.drum_onsets,
            "style_tag": self.style_tag,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> Annotations:
        return cls(
            chords=[int(c) for c in payload["chords"]],
            melody=[int(m) for m in payload["melody"]],
            drum_onsets=[float(t) for t in payload["drum_onsets"]],
            style_tag=int(payload["style_tag"]),
            frame_rate=int(payload["frame_rate"]),
            duration=float(payload["duration"]),
        )


def _tone(freq: float, t: np.ndarray, partials: int, rolloff: float) -> np.ndarray:
    nyquist = SAMPLE_RATE / 2
    out = np.zeros_like(t)
    for k in range(1, partials + 1):
        if k * freq >= 0.9 * nyquist:
            break
        out += rolloff ** (k - 1) * np.sin(2 * np.pi * k * freq * t)
    return out


def _fade(n: int, fade: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(fade, n // 2)
    if ramp > 0:
        env[:ramp] = np.linspace(0.0, 1.0, ramp, endpoint=False)
        env[n - ramp :] = np.linspace(1.0, 0.0, ramp, endpoint=False)
    return env


def render_harmony(spec: ClipSpec) -> Waveform:
    timbre = STYLES[spec.style_tag]
    out = np.zeros(spec.n_samples)
    fade = round(FADE * SAMPLE_RATE)
    for label, start, end in spec.chord_spans():
        if label == NO_CHORD:
            continue
        i0, i1 = round(start * SAMPLE_RATE), round(end * SAMPLE_RATE)
        t = np.arange(i1 - i0) / SAMPLE_RATE
        root = chord_pitch_classes(label)[0]
        segment = np.zeros_like(t)
        for step in chord_intervals(label):
            freq = float(librosa.midi_to_hz(HARMONY_ROOT_MIDI + root + step))
            segment += _tone(freq, t, timbre.harmony_partials, timbre.harmony_rolloff)
        out[i0:i1] += HARMONY_GAIN * segment * _fade(i1 - i0, fade)
    return out


def render_melody(spec: ClipSpec) -> Waveform:
    timbre = STYLES[spec.style_tag]
    out = np.zeros(spec.n_samples)
    attack, release = round(FADE * SAMPLE_RATE), round(2 * FADE * SAMPLE_RATE)
    for note, onset, length in spec.melody:
        i0 = round(spec.seconds(onset) * SAMPLE_RATE)
        i1 = min(round(spec.seconds(onset + length) * SAMPLE_RATE), spec.n_samples)
        n = i1 - i0
        if n <= 0:
            continue
        t = np.arange(n) / SAMPLE_RATE
        env = 0.7 + 0.3 * np.exp(-t / 0.1)
        env[: min(attack, n)] *= np.linspace(0.0, 1.0, min(attack, n), endpoint=False)
        tail = min(release, n)
        env[n - tail :] *= np.linspace(1.0, 0.0, tail, endpoint=False)
        freq = float(librosa.midi_to_hz(note))
        out[i0:i1] += MELODY_GAIN * env * _tone(freq, t, timbre.melody_partials, timbre.melody_rolloff)
    return out


def render_drums(spec: ClipSpec) -> Waveform:
    timbre = STYLES[spec.style_tag]
    out = np.zeros(spec.n_samples)
    if not spec.drum_pattern:
        return out
    rng = np.random.default_rng(spec.seed)
    sos = signal.butter(2, timbre.drum_band, btype="bandpass", fs=SAMPLE_RATE, output="sos")
    burst_len = round(DRUM_BURST * SAMPLE_RATE)
    t = np.arange(burst_len) / SAMPLE_RATE
    env = np.exp(-t / timbre.drum_decay)
    env[:8] *= np.linspace(0.0, 1.0, 8, endpoint=False)
    for onset, velocity in spec.drum_pattern:
        i0 = round(spec.seconds(onset) * SAMPLE_RATE)
        n = min(burst_len, spec.n_samples - i0)
        burst = signal.sosfilt(sos, rng.standard_normal(burst_len))
        burst /= max(np.max(np.abs(burst)), 1e-12)
        out[i0 : i0 + n] += DRUM_GAIN * velocity * (burst * env)[:n]
    return out


def annotate(spec: ClipSpec) -> Annotations:
    times = np.arange(spec.n_frames) / FRAME_RATE
    chords = np.full(spec.n_frames, NO_CHORD, dtype=int)
    for label, start, end in spec.chord_spans():
        chords[(times >= start) & (times < end)] = label
    melody = np.full(spec.n_frames, REST, dtype=int)
    for note, onset, length in spec.melody:
        start, end = spec.seconds(onset), spec.seconds(onset + length)
        melody[(times >= start) & (times < end)] = note
    onsets = sorted({round(spec.seconds(onset), 6) for onset, _ in spec.drum_pattern})
    return Annotations(
        chords=chords.tolist(),
        melody=melody.tolist(),
        drum_onsets=onsets,
        style_tag=spec.style_tag,
        duration=spec.duration,
    )


def generate_clip(spec: ClipSpec) -> tuple[Waveform, Stems, Annotations]:
    """
    Render a clip and its stems.

    The three stems share one gain so that the mix peak stays below full scale;
    the returned mix is the exact sample-wise sum of the returned stems.
    """
    harmony, melody, drums = render_harmony(spec), render_melody(spec), render_drums(spec)
    peak = float(np.max(np.abs(harmony + melody + drums), initial=0.0))
    gain = PEAK / peak if peak > PEAK else 1.0
    stems = Stems(harmony * gain, melody * gain, drums * gain)
    return stems.mix, stems, annotate(spec)


def sample_clip_spec(seed: int, duration: float = CLIP_SECONDS) -> ClipSpec:
    """
    Draw a random clip spec.

    Sampling scheme, all from `numpy.random.default_rng(seed)`:
      - style uniform over the 8 tags; tempo uniform in the style's range;
      - chords of 2 or 4 beats, labels uniform over the 24 triads with a 5% no-chord;
      - melody walks half/whole beats: 15% rests, otherwise a chord tone (70%) or a
        neighbouring scale step in MIDI 60-83;
      - drums on every beat (velocity 0.85-1.0) plus each off-beat eighth with
        probability 0.4 (velocity 0.5-0.8).
    """
    rng = np.random.default_rng(seed)
    style = int(rng.integers(N_STYLES))
    low, high = STYLES[style].tempo_range
    tempo = float(rng.uniform(low, high))
    total_beats = duration * tempo / 60.0

    progression: list[tuple[int, float]] = []
    spans: list[tuple[int, float, float]] = []
    position = 0.0
    while position < total_beats:
        beats = float(rng.choice((2.0, 4.0)))
        label = NO_CHORD if rng.random() < 0.05 else int(rng.integers(1, N_CHORDS))
        progression.append((label, beats))
        spans.append((label, position, position + beats))
        position += beats

    melody: list[tuple[int, float, float]] = []
    position, previous = 0.0, 60 + int(rng.integers(12))
    while position < total_beats - 0.5:
        length = float(rng.choice((0.5, 1.0)))
        if rng.random() >= 0.15:
            label = next(label for label, start, end in spans if start <= position < end)
            if label != NO_CHORD and rng.random() < 0.7:
                pc = int(rng.choice(chord_pitch_classes(label)))
                candidates = [n for n in range(60, 84) if n % 12 == pc]
                note = min(candidates, key=lambda n: abs(n - previous))
            else:
                note = int(np.clip(previous + rng.choice((-2, -1, 1, 2)), 60, 83))
            melody.append((note, position, length))
            previous = note
        position += length

    drums: list[tuple[float, float]] = []
    last_onset = (duration - 0.05) * tempo / 60.0
    for beat in np.arange(0.0, total_beats, 0.5):
        if beat >= last_onset:
            break
        if beat % 1.0 == 0.0:
            drums.append((float(beat), float(rng.uniform(0.85, 1.0))))
        elif rng.random() < 0.4:
            drums.append((float(beat), float(rng.uniform(0.5, 0.8))))

    return ClipSpec(
        seed=seed,
        duration=duration,
        tempo=tempo,
        progression=tuple(progression),
        melody=tuple(melody),
        drum_pattern=tuple(drums),
        style_tag=style,
    )
