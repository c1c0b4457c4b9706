"""
Control features derived from audio.

Chroma, harmonic-sum melody salience, template chord labels and spectral-flux
onsets. All analysis runs on a 1024-sample window with a 320-sample hop, which at
8 kHz is exactly the 25 Hz latent frame rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import librosa
import numpy as np
from scipy import ndimage, signal

from musicflow.audio.chords import chord_templates
from musicflow.utils.settings import (
    CHORD_MEDIAN,
    CHORD_THRESHOLD,
    HOP,
    MELODY_BIN_MIDI,
    N_FFT,
    NO_CHORD,
    ONSET_HOP,
    ONSET_MIN_GAP,
    ONSET_N_FFT,
    REST,
    SALIENCE_DECAY,
    SALIENCE_HARMONICS,
    SAMPLE_RATE,
    InterpMode,
)
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.typing import FloatArray, IntArray, Waveform

CHROMA_FMIN, CHROMA_FMAX = 55.0, 3800.0
ONSET_CONTEXT = 8
ONSET_DELTA = 0.05


@dataclass(frozen=True)
class Chromagram:
    values: FloatArray
    n_fft: int = N_FFT
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SaliencyMatrix:
    values: FloatArray
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE


def _non_empty(waveform: Waveform) -> np.ndarray:
    samples = np.asarray(waveform, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise ValueError("Expected a non-empty mono waveform")
    return samples


def stft_magnitude(waveform: Waveform, n_fft: int = N_FFT, hop: int = HOP) -> FloatArray:
    """
    Magnitude spectrogram, frames on rows.

    Frame t is centred on sample t * hop (zero padding at the edges); there are
    ceil(len / hop) frames.
    """
    samples = _non_empty(waveform)
    spec = np.abs(librosa.stft(samples, n_fft=n_fft, hop_length=hop, window="hann", center=True, pad_mode="constant"))
    n_frames = math.ceil(samples.size / hop)
    return spec[:, :n_frames].T


def _chroma_fold(n_fft: int = N_FFT) -> np.ndarray:
    freqs = librosa.fft_frequencies(sr=SAMPLE_RATE, n_fft=n_fft)
    fold = np.zeros((freqs.size, 12))
    usable = (freqs >= CHROMA_FMIN) & (freqs <= CHROMA_FMAX)
    classes = np.round(librosa.hz_to_midi(freqs[usable])).astype(int) % 12
    fold[np.flatnonzero(usable), classes] = 1.0
    return fold


def chroma(waveform: Waveform) -> Chromagram:
    return Chromagram(stft_magnitude(waveform) @ _chroma_fold())


def _salience_weights(n_fft: int = N_FFT) -> np.ndarray:
    """(F, 53) matrix that linearly interpolates the spectrum at each harmonic of each bin."""
    bin_hz = SAMPLE_RATE / n_fft
    n_bins = n_fft // 2 + 1
    weights = np.zeros((n_bins, len(MELODY_BIN_MIDI)))
    for j, midi in enumerate(MELODY_BIN_MIDI):
        f0 = float(librosa.midi_to_hz(midi))
        for h in range(1, SALIENCE_HARMONICS + 1):
            position = h * f0 / bin_hz
            lower = int(math.floor(position))
            if lower + 1 >= n_bins:
                break
            frac = position - lower
            weight = SALIENCE_DECAY ** (h - 1)
            weights[lower, j] += weight * (1.0 - frac)
            weights[lower + 1, j] += weight * frac
    return weights


def _normalize_rows(values: np.ndarray) -> np.ndarray:
    peak = values.max(axis=1, keepdims=True)
    return np.divide(values, peak, out=np.zeros_like(values), where=peak > 0)


def melody_saliency(waveform: Waveform) -> SaliencyMatrix:
    """Harmonic-sum salience over the 53 semitone bins, each frame scaled to max 1."""
    salience = stft_magnitude(waveform) @ _salience_weights()
    return SaliencyMatrix(_normalize_rows(salience))


def binarize_melody(saliency: SaliencyMatrix | FloatArray, threshold: float = 0.5) -> IntArray:
    """
    Keep only the strongest supra-threshold bin per frame.

    Ties resolve to the lowest bin; rows with nothing above threshold stay empty.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"Threshold must lie in (0, 1), got {threshold}")
    values = saliency.values if isinstance(saliency, SaliencyMatrix) else np.asarray(saliency)
    kept = np.where(values >= threshold, values, 0.0)
    binary = np.zeros(values.shape, dtype=np.int64)
    voiced = kept.max(axis=1) > 0
    binary[np.flatnonzero(voiced), kept[voiced].argmax(axis=1)] = 1
    return binary


def melody_matrix(waveform: Waveform, threshold: float = 0.5) -> IntArray:
    return binarize_melody(melody_saliency(waveform), threshold)


def melody_notes(binary: IntArray) -> IntArray:
    """Per-frame MIDI note of a binarized melody matrix, `REST` for empty rows."""
    midi = np.asarray(MELODY_BIN_MIDI)[binary.argmax(axis=1)]
    return np.where(binary.max(axis=1) > 0, midi, REST)


def notes_to_matrix(notes: IntArray | list[int]) -> IntArray:
    """Binary melody matrix from per-frame MIDI notes; notes outside the bins become rests."""
    notes = np.asarray(notes)
    binary = np.zeros((notes.size, len(MELODY_BIN_MIDI)), dtype=np.int64)
    index = notes - MELODY_BIN_MIDI[0]
    inside = (notes != REST) & (index >= 0) & (index < len(MELODY_BIN_MIDI))
    binary[np.flatnonzero(inside), index[inside]] = 1
    return binary


def _window_majority(window: np.ndarray) -> float:
    counts = np.bincount(window.astype(np.int64))
    centre = int(window[window.size // 2])
    return float(centre if counts[centre] == counts.max() else counts.argmax())


def chord_labels(
    c: Chromagram,
    threshold: float = CHORD_THRESHOLD,
    median: int = CHORD_MEDIAN,
) -> IntArray:
    """
    Per-frame triad labels (1..24) or `NO_CHORD`.

    The `median` window smooths labels by majority vote, so a smoothed frame always
    carries a label that occurs in its window; ties keep the centre label.
    """
    templates = chord_templates()
    templates = templates / np.linalg.norm(templates, axis=1, keepdims=True)
    norms = np.linalg.norm(c.values, axis=1)
    unit = np.divide(c.values, norms[:, None], out=np.zeros_like(c.values), where=norms[:, None] > 0)
    scores = unit @ templates.T
    best = scores.argmax(axis=1)
    labels = np.where(scores[np.arange(len(best)), best] >= threshold, best + 1, NO_CHORD)
    labels[norms == 0] = NO_CHORD
    if median > 1 and labels.size:
        labels = ndimage.generic_filter(labels, _window_majority, size=median, mode="nearest")
    return labels.astype(np.int64)


def detect_onsets(waveform: Waveform) -> FloatArray:
    """
    Onset times in seconds from half-wave-rectified spectral flux.

    Flux is taken on log-compressed magnitudes of a short (32 ms) window, thresholded
    by its local mean plus a fraction of its peak, and peaks closer than 50 ms are
    merged in favour of the stronger one.
    """
    samples = _non_empty(waveform)
    log_mag = np.log1p(100.0 * stft_magnitude(samples, ONSET_N_FFT, ONSET_HOP))
    rises = np.diff(log_mag, axis=0, prepend=np.zeros((1, log_mag.shape[1])))
    flux = np.maximum(rises, 0.0).sum(axis=1)
    if flux.max(initial=0.0) <= 0:
        return np.zeros(0)

    threshold = ndimage.uniform_filter1d(flux, size=2 * ONSET_CONTEXT + 1, mode="nearest")
    threshold += ONSET_DELTA * flux.max()
    gap = max(1, math.ceil(ONSET_MIN_GAP * SAMPLE_RATE / ONSET_HOP))
    peaks, _ = signal.find_peaks(np.concatenate(([0.0], flux)), distance=gap)
    peaks = peaks - 1
    peaks = peaks[flux[peaks] > threshold[peaks]]
    times = peaks * ONSET_HOP / SAMPLE_RATE
    return times[times < samples.size / SAMPLE_RATE]


def resample_features(seq: np.ndarray | list, target_len: int, mode: InterpMode | str) -> np.ndarray:
    """
    Map a frame sequence onto a grid of `target_len` frames.

    nearest: target frame i takes source frame floor((i + 0.5) * S / T).
    linear: endpoints aligned, componentwise interpolation.
    """
    values = np.asarray(seq)
    if values.shape[0] == 0:
        raise ValueError("Cannot resample an empty sequence")
    if target_len <= 0:
        raise ValueError(f"Target length must be positive, got {target_len}")
    source_len = values.shape[0]
    if source_len == target_len:
        return values.copy()

    match InterpMode(mode):
        case InterpMode.NEAREST:
            index = np.floor((np.arange(target_len) + 0.5) * source_len / target_len).astype(int)
            return values[np.minimum(index, source_len - 1)]
        case InterpMode.LINEAR:
            src = np.arange(source_len)
            dst = np.arange(target_len) * (source_len - 1) / max(target_len - 1, 1)
            flat = values.reshape(source_len, -1).astype(np.float64)
            out = np.stack([np.interp(dst, src, flat[:, j]) for j in range(flat.shape[1])], axis=1)
            return out.reshape((target_len, *values.shape[1:]))
