"""
Adherence and quality metrics.

Adherence compares a generated clip against the controls it was asked to follow
(chroma, melody, onsets, chords). Quality compares Gaussian statistics of a fixed
28-dim clip embedding between the reference and generated sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import librosa
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from musicflow.audio.features import chroma, melody_matrix, melody_notes, resample_features, stft_magnitude
from musicflow.utils.errors import UndefinedMetricError
from musicflow.utils.settings import NO_CHORD, ONSET_MIN_GAP, REST, SAMPLE_RATE, InterpMode
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.typing import FloatArray, IntArray, Waveform

EMBEDDING_DIM = 28
ROLLOFF = 0.85
MATCH_SLACK = 1e-9


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine per row pair, skipping rows where either side is all zero."""
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    usable = (na > 0) & (nb > 0)
    return np.sum(a[usable] * b[usable], axis=1) / (na[usable] * nb[usable])


def chroma_cosine(ref: Waveform, gen: Waveform) -> float:
    """Mean per-frame chroma cosine; both clips are trimmed to the shorter one."""
    n = min(np.asarray(ref).size, np.asarray(gen).size)
    cosines = _row_cosines(chroma(np.asarray(ref)[:n]).values, chroma(np.asarray(gen)[:n]).values)
    if cosines.size == 0:
        raise UndefinedMetricError("chroma_cosine: every frame is silent in one of the clips")
    return float(np.clip(cosines.mean(), 0.0, 1.0))


def melody_accuracy(ref_notes: IntArray | list[int], gen: Waveform, threshold: float = 0.5) -> float:
    """
    Share of voiced reference frames whose note the generated clip reproduces exactly.

    The generated melody is read off the binarized salience and mapped onto the
    reference frame grid.
    """
    ref = np.asarray(ref_notes, dtype=np.int64)
    voiced = ref != REST
    if not voiced.any():
        raise UndefinedMetricError("melody_accuracy: the reference has no voiced frames")
    est = resample_features(melody_notes(melody_matrix(gen, threshold)), ref.size, InterpMode.NEAREST)
    return float(np.mean(est[voiced] == ref[voiced]))


def melody_cosine(ref: IntArray, gen: IntArray) -> float:
    """Mean per-frame cosine between binary melody matrices; frames empty on either side are skipped."""
    gen = resample_features(np.asarray(gen), np.asarray(ref).shape[0], InterpMode.NEAREST)
    cosines = _row_cosines(np.asarray(ref, dtype=np.float64), np.asarray(gen, dtype=np.float64))
    if cosines.size == 0:
        raise UndefinedMetricError("melody_cosine: no frame is voiced in both matrices")
    return float(cosines.mean())


@dataclass(frozen=True)
class OnsetScore:
    precision: float
    recall: float
    f1: float


def onset_f1(ref: FloatArray | list[float], est: FloatArray | list[float], tol: float = ONSET_MIN_GAP) -> OnsetScore:
    """
    Precision, recall and F1 under a one-to-one matching.

    A reference and an estimated onset may be paired when they lie within `tol`
    seconds; the number of matches is the maximum bipartite matching. Two empty lists
    score 1.
    """
    ref, est = np.asarray(ref, dtype=np.float64), np.asarray(est, dtype=np.float64)
    if ref.size == 0 and est.size == 0:
        return OnsetScore(1.0, 1.0, 1.0)
    if ref.size == 0 or est.size == 0:
        return OnsetScore(0.0, 0.0, 0.0)

    admissible = np.abs(ref[:, None] - est[None, :]) <= tol + MATCH_SLACK
    matching = maximum_bipartite_matching(csr_matrix(admissible.astype(np.int8)), perm_type="column")
    matches = int(np.count_nonzero(matching >= 0))

    precision, recall = matches / est.size, matches / ref.size
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return OnsetScore(precision, recall, f1)


def chord_iou(ref: IntArray | list[int], gen: IntArray | list[int]) -> float:
    """
    Frame-level IOU of chord agreement.

    Intersection: frames where both carry the same chord. Union: frames where
    either carries a chord. Two all-no-chord sequences score 1.
    """
    ref = np.asarray(ref, dtype=np.int64)
    gen = resample_features(np.asarray(gen, dtype=np.int64), ref.size, InterpMode.NEAREST)
    union = (ref != NO_CHORD) | (gen != NO_CHORD)
    if not union.any():
        return 1.0
    intersection = (ref == gen) & (ref != NO_CHORD)
    return float(intersection.sum() / union.sum())


# Quality
def clip_embedding(waveform: Waveform, sample_rate: int = SAMPLE_RATE) -> FloatArray:
    """
    28 numbers per clip: chroma mean and std (12 + 12), mean spectral centroid,
    rolloff and flux (normalized), and log RMS.
    """
    samples = np.asarray(waveform, dtype=np.float64)
    magnitude = stft_magnitude(samples)
    values = chroma(samples).values
    peak = values.max(axis=1, keepdims=True)
    chroma_norm = np.divide(values, peak, out=np.zeros_like(values), where=peak > 0)

    spectrum = magnitude.T
    nyquist = sample_rate / 2
    centroid = librosa.feature.spectral_centroid(S=spectrum, sr=sample_rate)[0] / nyquist
    rolloff = librosa.feature.spectral_rolloff(S=spectrum, sr=sample_rate, roll_percent=ROLLOFF)[0] / nyquist
    total = magnitude.sum(axis=1, keepdims=True)
    shares = np.divide(magnitude, total, out=np.zeros_like(magnitude), where=total > 0)
    flux = np.abs(np.diff(shares, axis=0)).sum(axis=1) if shares.shape[0] > 1 else np.zeros(1)
    log_rms = np.log(np.sqrt(np.mean(samples**2)) + 1e-8)

    embedding = np.concatenate(
        [chroma_norm.mean(axis=0), chroma_norm.std(axis=0), [centroid.mean(), rolloff.mean(), flux.mean(), log_rms]]
    )
    return np.nan_to_num(embedding)


@dataclass(frozen=True)
class GaussianStats:
    mean: FloatArray
    cov: FloatArray

    @classmethod
    def fit(cls, embeddings: FloatArray | list[FloatArray]) -> GaussianStats:
        data = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if data.shape[0] == 0:
            raise UndefinedMetricError("Cannot fit statistics to an empty set")
        cov = np.cov(data, rowvar=False) if data.shape[0] > 1 else np.zeros((data.shape[1], data.shape[1]))
        return cls(data.mean(axis=0), np.atleast_2d(cov))


def _psd_eigenvalues(matrix: np.ndarray, what: str, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    symmetric = (matrix + matrix.T) / 2
    values, vectors = np.linalg.eigh(symmetric)
    if values.min(initial=0.0) < -tol:
        raise ValueError(f"{what} is not positive semidefinite (eigenvalue {values.min():.3e})")
    return np.maximum(values, 0.0), vectors


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"Dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    values, vectors = _psd_eigenvalues(a.cov, "first covariance")
    _psd_eigenvalues(b.cov, "second covariance")
    root_a = (vectors * np.sqrt(values)) @ vectors.T
    product, _ = _psd_eigenvalues(root_a @ b.cov @ root_a, "covariance product")

    diff = a.mean - b.mean
    distance = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(product).sum()
    return float(max(distance, 0.0))
