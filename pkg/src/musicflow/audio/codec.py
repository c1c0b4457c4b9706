"""
Toy latent codec.

A fixed (non-learned) encoder maps audio to a 16-dim latent at 25 Hz: log-mel
energies relative to a silence floor, an orthonormal seeded projection and a
per-dimension RMS scaling fitted on the corpus. A residual vector quantizer
discretizes those latents; its first codebook alone gives the coarse
reconstruction used by the audio conditions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import librosa
import numpy as np
from scipy.cluster.vq import kmeans2

from musicflow.audio.features import stft_magnitude
from musicflow.autodiff.checkpoint import load_arrays, save_arrays
from musicflow.utils.settings import (
    FRAME_RATE,
    HOP,
    KMEANS_ITERS,
    LOG_FLOOR,
    MEL_BANDS,
    N_ENC,
    N_FFT,
    RVQ_CODEBOOKS,
    RVQ_SIZE,
    SAMPLE_RATE,
)
from musicflow.utils.typing import TYPE_CHECKING, as_rng

if TYPE_CHECKING:
    from musicflow.utils.typing import FloatArray, IntArray, SeedLike, Waveform

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RVQCodebooks:
    centroids: FloatArray  # (K, N, n_enc)

    @property
    def n_codebooks(self) -> int:
        return self.centroids.shape[0]

    @property
    def size(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[2]


def rvq_fit(
    latents: FloatArray,
    n_codebooks: int = RVQ_CODEBOOKS,
    size: int = RVQ_SIZE,
    iters: int = KMEANS_ITERS,
    seed: SeedLike = 0,
) -> RVQCodebooks:
    """
    Fit K codebooks, each by k-means on the residual left by the previous ones.

    Args:
        latents: (M, n_enc) training frames, M >= size.
        n_codebooks: Number of quantizer stages K.
        size: Centroids per codebook N.
        iters: Lloyd iterations per stage (k-means++ seeding).
        seed: Seed shared by all stages.
    """
    frames = np.asarray(latents, dtype=np.float64).reshape(-1, latents.shape[-1])
    if frames.shape[0] < size:
        raise ValueError(f"Need at least {size} frames to fit a codebook of size {size}, got {frames.shape[0]}")

    rng = as_rng(seed)
    residual = frames.copy()
    books = []
    for stage in range(n_codebooks):
        centroids, labels = kmeans2(residual, size, iter=iters, minit="++", seed=rng)
        residual = residual - centroids[labels]
        books.append(centroids)
        logger.debug(f"RVQ stage {stage}: residual energy {np.mean(np.sum(residual**2, axis=1)):.5f}")
    return RVQCodebooks(np.stack(books))


def _nearest(frames: FloatArray, centroids: FloatArray) -> IntArray:
    distances = ((frames[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return distances.argmin(axis=1)


def rvq_encode(z: FloatArray, cb: RVQCodebooks) -> IntArray:
    """Greedy residual quantization; (T, K) indices, ties to the lowest index."""
    residual = np.asarray(z, dtype=np.float64).copy()
    streams = np.zeros((residual.shape[0], cb.n_codebooks), dtype=np.int64)
    for k, centroids in enumerate(cb.centroids):
        streams[:, k] = _nearest(residual, centroids)
        residual -= centroids[streams[:, k]]
    return streams


def rvq_decode(q: IntArray, cb: RVQCodebooks, n_streams: int | None = None) -> FloatArray:
    """Sum of the centroids chosen by the first `n_streams` streams (all by default)."""
    streams = cb.n_codebooks if n_streams is None else n_streams
    out = np.zeros((q.shape[0], cb.dim))
    for k in range(streams):
        out += cb.centroids[k][q[:, k]]
    return out


def reconstruct_first_stream(q: IntArray, cb: RVQCodebooks) -> FloatArray:
    return cb.centroids[0][q[:, 0]].astype(np.float64)


def residual_energies(z: FloatArray, cb: RVQCodebooks) -> list[float]:
    """Mean squared residual after each quantizer stage."""
    q = rvq_encode(z, cb)
    return [float(np.mean(np.sum((z - rvq_decode(q, cb, k + 1)) ** 2, axis=1))) for k in range(cb.n_codebooks)]


class ToyCodec:
    def __init__(
        self,
        projection: FloatArray,
        scale: FloatArray | None = None,
        codebooks: RVQCodebooks | None = None,
        sample_rate: int = SAMPLE_RATE,
        frame_rate: int = FRAME_RATE,
    ) -> None:
        self.projection = np.asarray(projection, dtype=np.float64)
        self.n_mels, self.n_enc = self.projection.shape
        self.scale = np.ones(self.n_enc) if scale is None else np.asarray(scale, dtype=np.float64)
        self.codebooks = codebooks
        self.sample_rate = sample_rate
        self.frame_rate = frame_rate
        self.hop = sample_rate // frame_rate

        # Filterbank
        self.mel_basis = librosa.filters.mel(sr=sample_rate, n_fft=N_FFT, n_mels=self.n_mels, norm=None)
        self.band_hz = librosa.mel_frequencies(n_mels=self.n_mels + 2, fmax=sample_rate / 2)[1:-1]

    @classmethod
    def create(cls, n_enc: int = N_ENC, n_mels: int = MEL_BANDS, seed: int = 0) -> ToyCodec:
        """Orthonormal projection whose first column is the flat (overall loudness) direction."""
        rng = np.random.default_rng(seed)
        basis = np.concatenate([np.ones((n_mels, 1)), rng.standard_normal((n_mels, n_enc - 1))], axis=1)
        q, r = np.linalg.qr(basis)
        q *= np.sign(np.diag(r))
        return cls(q)

    # Analysis
    def n_frames(self, n_samples: int) -> int:
        return round(n_samples / self.sample_rate * self.frame_rate)

    def log_mel(self, waveform: Waveform) -> FloatArray:
        """(T, n_mels) log energies above the silence floor (silence maps to 0)."""
        n_samples = np.asarray(waveform).size
        if n_samples == 0:
            raise ValueError("Cannot encode an empty waveform")
        power = stft_magnitude(waveform, N_FFT, self.hop) ** 2
        energies = power[: self.n_frames(n_samples)] @ self.mel_basis.T
        return np.log(energies + LOG_FLOOR) - np.log(LOG_FLOOR)

    def project(self, waveform: Waveform) -> FloatArray:
        return self.log_mel(waveform) @ self.projection

    def encode(self, waveform: Waveform) -> FloatArray:
        return self.project(waveform) / self.scale

    def fit_standardization(self, waveforms: list[Waveform]) -> None:
        """
        Per-dimension RMS scaling on the training corpus.

        No offset is subtracted: zero-energy frames project to the origin, so silence
        encodes to the zero latent and the zero latent decodes to silence.
        """
        raw = np.concatenate([self.project(w) for w in waveforms])
        self.scale = np.maximum(np.sqrt(np.mean(np.square(raw), axis=0)), 1e-6)

    def fit_codebooks(self, latents: FloatArray, seed: SeedLike = 0, **kwargs: int) -> RVQCodebooks:
        self.codebooks = rvq_fit(latents, seed=seed, **kwargs)
        return self.codebooks

    # Quantization
    def require_codebooks(self) -> RVQCodebooks:
        if self.codebooks is None:
            raise ValueError("Codec has no fitted codebooks")
        return self.codebooks

    def tokens(self, z: FloatArray) -> IntArray:
        return rvq_encode(z, self.require_codebooks())

    def first_stream(self, waveform: Waveform) -> FloatArray:
        cb = self.require_codebooks()
        return reconstruct_first_stream(rvq_encode(self.encode(waveform), cb), cb)

    # Synthesis
    def decode(self, z: FloatArray, n_samples: int | None = None, seed: int = 0) -> Waveform:
        """
        Best-effort resynthesis: undo the standardization and projection, then drive one
        sinusoid per mel band (random phase) with the recovered band amplitude.
        """
        latents = np.asarray(z, dtype=np.float64)
        n_frames = latents.shape[0]
        length = n_frames * self.hop if n_samples is None else n_samples

        log_mel = (latents * self.scale) @ self.projection.T
        energies = np.maximum(np.exp(log_mel + np.log(LOG_FLOOR)) - LOG_FLOOR, 0.0)
        amplitudes = 4.0 * np.sqrt(energies) / N_FFT

        frame_pos = np.arange(n_frames) * self.hop
        sample_pos = np.arange(length)
        phases = np.random.default_rng(seed).uniform(0, 2 * np.pi, self.n_mels)
        out = np.zeros(length)
        for band in range(self.n_mels):
            envelope = np.interp(sample_pos, frame_pos, amplitudes[:, band])
            out += envelope * np.sin(2 * np.pi * self.band_hz[band] * sample_pos / self.sample_rate + phases[band])
        return out

    # Persistence
    def save(self, path: Path) -> Path:
        cb = self.require_codebooks()
        header = np.array([self.sample_rate, self.frame_rate, self.n_enc, cb.n_codebooks, cb.size], dtype=np.float32)
        return save_arrays(
            path,
            {
                "header": header,
                "scale": self.scale,
                "projection": self.projection,
                "codebooks": cb.centroids,
            },
        )

    @classmethod
    def load(cls, path: Path) -> ToyCodec:
        arrays = load_arrays(path)
        sample_rate, frame_rate, n_enc, n_codebooks, size = (int(v) for v in arrays["header"])
        centroids = arrays["codebooks"].astype(np.float64)
        if centroids.shape != (n_codebooks, size, n_enc):
            raise ValueError(f"{path}: codebook shape {centroids.shape} disagrees with header")
        return cls(
            arrays["projection"],
            arrays["scale"],
            RVQCodebooks(centroids),
            sample_rate=sample_rate,
            frame_rate=frame_rate,
        )
