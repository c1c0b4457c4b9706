from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from musicflow.audio.codec import ToyCodec
from musicflow.audio.corpus import Manifest, build_corpus
from musicflow.model.conditioning import ControlFeatures
from musicflow.model.vector_field import ModelConfig, VectorField
from musicflow.utils.config import RunConfig
from musicflow.utils.settings import N_FRAMES, Control

TINY_MODEL = {
    "layers": 2,
    "heads": 2,
    "model_dim": 32,
    "ffn_dim": 64,
    "conv_pos_kernel": 3,
    "style_tokens": 2,
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(6, seed=0, out_dir=root)
    return root


@pytest.fixture(scope="session")
def manifest(corpus_dir: Path) -> Manifest:
    return Manifest.load(corpus_dir)


@pytest.fixture(scope="session")
def codec(manifest: Manifest) -> ToyCodec:
    train, _ = manifest.split()
    clips = manifest.clips(train)
    codec = ToyCodec.create(seed=0)
    codec.fit_standardization([clip.mix for clip in clips])
    latents = np.concatenate([codec.encode(clip.mix) for clip in clips])
    codec.fit_codebooks(latents, seed=0, n_codebooks=4, size=8, iters=5)
    return codec


@pytest.fixture
def tiny_config(tmp_path: Path, corpus_dir: Path) -> RunConfig:
    return RunConfig(
        corpus_dir=str(corpus_dir),
        codec_path=str(tmp_path / "codec.bin"),
        run_dir=str(tmp_path / "train"),
        out_dir=str(tmp_path / "generate"),
        rvq_size=8,
        kmeans_iters=5,
        batch_size=2,
        steps=3,
        warmup_steps=1,
        log_every=1,
        checkpoint_every=2,
        n_generate=1,
        fixed_step=0.5,
        **TINY_MODEL,
    )


@pytest.fixture(scope="session")
def tiny_model() -> VectorField:
    return VectorField(ModelConfig(**TINY_MODEL), seed=0)


def sample_features(rng: np.random.Generator, n_frames: int = N_FRAMES, n_enc: int = 16) -> ControlFeatures:
    """Random but well-formed controls for every local stream plus a style tag."""
    melody = np.zeros((n_frames, 53), dtype=np.int64)
    melody[np.arange(n_frames), rng.integers(0, 53, n_frames)] = 1
    features = ControlFeatures.empty(n_frames, n_enc).with_style(int(rng.integers(8)))
    features = features.with_control(Control.CHORDS, rng.integers(0, 25, n_frames))
    features = features.with_control(Control.MELODY, melody)
    features = features.with_control(Control.AUDIO, rng.standard_normal((n_frames, n_enc)))
    features = features.with_control(Control.DRUMS, rng.standard_normal((n_frames, n_enc)))
    return features.with_control(Control.INPAINT, rng.standard_normal((n_frames, n_enc)))


@pytest.fixture
def make_features():
    return sample_features
