from __future__ import annotations

import numpy as np
import pytest

from musicflow.audio.codec import (
    RVQCodebooks,
    ToyCodec,
    reconstruct_first_stream,
    residual_energies,
    rvq_decode,
    rvq_encode,
    rvq_fit,
)
from musicflow.utils.settings import SAMPLE_RATE


@pytest.fixture(scope="module")
def latents(codec, manifest):
    return np.concatenate([codec.encode(clip.mix) for clip in manifest.clips()])


def test_encode_shape_and_determinism(codec, manifest):
    clip = manifest.load_clip(manifest.records[0])
    z = codec.encode(clip.mix)
    assert z.shape == (125, 16)
    assert np.array_equal(z, codec.encode(clip.mix))
    assert np.all(np.isfinite(z))


def test_encode_rejects_empty(codec):
    with pytest.raises(ValueError):
        codec.encode(np.zeros(0))


def test_silence_encodes_to_the_zero_latent(codec):
    z = codec.encode(np.zeros(5 * SAMPLE_RATE))
    assert z.shape == (125, 16)
    assert np.allclose(z, 0.0)


def test_zero_latent_decodes_to_silence(codec):
    out = codec.decode(np.zeros((125, 16)), n_samples=5 * SAMPLE_RATE)
    assert out.size == 5 * SAMPLE_RATE
    assert np.sqrt(np.mean(out**2)) < 1e-3


def test_decode_length_defaults_to_frames(codec, manifest):
    clip = manifest.load_clip(manifest.records[1])
    assert codec.decode(codec.encode(clip.mix)).size == clip.mix.size


def test_single_codebook_recovers_distinct_points():
    points = np.random.default_rng(0).standard_normal((8, 4)) * 10
    cb = rvq_fit(points, n_codebooks=1, size=8, iters=5, seed=0)
    assert np.allclose(np.sort(cb.centroids[0], axis=0), np.sort(points, axis=0))
    assert residual_energies(points, cb)[0] == pytest.approx(0.0, abs=1e-12)


def test_fit_needs_enough_frames():
    with pytest.raises(ValueError):
        rvq_fit(np.zeros((5, 4)), size=8)


def test_refit_is_identical(latents):
    first = rvq_fit(latents, n_codebooks=2, size=8, iters=5, seed=3)
    second = rvq_fit(latents, n_codebooks=2, size=8, iters=5, seed=3)
    assert np.array_equal(first.centroids, second.centroids)


def test_residual_energy_is_non_increasing(codec, latents):
    energies = residual_energies(latents, codec.require_codebooks())
    assert len(energies) == 4
    assert all(later <= earlier for earlier, later in zip(energies, energies[1:]))
    assert energies[-1] < np.mean(np.sum(latents**2, axis=1))


def test_full_reconstruction_beats_first_stream(codec, latents):
    cb = codec.require_codebooks()
    q = rvq_encode(latents, cb)
    first = np.mean((latents - reconstruct_first_stream(q, cb)) ** 2)
    full = np.mean((latents - rvq_decode(q, cb)) ** 2)
    assert full <= first


def test_first_stream_is_stage_one_quantization(codec, latents):
    cb = codec.require_codebooks()
    q = rvq_encode(latents, cb)
    assert np.array_equal(reconstruct_first_stream(q, cb), cb.centroids[0][q[:, 0]])
    assert np.all((q >= 0) & (q < cb.size))


def test_nearest_centroid_matches_exhaustive_scan():
    rng = np.random.default_rng(1)
    cb = RVQCodebooks(rng.standard_normal((1, 16, 3)))
    frames = rng.standard_normal((100, 3))
    expected = [int(np.argmin([np.sum((f - c) ** 2) for c in cb.centroids[0]])) for f in frames]
    assert rvq_encode(frames, cb)[:, 0].tolist() == expected


def test_centroid_with_zero_later_stages():
    centroids = np.zeros((2, 3, 2))
    centroids[0] = [[1.0, 1.0], [5.0, -2.0], [0.0, 3.0]]
    centroids[1, 1] = [0.3, 0.3]
    cb = RVQCodebooks(centroids)
    q = rvq_encode(np.array([[5.0, -2.0]]), cb)
    assert q.tolist() == [[1, 0]]
    assert np.allclose(rvq_decode(q, cb), [[5.0, -2.0]])


def test_all_same_index_reconstructs_one_centroid():
    cb = RVQCodebooks(np.random.default_rng(2).standard_normal((2, 4, 3)))
    q = np.full((5, 2), 3)
    assert np.array_equal(reconstruct_first_stream(q, cb), np.tile(cb.centroids[0][3], (5, 1)))


def test_codec_file_round_trip(codec, manifest, tmp_path):
    loaded = ToyCodec.load(codec.save(tmp_path / "codec.bin"))
    assert loaded.require_codebooks().centroids.shape == (4, 8, 16)
    clip = manifest.load_clip(manifest.records[2])
    # Codec files hold 32-bit floats
    assert np.allclose(loaded.encode(clip.mix), codec.encode(clip.mix), rtol=1e-5, atol=1e-4)


def test_unfitted_codec_has_no_tokens():
    with pytest.raises(ValueError):
        ToyCodec.create().tokens(np.zeros((3, 16)))


def test_decoded_loudness_follows_the_input(codec, manifest):
    clips = manifest.clips(manifest.records[:3])
    source = np.concatenate([codec.log_mel(clip.mix).mean(axis=1) for clip in clips])
    decoded = np.concatenate([codec.log_mel(codec.decode(codec.encode(clip.mix))).mean(axis=1) for clip in clips])
    assert np.corrcoef(source, decoded)[0, 1] > 0.5


def test_training_latents_have_unit_scale(codec, manifest):
    train, holdout = manifest.split()
    z = np.concatenate([codec.encode(clip.mix) for clip in manifest.clips(train)])
    assert np.allclose(np.mean(z**2, axis=0), 1.0)
    held = np.concatenate([codec.encode(clip.mix) for clip in manifest.clips(holdout)])
    assert np.all(np.abs(held.mean(axis=0)) < 5.0)
    assert np.all(held.std(axis=0) < 5.0)
