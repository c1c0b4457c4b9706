from __future__ import annotations

import numpy as np
import pytest

from musicflow.audio.synth import ClipSpec, generate_clip
from musicflow.evaluation.metrics import (
    EMBEDDING_DIM,
    GaussianStats,
    chord_iou,
    chroma_cosine,
    clip_embedding,
    frechet_distance,
    melody_accuracy,
    melody_cosine,
    onset_f1,
)
from musicflow.evaluation.report import METRICS, EvalPair, aggregate, evaluate
from musicflow.utils.config import RunConfig
from musicflow.utils.errors import UndefinedMetricError
from musicflow.utils.settings import SAMPLE_RATE


def best_matching(ref: list[float], est: list[float], tol: float) -> int:
    if not ref:
        return 0
    head, rest = ref[0], ref[1:]
    best = best_matching(rest, est, tol)
    for j, e in enumerate(est):
        if abs(head - e) <= tol:
            best = max(best, 1 + best_matching(rest, est[:j] + est[j + 1 :], tol))
    return best


def stats(mean, cov) -> GaussianStats:
    return GaussianStats(np.atleast_1d(np.asarray(mean, dtype=np.float64)), np.atleast_2d(np.asarray(cov, dtype=np.float64)))


# Onsets
def test_onset_hand_cases():
    assert onset_f1([0.5, 1.0], [0.52, 1.2]).f1 == pytest.approx(0.5)
    assert onset_f1([], []).f1 == 1.0
    assert onset_f1([1.0], []).f1 == 0.0
    assert onset_f1([], [1.0]).precision == 0.0
    score = onset_f1([1.0, 2.0, 3.0], [1.01, 2.02])
    assert (score.precision, score.recall) == (1.0, pytest.approx(2 / 3))


def test_onset_matching_is_one_to_one():
    assert onset_f1([1.0], [0.98, 1.02]).precision == pytest.approx(0.5)
    # Greedy pairing of 1.04 with 1.0 would leave 0.97 unmatched
    assert onset_f1([0.97, 1.04], [1.0, 1.08]).f1 == pytest.approx(1.0)


def test_onset_matching_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = sorted(rng.uniform(0, 1, int(rng.integers(0, 6))).tolist())
        est = sorted(rng.uniform(0, 1, int(rng.integers(0, 6))).tolist())
        score = onset_f1(ref, est, tol=0.1)
        if ref and est:
            matches = best_matching(ref, est, 0.1)
            assert score.precision == pytest.approx(matches / len(est))
            assert score.recall == pytest.approx(matches / len(ref))
        assert 0.0 <= score.f1 <= 1.0


# Chords
def test_chord_iou_example():
    assert chord_iou([1, 1, 0, 0], [1, 8, 8, 0]) == pytest.approx(1 / 3)


def test_chord_iou_bounds_and_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.integers(0, 25, 40), rng.integers(0, 25, 40)
        assert chord_iou(a, b) == pytest.approx(chord_iou(b, a))
        assert 0.0 <= chord_iou(a, b) <= 1.0
        assert chord_iou(a, a) == 1.0


def test_chord_iou_edges():
    assert chord_iou([1, 2, 3], [4, 5, 6]) == 0.0
    assert chord_iou([0, 0], [0, 0]) == 1.0


# Frechet distance
def test_frechet_of_equal_statistics():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((50, 4))
    s = GaussianStats.fit(x)
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-8)


def test_frechet_one_dimensional_cases():
    assert frechet_distance(stats(0, 1), stats(1, 1)) == pytest.approx(1.0)
    assert frechet_distance(stats(0, 1), stats(0, 4)) == pytest.approx(1.0)


def test_frechet_is_symmetric():
    rng = np.random.default_rng(3)
    a = GaussianStats.fit(rng.standard_normal((40, 3)))
    b = GaussianStats.fit(rng.standard_normal((40, 3)) * 2 + 1)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-6)
    assert frechet_distance(a, b) > 0


def test_frechet_rejects_indefinite_covariance():
    with pytest.raises(ValueError):
        frechet_distance(stats([0, 0], [[1, 0], [0, -1]]), stats([0, 0], np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance(stats([0, 0], np.eye(2)), stats(0, 1))


# Chroma and melody adherence
def test_chroma_cosine():
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    c4 = np.sin(2 * np.pi * 261.63 * t)
    fs4 = np.sin(2 * np.pi * 369.99 * t)
    assert chroma_cosine(c4, c4) == pytest.approx(1.0)
    assert chroma_cosine(c4, fs4) < 0.1
    assert chroma_cosine(c4, fs4) == pytest.approx(chroma_cosine(fs4, c4))
    with pytest.raises(UndefinedMetricError):
        chroma_cosine(c4, np.zeros(SAMPLE_RATE))


def test_melody_accuracy_of_a_rendered_line():
    spec = ClipSpec(seed=0, tempo=60.0, melody=((60, 0.0, 1.0), (64, 1.0, 1.0), (67, 2.0, 1.0), (72, 3.0, 2.0)))
    mix, _, ann = generate_clip(spec)
    assert melody_accuracy(ann.melody, mix) >= 0.9
    assert melody_accuracy(ann.melody, np.zeros_like(mix)) == 0.0
    transposed = [note + 1 if note >= 0 else note for note in ann.melody]
    assert melody_accuracy(transposed, mix) <= 0.1


def test_melody_accuracy_needs_voiced_frames():
    with pytest.raises(UndefinedMetricError):
        melody_accuracy([-1, -1], np.zeros(SAMPLE_RATE))


def test_melody_cosine():
    a = np.eye(4, dtype=np.int64)
    assert melody_cosine(a, a) == pytest.approx(1.0)
    assert melody_cosine(a, np.roll(a, 1, axis=1)) == 0.0
    with pytest.raises(UndefinedMetricError):
        melody_cosine(a, np.zeros_like(a))


# Quality
def test_clip_embedding(manifest):
    clip = manifest.load_clip(manifest.records[0])
    emb = clip_embedding(clip.mix)
    assert emb.shape == (EMBEDDING_DIM,)
    assert np.all(np.isfinite(emb))
    assert np.all(np.isfinite(clip_embedding(np.zeros(SAMPLE_RATE))))


# Report
def test_self_comparison_scores_perfectly(manifest):
    clips = manifest.clips(manifest.records[:3])
    pairs = [EvalPair(f"gen_{i}", clip, clip.mix) for i, clip in enumerate(clips)]
    report = evaluate(pairs, RunConfig())
    assert report["n"] == 3
    for row in report["clips"]:
        assert row["chroma_cosine"] == pytest.approx(1.0)
        assert row["chord_iou"] == 1.0
    assert report["frechet_distance"] == pytest.approx(0.0, abs=1e-5)
    assert set(report["aggregates"]) == set(METRICS)


def test_evaluate_needs_pairs():
    with pytest.raises(UndefinedMetricError):
        evaluate([], RunConfig())


def test_aggregate_skips_undefined_values():
    rows = [{name: 1.0 for name in METRICS}, {**{name: 3.0 for name in METRICS}, "melody_accuracy": None}]
    out = aggregate(rows)
    assert out["chroma_cosine"] == {"mean": 2.0, "std": 1.0, "n": 2}
    assert out["melody_accuracy"] == {"mean": 1.0, "std": 0.0, "n": 1}


def test_onset_tolerance_boundary():
    assert onset_f1([1.0], [1.04]).f1 == 1.0
    assert onset_f1([1.0], [1.06]).f1 == 0.0
    score = onset_f1([1.0, 1.08], [1.04])
    assert (score.precision, score.recall) == (1.0, 0.5)
    assert score.f1 == pytest.approx(2 / 3)
