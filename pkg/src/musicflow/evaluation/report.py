from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from musicflow.audio.features import chord_labels, chroma, detect_onsets, melody_matrix, notes_to_matrix, resample_features
from musicflow.evaluation.metrics import (
    GaussianStats,
    chord_iou,
    chroma_cosine,
    clip_embedding,
    frechet_distance,
    melody_accuracy,
    melody_cosine,
    onset_f1,
)
from musicflow.utils.errors import UndefinedMetricError
from musicflow.utils.settings import ChordReference, InterpMode
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.audio.corpus import Clip
    from musicflow.utils.config import RunConfig
    from musicflow.utils.typing import Waveform

logger = logging.getLogger(__name__)

METRICS = (
    "chroma_cosine",
    "melody_accuracy",
    "melody_cosine",
    "onset_precision",
    "onset_recall",
    "onset_f1",
    "chord_iou",
)


@dataclass
class EvalPair:
    gen_id: str
    reference: Clip
    waveform: Waveform


def _guarded(name: str, gen_id: str, compute: Callable[[], float]) -> float | None:
    try:
        return compute()
    except UndefinedMetricError as err:
        logger.warning(f"{gen_id}: {name} undefined ({err})")
        return None


def reference_chords(clip: Clip, reference: ChordReference, cfg: RunConfig) -> np.ndarray:
    if reference is ChordReference.ANNOTATION:
        n_frames = chroma(clip.mix).n_frames
        return resample_features(np.asarray(clip.annotations.chords), n_frames, InterpMode.NEAREST)
    return chord_labels(chroma(clip.mix), cfg.chord_threshold, cfg.chord_median)


def score_pair(pair: EvalPair, cfg: RunConfig) -> dict[str, Any]:
    ref, gen = pair.reference, np.asarray(pair.waveform, dtype=np.float64)
    notes = np.asarray(ref.annotations.melody)
    onsets = onset_f1(detect_onsets(ref.mix), detect_onsets(gen))
    gen_chords = chord_labels(chroma(gen), cfg.chord_threshold, cfg.chord_median)
    ref_chords = reference_chords(ref, ChordReference(cfg.eval_chord_reference), cfg)

    return {
        "id": pair.gen_id,
        "reference": ref.id,
        "chroma_cosine": _guarded("chroma_cosine", pair.gen_id, lambda: chroma_cosine(ref.mix, gen)),
        "melody_accuracy": _guarded(
            "melody_accuracy", pair.gen_id, lambda: melody_accuracy(notes, gen, cfg.melody_threshold)
        ),
        "melody_cosine": _guarded(
            "melody_cosine",
            pair.gen_id,
            lambda: melody_cosine(notes_to_matrix(notes), melody_matrix(gen, cfg.melody_threshold)),
        ),
        "onset_precision": onsets.precision,
        "onset_recall": onsets.recall,
        "onset_f1": onsets.f1,
        "chord_iou": chord_iou(ref_chords, gen_chords),
    }


def aggregate(rows: Sequence[dict[str, Any]]) -> dict[str, dict[str, float | int | None]]:
    """Mean and std of every metric over the clips where it is defined."""
    out: dict[str, dict[str, float | int | None]] = {}
    for name in METRICS:
        values = np.array([row[name] for row in rows if row.get(name) is not None], dtype=np.float64)
        out[name] = {
            "mean": float(values.mean()) if values.size else None,
            "std": float(values.std()) if values.size else None,
            "n": int(values.size),
        }
    return out


def evaluate(pairs: Sequence[EvalPair], cfg: RunConfig) -> dict[str, Any]:
    """
    Score generated clips against their references.

    Returns a JSON-ready report with per-clip metrics, corpus aggregates and the
    Fréchet distance between the reference and generated embedding sets.
    """
    if not pairs:
        raise UndefinedMetricError("Nothing to evaluate: no generated clip names a reference")

    rows = [score_pair(pair, cfg) for pair in pairs]
    references = {pair.reference.id: pair.reference for pair in pairs}
    ref_stats = GaussianStats.fit([clip_embedding(clip.mix) for clip in references.values()])
    gen_stats = GaussianStats.fit([clip_embedding(pair.waveform) for pair in pairs])
    distance = frechet_distance(ref_stats, gen_stats)

    report = {
        "n": len(rows),
        "clips": rows,
        "aggregates": aggregate(rows),
        "frechet_distance": distance,
        "eval_chord_reference": cfg.eval_chord_reference,
    }
    summary = ", ".join(
        f"{name}={stats['mean']:.3f}" for name, stats in report["aggregates"].items() if stats["mean"] is not None
    )
    logger.info(f"Evaluated {len(rows)} clips: {summary}, frechet={distance:.4f}")
    return report
