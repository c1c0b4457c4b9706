from __future__ import annotations

import numpy as np

from musicflow.utils.settings import N_CHORDS, NO_CHORD, PITCH_CLASSES, ChordQuality

_INTERVALS = {ChordQuality.MAJOR: (0, 4, 7), ChordQuality.MINOR: (0, 3, 7)}
_SUFFIX = {ChordQuality.MAJOR: "maj", ChordQuality.MINOR: "min"}


def chord_label(root: int, quality: ChordQuality) -> int:
    return 1 + int(quality) * 12 + root % 12


def chord_root_quality(label: int) -> tuple[int, ChordQuality]:
    if not 1 <= label < N_CHORDS:
        raise ValueError(f"Label {label} is not a triad (no-chord is {NO_CHORD})")
    return (label - 1) % 12, ChordQuality((label - 1) // 12)


def chord_pitch_classes(label: int) -> tuple[int, ...]:
    root, quality = chord_root_quality(label)
    return tuple((root + step) % 12 for step in _INTERVALS[quality])


def chord_intervals(label: int) -> tuple[int, ...]:
    return _INTERVALS[chord_root_quality(label)[1]]


def chord_name(label: int) -> str:
    if label == NO_CHORD:
        return "N"
    root, quality = chord_root_quality(label)
    return f"{PITCH_CLASSES[root]}:{_SUFFIX[quality]}"


def parse_chord(name: str) -> int:
    """Inverse of `chord_name` ("N", "C:maj", "F#:min")."""
    if name == "N":
        return NO_CHORD
    root_name, _, suffix = name.partition(":")
    if root_name not in PITCH_CLASSES or suffix not in _SUFFIX.values():
        raise ValueError(f"Unrecognized chord name '{name}'")
    quality = next(q for q, s in _SUFFIX.items() if s == suffix)
    return chord_label(PITCH_CLASSES.index(root_name), quality)


def chord_templates() -> np.ndarray:
    """(24, 12) binary triad templates; row i is label i + 1."""
    templates = np.zeros((N_CHORDS - 1, 12))
    for label in range(1, N_CHORDS):
        templates[label - 1, list(chord_pitch_classes(label))] = 1.0
    return templates
