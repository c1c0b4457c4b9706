from __future__ import annotations

import numpy as np
import pytest

from musicflow.audio.chords import chord_label, chord_name, chord_pitch_classes, parse_chord
from musicflow.audio.corpus import MANIFEST, build_corpus
from musicflow.audio.features import chord_labels, chroma, detect_onsets
from musicflow.audio.synth import ClipSpec, generate_clip, sample_clip_spec
from musicflow.evaluation.metrics import onset_f1
from musicflow.utils.settings import N_CHORDS, NO_CHORD, REST, SAMPLE_RATE, ChordQuality
from musicflow.utils.support import file_digest, read_jsonl


def test_chord_vocabulary():
    assert chord_name(NO_CHORD) == "N"
    assert chord_name(1) == "C:maj"
    assert chord_name(chord_label(9, ChordQuality.MINOR)) == "A:min"
    assert chord_pitch_classes(parse_chord("C:maj")) == (0, 4, 7)
    assert {parse_chord(chord_name(label)) for label in range(N_CHORDS)} == set(range(N_CHORDS))
    with pytest.raises(ValueError):
        parse_chord("H:maj")


def test_empty_spec_renders_silence():
    mix, stems, ann = generate_clip(ClipSpec(seed=0))
    assert mix.shape == (5 * SAMPLE_RATE,)
    assert not mix.any()
    assert set(ann.chords) == {NO_CHORD}
    assert set(ann.melody) == {REST}
    assert ann.drum_onsets == []


def test_single_note_spectral_peak():
    spec = ClipSpec(seed=0, tempo=60.0, melody=((60, 0.0, 4.0),))
    mix, _, _ = generate_clip(spec)
    spectrum = np.abs(np.fft.rfft(mix))
    freqs = np.fft.rfftfreq(mix.size, 1 / SAMPLE_RATE)
    assert abs(freqs[spectrum.argmax()] - 261.63) <= freqs[1]


def test_stems_add_up_and_stay_in_range():
    mix, stems, _ = generate_clip(sample_clip_spec(11))
    assert np.max(np.abs(mix - (stems.harmony + stems.melody + stems.drums))) == 0.0
    assert np.max(np.abs(mix)) <= 1.0
    assert np.array_equal(stems.without_drums(), stems.harmony + stems.melody)


def test_rendering_is_deterministic():
    spec = sample_clip_spec(5)
    assert sample_clip_spec(5) == spec
    first, second = generate_clip(spec), generate_clip(spec)
    assert np.array_equal(first[0], second[0])
    assert np.array_equal(first[1].drums, second[1].drums)


def test_annotations_follow_the_progression():
    spec = ClipSpec(seed=0, tempo=120.0, progression=((1, 4.0), (13, 4.0)), melody=((67, 2.0, 2.0),))
    _, _, ann = generate_clip(spec)
    assert ann.n_frames == 125
    assert ann.chords[:50] == [1] * 50
    assert ann.chords[50:100] == [13] * 50
    assert ann.chords[100:] == [NO_CHORD] * 25
    assert ann.melody[25:50] == [67] * 25
    assert ann.melody[:25] == [REST] * 25


@pytest.mark.parametrize(
    "kwargs",
    [
        {"melody": ((30, 0.0, 1.0),)},
        {"melody": ((60, 20.0, 1.0),)},
        {"tempo": 0.0},
        {"style_tag": 8},
        {"progression": ((25, 2.0),)},
        {"drum_pattern": ((1.0, 0.0),)},
    ],
)
def test_invalid_specs_are_rejected(kwargs):
    with pytest.raises(ValueError):
        ClipSpec(seed=0, **kwargs)


def test_harmony_stem_recovers_its_chords():
    spec = ClipSpec(seed=0, tempo=120.0, progression=((1, 4.0), (18, 4.0), (10, 2.0)), style_tag=0)
    _, stems, ann = generate_clip(spec)
    estimated = chord_labels(chroma(stems.harmony))
    reference = np.asarray(ann.chords)
    interior = np.ones(reference.size, dtype=bool)
    for boundary in np.flatnonzero(np.diff(reference)) + 1:
        interior[max(0, boundary - 3) : boundary + 3] = False
    assert np.mean(estimated[interior] == reference[interior]) >= 0.9


def test_drum_stem_onsets_match_annotations():
    spec = sample_clip_spec(2)
    _, stems, ann = generate_clip(spec)
    assert onset_f1(ann.drum_onsets, detect_onsets(stems.drums), tol=0.05).f1 >= 0.95


def test_build_corpus_single_clip(tmp_path):
    manifest = build_corpus(1, seed=0, out_dir=tmp_path)
    (record,) = list(read_jsonl(tmp_path / MANIFEST))
    assert set(record) >= {"id", "mix_path", "stem_paths", "annotation_path", "style_tag", "seed"}
    wavs = [record["mix_path"], *record["stem_paths"].values()]
    assert len(wavs) == 4 and all((tmp_path / path).exists() for path in wavs)

    clip = manifest.load_clip(record)
    assert clip.annotations.style_tag == record["style_tag"]
    assert clip.mix.size == 5 * SAMPLE_RATE


def test_corpus_is_reproducible(tmp_path):
    first = build_corpus(3, seed=4, out_dir=tmp_path / "a")
    second = build_corpus(3, seed=4, out_dir=tmp_path / "b")
    assert first.digest == second.digest == file_digest(tmp_path / "a" / MANIFEST)


def test_corpus_rejects_empty():
    with pytest.raises(ValueError):
        build_corpus(0, seed=0, out_dir=None)


def test_sampled_specs_cover_the_triads():
    labels = set()
    for seed in range(300):
        labels.update(label for label, _ in sample_clip_spec(seed).progression)
    assert labels >= set(range(1, N_CHORDS))
