from __future__ import annotations

import json
import sys

import numpy as np
import pytest

from musicflow.audio.codec import ToyCodec
from musicflow.main import Harness, main
from musicflow.model.conditioning import ControlExtractor, DropoutPolicy
from musicflow.pipeline.experiments import ABLATION_ARMS, cmd_ablate, compare_to_baseline
from musicflow.pipeline.stages import (
    REPORT,
    ConditionSources,
    RunRecord,
    cmd_evaluate,
    cmd_fit_codec,
    cmd_generate,
    cmd_synth,
    cmd_train,
    features_from_sources,
)
from musicflow.utils.config import RunConfig
from musicflow.utils.errors import (
    ArtifactReadError,
    ArtifactWriteError,
    ConfigError,
    MusicflowError,
    ReproducibilityGuardError,
    ShapeError,
)
from musicflow.utils.playback import play_wav
from musicflow.utils.settings import N_FRAMES, AblationAxis, Command, Control
from musicflow.utils.support import read_json, read_wav, write_json, write_wav


# Configuration
def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nseed = 7\nsteps=12  # short\n\naudio_without_drums = yes\nconditioning = cross_attention\n")
    cfg = RunConfig.from_file(path, steps=None, lr=3e-4)
    assert (cfg.seed, cfg.steps, cfg.lr) == (7, 12, 3e-4)
    assert cfg.audio_without_drums is True
    assert cfg.conditioning == "cross_attention"


@pytest.mark.parametrize("text", ["sead = 1\n", "steps = many\n", "controls = chords,bogus\n", "seed 1\n"])
def test_bad_config_files(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "absent.cfg")


def test_config_digest_tracks_values(tmp_path):
    cfg = RunConfig()
    assert cfg.digest() == RunConfig().digest()
    assert cfg.digest() != cfg.replace(seed=1).digest()
    assert RunConfig.from_file(cfg.save(tmp_path / "saved.cfg")) == cfg


def test_control_set_order():
    assert RunConfig(controls="melody, chords").control_set == (Control.MELODY, Control.CHORDS)
    assert RunConfig(controls="").control_set == ()


# Command line
def test_harness_applies_overrides():
    harness = Harness(["generate", "--alpha", "0.5", "0", "1.5", "--seed", "3", "--out", "somewhere"])
    assert (harness.cfg.alpha_text, harness.cfg.alpha_local, harness.cfg.alpha_both) == (0.5, 0.0, 1.5)
    assert harness.cfg.seed == 3
    assert harness.cfg.out_dir == "somewhere"
    assert Harness(["train", "--out", "elsewhere", "--steps", "5"]).cfg.run_dir == "elsewhere"


def test_missing_corpus_is_reported(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["fit-codec"]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "MissingArtifactError"
    assert "synth" in error["message"]


def test_missing_input_file_is_reported(tmp_path, capsys):
    assert main(["preview", str(tmp_path / "absent.wav")]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "MissingArtifactError"
    assert "absent.wav" in error["message"]


def test_os_errors_are_reported(monkeypatch, capsys):
    def denied(path):
        raise PermissionError(f"{path}: permission denied")

    monkeypatch.setattr("musicflow.main.play_wav", denied)
    assert main(["preview", "locked.wav"]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "PermissionError"


# File I/O
def test_unreadable_files(tmp_path):
    (tmp_path / "noise.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(ArtifactReadError):
        read_wav(tmp_path / "noise.wav")
    (tmp_path / "broken.json").write_text("[1, 2")
    with pytest.raises(ArtifactReadError):
        read_json(tmp_path / "broken.json")
    with pytest.raises(ArtifactWriteError):
        write_json(tmp_path / "no_such_dir" / "out.json", [])
    with pytest.raises(ArtifactWriteError):
        write_wav(tmp_path / "no_such_dir" / "out.wav", np.zeros(8))


def test_playback_needs_the_extra(tmp_path, monkeypatch):
    path = write_wav(tmp_path / "beep.wav", np.zeros(800))
    monkeypatch.setitem(sys.modules, "pygame", None)
    with pytest.raises(MusicflowError):
        play_wav(path)
    with pytest.raises(ValueError):
        play_wav(path, volume=2.0)


def test_playback_reports_the_clip_length(tmp_path, monkeypatch):
    pygame = pytest.importorskip("pygame")
    monkeypatch.setenv("SDL_AUDIODRIVER", "dummy")
    try:
        pygame.mixer.init()
    except pygame.error:
        pytest.skip("no audio device")
    pygame.mixer.quit()
    monkeypatch.setattr("musicflow.utils.playback.time.sleep", lambda seconds: None)
    path = write_wav(tmp_path / "tone.wav", 0.1 * np.sin(np.linspace(0, 400 * np.pi, 4000)))
    assert play_wav(path) == pytest.approx(0.5, abs=0.05)


# Run records
def test_run_record_guard(tmp_path):
    cfg = RunConfig()
    RunRecord(tmp_path, Command.SYNTH, cfg, {"corpus_size": "4"}).commit({"clips": 4})
    assert (tmp_path / "synth.run.json").exists()
    with pytest.raises(ReproducibilityGuardError):
        RunRecord(tmp_path, Command.SYNTH, cfg, {"corpus_size": "4"}).check()
    RunRecord(tmp_path, Command.SYNTH, cfg, {"corpus_size": "4"}).check(force=True)
    RunRecord(tmp_path, Command.SYNTH, cfg.replace(seed=1), {"corpus_size": "4"}).check()
    RunRecord(tmp_path, Command.SYNTH, cfg, {"corpus_size": "5"}).check()


# Explicit conditions
def test_sources_must_match_the_frame_grid(codec, tmp_path):
    extractor = ControlExtractor(codec, RunConfig())
    chords = write_json(tmp_path / "chords.json", ["C:maj"] * 100)
    with pytest.raises(ShapeError):
        features_from_sources(ConditionSources(chords=chords), extractor, codec, np.random.default_rng(0))


def test_sources_build_controls(codec, tmp_path):
    extractor = ControlExtractor(codec, RunConfig(controls="chords,melody"))
    chords = write_json(tmp_path / "chords.json", ["A:min"] * 60 + [1] * 65)
    melody = write_json(tmp_path / "melody.json", [-1] * 25 + [64] * 100)
    sources = ConditionSources(chords=chords, melody=melody, style=2)
    features = features_from_sources(sources, extractor, codec, np.random.default_rng(0))
    assert features.present == frozenset({Control.CHORDS, Control.MELODY})
    assert features.chords[0] == 22 and features.chords[-1] == 1
    assert features.melody[:25].sum() == 0 and features.melody[25:].sum() == 100
    assert features.style == 2 and features.style_present
    assert set(sources.provenance) == {"chords", "melody"}


def test_unknown_style_is_rejected(codec):
    with pytest.raises(ValueError):
        features_from_sources(ConditionSources(style=9), ControlExtractor(codec, RunConfig()), codec, np.random.default_rng(0))


# Whole pipeline
def test_pipeline_end_to_end(tiny_config, tmp_path):
    cfg = tiny_config.replace(corpus_dir=str(tmp_path / "corpus"), corpus_size=4)

    manifest = cmd_synth(cfg)
    assert len(manifest) == 4
    with pytest.raises(ReproducibilityGuardError):
        cmd_synth(cfg)

    codec = cmd_fit_codec(cfg)
    assert isinstance(ToyCodec.load(tmp_path / "codec.bin"), ToyCodec)
    assert codec.require_codebooks().size == 8

    result = cmd_train(cfg)
    assert len(result.losses) == 3
    assert (tmp_path / "train" / "model.bin").exists()
    assert RunConfig.from_file(tmp_path / "train" / "config.txt") == cfg

    written = cmd_generate(cfg)
    assert [p.name for p in written] == ["gen_0000.wav"]
    meta = read_json(tmp_path / "generate" / "gen_0000.json")
    _, holdout = manifest.split()
    assert meta["reference"] == holdout[0]["id"]
    assert meta["nfev"] == 13
    assert (meta["alpha_text"], meta["alpha_local"], meta["alpha_both"]) == (0.5, 0.0, 1.5)

    report = cmd_evaluate(cfg)
    assert report["n"] == 1
    assert report["manifest_digest"] == manifest.digest
    assert report["frechet_distance"] >= 0.0
    assert read_json(tmp_path / "generate" / REPORT)["config_digest"] == cfg.digest()
    with pytest.raises(ReproducibilityGuardError):
        cmd_evaluate(cfg)
    assert cmd_evaluate(cfg, force=True)["n"] == 1

    explicit = cfg.replace(out_dir=str(tmp_path / "explicit"))
    chords = write_json(tmp_path / "chords.json", ["G:maj"] * N_FRAMES)
    paths = cmd_generate(explicit, ConditionSources(chords=chords, style=3, n=2), self_eval=True)
    assert len(paths) == 2
    meta = read_json(tmp_path / "explicit" / "gen_0001.json")
    assert meta["reference"] is None and meta["style"] == 3
    assert meta["provenance"] == {"chords": str(chords)}
    assert 0.0 <= meta["self_eval"]["chord_iou"] <= 1.0


def test_loss_weighting_ablation(tiny_config, codec, tmp_path):
    codec.save(tmp_path / "codec.bin")
    comparison = cmd_ablate(tiny_config, "loss_weighting")
    base = tmp_path / "train" / "ablate_loss_weighting"
    assert set(comparison["arms"]) == {"uniform", "one_plus_t"}
    assert (base / "uniform" / "model.bin").exists() and (base / "one_plus_t" / "model.bin").exists()
    assert read_json(base / "comparison.json")["axis"] == "loss_weighting"
    digests = {arm["manifest_digest"] for arm in comparison["arms"].values()}
    assert len(digests) == 1
    assert set(comparison["versus_baseline"]) == {"one_plus_t"}


def test_control_ablation_isolates_each_condition():
    arms = ABLATION_ARMS[AblationAxis.CONTROLS]
    assert arms["unconditional"] == {"controls": ""}
    single = {name: RunConfig(**changes) for name, changes in arms.items() if name != "unconditional"}
    assert {name: cfg.control_set for name, cfg in single.items()} == {
        "chords": (Control.CHORDS,),
        "melody": (Control.MELODY,),
        "drums": (Control.DRUMS,),
        "audio": (Control.AUDIO,),
    }
    for cfg in single.values():
        policy = DropoutPolicy.for_controls(cfg.control_set, cfg)
        assert (policy.p_all, policy.p_each, policy.p_iop) == (0.4, 0.0, 0.0)


def test_arms_are_compared_to_the_first():
    arms = {
        "unconditional": {"metrics": {"chord_iou": 0.1, "melody_accuracy": None, "chroma_cosine": 0.5, "onset_f1": 0.2}},
        "chords": {"metrics": {"chord_iou": 0.4, "melody_accuracy": 0.3, "chroma_cosine": 0.5, "onset_f1": 0.1}},
    }
    deltas = compare_to_baseline(arms)
    assert list(deltas) == ["chords"]
    assert deltas["chords"]["chord_iou"] == pytest.approx(0.3)
    assert deltas["chords"]["melody_accuracy"] is None
    assert deltas["chords"]["onset_f1"] == pytest.approx(-0.1)
