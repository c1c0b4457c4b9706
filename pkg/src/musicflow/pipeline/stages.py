"""
Pipeline stages: synth -> fit-codec -> train -> generate -> evaluate.

Each stage writes `<stage>.run.json` next to its outputs, recording the config digest,
the seed and the digests of its inputs. Rerunning a stage whose record matches is
refused unless forced.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from musicflow.audio.chords import parse_chord
from musicflow.audio.codec import ToyCodec, residual_energies
from musicflow.audio.corpus import Manifest, build_corpus
from musicflow.audio.features import chord_labels, chroma, melody_notes
from musicflow.evaluation.metrics import chord_iou, melody_accuracy
from musicflow.evaluation.report import EvalPair, evaluate
from musicflow.model.conditioning import ControlExtractor, ControlFeatures
from musicflow.model.infer import Generation, GuidanceWeights, SolverConfig, generate
from musicflow.model.train import TrainResult, train_loop
from musicflow.model.vector_field import ModelConfig, VectorField
from musicflow.utils.assets import ArtifactStore
from musicflow.utils.errors import ReproducibilityGuardError, ShapeError
from musicflow.utils.settings import N_FRAMES, N_STYLES, Command, Control
from musicflow.utils.support import file_digest, read_json, read_wav, text_digest, write_json, write_wav
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.config import RunConfig

logger = logging.getLogger(__name__)

REPORT = "report.json"


class RunRecord:
    """Provenance record of one stage run, doubling as the rerun guard."""

    def __init__(self, out_dir: Path, stage: Command, cfg: RunConfig, inputs: dict[str, str] | None = None) -> None:
        self.path = out_dir / f"{stage.value}.run.json"
        self.payload: dict[str, Any] = {
            "stage": stage.value,
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "inputs": dict(sorted((inputs or {}).items())),
        }
        self.digest = text_digest(json.dumps(self.payload, sort_keys=True))

    def check(self, force: bool = False) -> None:
        if not self.path.exists():
            return
        previous = read_json(self.path, "run record")
        if previous.get("digest") != self.digest:
            return
        if force:
            logger.warning(f"{self.payload['stage']}: rerunning with an identical config digest (--force)")
            return
        logger.warning(f"{self.payload['stage']}: {self.path} already records this exact run")
        raise ReproducibilityGuardError(
            f"{self.payload['stage']} already ran with config digest {self.payload['config_digest'][:12]}; "
            "pass --force to rerun"
        )

    def commit(self, outputs: dict[str, Any] | None = None) -> Path:
        return write_json(self.path, {**self.payload, "digest": self.digest, "outputs": outputs or {}})


# Corpus and codec
def cmd_synth(cfg: RunConfig, force: bool = False) -> Manifest:
    out_dir = Path(cfg.corpus_dir)
    record = RunRecord(out_dir, Command.SYNTH, cfg, {"corpus_size": str(cfg.corpus_size)})
    record.check(force)
    manifest = build_corpus(cfg.corpus_size, cfg.seed, out_dir, cfg.workers)
    record.commit({"manifest": manifest.digest, "clips": len(manifest)})
    return manifest


def cmd_fit_codec(cfg: RunConfig, force: bool = False) -> ToyCodec:
    store = ArtifactStore(cfg)
    manifest = store.manifest()
    record = RunRecord(store.codec_path.parent, Command.FIT_CODEC, cfg, {"manifest": manifest.digest})
    record.check(force)

    train, holdout = manifest.split()
    codec = ToyCodec.create(cfg.n_enc, cfg.mel_bands, cfg.seed)
    train_clips = manifest.clips(train)
    codec.fit_standardization([clip.mix for clip in train_clips])
    latents = np.concatenate([codec.encode(clip.mix) for clip in train_clips])
    codec.fit_codebooks(latents, seed=cfg.seed, n_codebooks=cfg.rvq_codebooks, size=cfg.rvq_size, iters=cfg.kmeans_iters)

    energies: list[float] = []
    if holdout:
        held = np.concatenate([codec.encode(clip.mix) for clip in manifest.clips(holdout)])
        energies = residual_energies(held, codec.require_codebooks())
        logger.info(f"Held-out residual energy per stage: {', '.join(f'{e:.4f}' for e in energies)}")

    codec.save(store.codec_path)
    record.commit({"codec": file_digest(store.codec_path), "holdout_residual_energies": energies})
    logger.info(f"Codec written to {store.codec_path}")
    return codec


# Training
def cmd_train(cfg: RunConfig, force: bool = False) -> TrainResult:
    store = ArtifactStore(cfg)
    manifest, codec = store.manifest(), store.codec()
    record = RunRecord(store.run_dir, Command.TRAIN, cfg, {"manifest": manifest.digest, "codec": file_digest(store.codec_path)})
    record.check(force)

    model = VectorField(ModelConfig.from_run_config(cfg), seed=cfg.seed)
    cfg.save(store.run_dir / "config.txt")
    result = train_loop(manifest, model, codec, cfg, store.run_dir, seed=cfg.seed)
    record.commit(
        {
            "checkpoint": file_digest(store.checkpoint_path),
            "steps": len(result.losses),
            "skipped": result.skipped,
            "final_loss": result.losses[-1] if result.losses else None,
        }
    )
    return result


# Generation
@dataclass
class ConditionSources:
    """Explicit condition inputs for generation; symbolic files are JSON lists, audio files WAVs."""

    chords: Path | None = None
    melody: Path | None = None
    audio: Path | None = None
    drums: Path | None = None
    inpaint: Path | None = None
    style: int | None = None
    n: int = 1
    provenance: dict[str, str] = field(default_factory=dict)

    @property
    def explicit(self) -> bool:
        return any(getattr(self, c.value) is not None for c in Control) or self.style is not None


def _check_grid(name: str, length: int, n_frames: int) -> None:
    if length != n_frames:
        raise ShapeError(f"{name} condition has {length} frames, expected T={n_frames}", (length,), (n_frames,))


def _load_chords(path: Path) -> np.ndarray:
    values = read_json(path, "chord file")
    return np.array([parse_chord(v) if isinstance(v, str) else int(v) for v in values], dtype=np.int64)


def features_from_sources(
    sources: ConditionSources,
    extractor: ControlExtractor,
    codec: ToyCodec,
    rng: np.random.Generator,
    n_frames: int = N_FRAMES,
) -> ControlFeatures:
    """Build controls from explicit files; every stream must land on the T-frame grid."""
    features = ControlFeatures.empty(n_frames, codec.n_enc)
    if sources.style is not None:
        if not 0 <= sources.style < N_STYLES:
            raise ValueError(f"Style tag must lie in [0, {N_STYLES - 1}], got {sources.style}")
        features = features.with_style(sources.style)

    for control in Control:
        path = getattr(sources, control.value)
        if path is None:
            continue
        match control:
            case Control.CHORDS:
                labels = _load_chords(path)
                _check_grid("chords", labels.size, n_frames)
                values = extractor.chords_from_labels(labels, n_frames)
            case Control.MELODY:
                notes = np.asarray(read_json(path, "melody file"), dtype=np.int64)
                _check_grid("melody", notes.size, n_frames)
                values = extractor.melody_from_notes(notes, n_frames)
            case _:
                waveform = read_wav(path)
                _check_grid(control.value, codec.n_frames(waveform.size), n_frames)
                if control is Control.AUDIO:
                    values = extractor.audio_from_waveform(waveform, n_frames)
                elif control is Control.DRUMS:
                    values = extractor.drums_from_waveform(waveform, n_frames)
                else:
                    values = extractor.inpaint(codec.encode(waveform), rng)
        if control not in extractor.controls:
            logger.warning(f"Model was not trained with the {control.value} control; ignoring {path}")
            continue
        features = features.with_control(control, values)
        sources.provenance[control.value] = str(path)
    return features


def _self_eval(gen: Generation, features: ControlFeatures, cfg: RunConfig) -> dict[str, float]:
    scores: dict[str, float] = {}
    if Control.CHORDS in features.present:
        extracted = chord_labels(chroma(gen.waveform), cfg.chord_threshold, cfg.chord_median)
        scores["chord_iou"] = chord_iou(features.chords, extracted)
    if Control.MELODY in features.present and features.melody.any():
        scores["melody_accuracy"] = melody_accuracy(melody_notes(features.melody), gen.waveform, cfg.melody_threshold)
    return scores


def cmd_generate(
    cfg: RunConfig,
    sources: ConditionSources | None = None,
    self_eval: bool = False,
    force: bool = False,
) -> list[Path]:
    """
    Generate clips into `out_dir`.

    With explicit sources, `sources.n` samples follow them. Otherwise the held-out
    clips drive generation: `n_generate` samples, each conditioned on one reference
    (cycled) and recording it for `evaluate`.
    """
    sources = sources or ConditionSources()
    store = ArtifactStore(cfg)
    codec, model = store.codec(), store.model()
    out_dir = store.out_dir
    inputs = {**store.digests(), "sources": json.dumps({k: str(v) for k, v in vars(sources).items()}, sort_keys=True)}
    record = RunRecord(out_dir, Command.GENERATE, cfg, inputs)
    record.check(force)

    extractor = ControlExtractor(codec, cfg)
    weights = GuidanceWeights.from_run_config(cfg)
    solver = SolverConfig.from_run_config(cfg)

    jobs: list[tuple[ControlFeatures, str | None, dict[str, str]]] = []
    if sources.explicit:
        rng = np.random.default_rng(cfg.seed)
        features = features_from_sources(sources, extractor, codec, rng)
        jobs = [(features, None, dict(sources.provenance))] * sources.n
    else:
        manifest = store.manifest()
        _, holdout = manifest.split()
        references = holdout or manifest.records
        for i in range(cfg.n_generate):
            clip = manifest.load_clip(references[i % len(references)])
            z = codec.encode(clip.mix)
            features = extractor.from_clip(clip, z, rng=np.random.default_rng([cfg.seed, i]))
            provenance = {c.value: f"{clip.id}" for c in features.present}
            jobs.append((features, clip.id, provenance))

    written: list[Path] = []
    for i, (features, reference, provenance) in enumerate(tqdm(jobs, desc="generate")):
        seed = cfg.seed + i
        gen = generate(model, codec, features, seed, weights, solver)[0]
        gen_id = f"gen_{i:04d}"
        wav_path = write_wav(out_dir / f"{gen_id}.wav", np.clip(gen.waveform, -1.0, 1.0))
        metadata: dict[str, Any] = {
            "id": gen_id,
            **gen.metadata(),
            "reference": reference,
            "style": features.style if features.style_present else None,
            "provenance": provenance,
            "config_digest": cfg.digest(),
        }
        if self_eval:
            metadata["self_eval"] = _self_eval(gen, features, cfg)
            logger.info(f"{gen_id}: self-eval {metadata['self_eval']}")
        write_json(out_dir / f"{gen_id}.json", metadata)
        written.append(wav_path)

    record.commit({"generated": len(written)})
    logger.info(f"Wrote {len(written)} clips to {out_dir}")
    return written


# Evaluation
def load_eval_pairs(manifest: Manifest, gen_dir: Path) -> list[EvalPair]:
    by_id = {record["id"]: record for record in manifest.records}
    pairs = []
    for meta_path in sorted(gen_dir.glob("gen_*.json")):
        meta = read_json(meta_path, "generation metadata")
        reference = meta.get("reference")
        if reference is None:
            continue
        if reference not in by_id:
            raise ValueError(f"{meta_path}: reference {reference} is not in the manifest")
        pairs.append(EvalPair(meta["id"], manifest.load_clip(by_id[reference]), read_wav(meta_path.with_suffix(".wav"))))
    return pairs


def cmd_evaluate(cfg: RunConfig, gen_dir: Path | None = None, force: bool = False) -> dict[str, Any]:
    store = ArtifactStore(cfg)
    manifest = store.manifest()
    gen_dir = gen_dir or store.out_dir
    record = RunRecord(gen_dir, Command.EVALUATE, cfg, {"manifest": manifest.digest, "gen_dir": str(gen_dir)})
    record.check(force)

    report = evaluate(load_eval_pairs(manifest, gen_dir), cfg)
    report["manifest_digest"] = manifest.digest
    report["config_digest"] = cfg.digest()
    write_json(gen_dir / REPORT, report)
    record.commit({"report": file_digest(gen_dir / REPORT)})
    return report
