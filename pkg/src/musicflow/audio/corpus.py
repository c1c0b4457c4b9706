from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from musicflow.audio.synth import Annotations, ClipSpec, Stems, generate_clip, sample_clip_spec
from musicflow.utils.errors import ArtifactWriteError
from musicflow.utils.support import file_digest, read_json, read_jsonl, read_wav, resolve, write_json, write_jsonl, write_wav

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
STEM_NAMES = ("harmony", "melody", "drums")
HOLDOUT_FRACTION = 0.1


def clip_seeds(n: int, seed: int) -> list[int]:
    """Per-clip seeds derived from the corpus seed; clip i always gets the same seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def _write_clip(args: tuple[int, int, str]) -> dict[str, Any]:
    index, clip_seed, root = args
    base = Path(root)
    clip_id = f"clip_{index:05d}"
    spec = sample_clip_spec(clip_seed)
    mix, stems, ann = generate_clip(spec)

    mix_path = f"wav/{clip_id}_mix.wav"
    stem_paths = {name: f"wav/{clip_id}_{name}.wav" for name in STEM_NAMES}
    annotation_path = f"annotations/{clip_id}.json"

    write_wav(resolve(base, mix_path), mix)
    for name in STEM_NAMES:
        write_wav(resolve(base, stem_paths[name]), getattr(stems, name))
    write_json(resolve(base, annotation_path), {**ann.to_dict(), "spec": spec.to_dict()})

    return {
        "id": clip_id,
        "mix_path": mix_path,
        "stem_paths": stem_paths,
        "annotation_path": annotation_path,
        "style_tag": spec.style_tag,
        "seed": clip_seed,
        "spec": spec.to_dict(),
    }


def build_corpus(n: int, seed: int, out_dir: Path, workers: int = 1) -> Manifest:
    """
    Render `n` clips under `out_dir` and write the manifest.

    Args:
        n: Number of clips.
        seed: Corpus seed; clip seeds come from `clip_seeds`.
        out_dir: Destination directory (created).
        workers: Worker processes; output is identical for any value.
    """
    if n <= 0:
        raise ValueError(f"Corpus size must be positive, got {n}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [(i, s, str(out_dir)) for i, s in enumerate(clip_seeds(n, seed))]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                records = list(tqdm(pool.map(_write_clip, jobs, chunksize=8), total=n, desc="synth"))
        else:
            records = [_write_clip(job) for job in tqdm(jobs, desc="synth")]
        write_jsonl(out_dir / MANIFEST, records)
    except OSError as err:
        raise ArtifactWriteError(f"Cannot write corpus to {out_dir}: {err}") from err

    manifest = Manifest(out_dir, records)
    logger.info(f"Wrote {n} clips to {out_dir} (manifest digest {manifest.digest[:12]})")
    return manifest


@dataclass
class Clip:
    record: dict[str, Any]
    mix: np.ndarray
    stems: Stems
    annotations: Annotations

    @property
    def id(self) -> str:
        return self.record["id"]

    @property
    def spec(self) -> ClipSpec:
        return ClipSpec.from_dict(self.record["spec"])


class Manifest:
    def __init__(self, root: Path, records: list[dict[str, Any]]) -> None:
        self.root = root
        self.records = records

    @classmethod
    def load(cls, root: Path) -> Manifest:
        return cls(root, list(read_jsonl(root / MANIFEST)))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST

    @property
    def digest(self) -> str:
        return file_digest(self.path)

    def split(self) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
        """Train records and the held-out tail (last 10%, at least one clip when n > 1)."""
        n_hold = max(1, round(HOLDOUT_FRACTION * len(self))) if len(self) > 1 else 0
        return self.records[: len(self) - n_hold], self.records[len(self) - n_hold :]

    def load_clip(self, record: dict[str, Any]) -> Clip:
        stems = Stems(*(read_wav(self.root / record["stem_paths"][name]) for name in STEM_NAMES))
        annotations = Annotations.from_dict(read_json(self.root / record["annotation_path"], "annotation"))
        return Clip(record, read_wav(self.root / record["mix_path"]), stems, annotations)

    def clips(self, records: list[dict[str, Any]] | None = None) -> list[Clip]:
        return [self.load_clip(r) for r in (self.records if records is None else records)]
