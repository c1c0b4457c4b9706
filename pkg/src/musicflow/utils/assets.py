from __future__ import annotations

import logging
from pathlib import Path

from musicflow.audio.codec import ToyCodec
from musicflow.audio.corpus import MANIFEST, Manifest
from musicflow.model.vector_field import VectorField
from musicflow.utils.support import file_digest, require
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.config import RunConfig

logger = logging.getLogger(__name__)

MODEL_FILE = "model.bin"


class ArtifactStore:
    """Lazily loads the artifacts a stage needs, naming the missing prerequisite when absent."""

    def __init__(self, cfg: RunConfig) -> None:
        self.cfg = cfg
        self.corpus_dir = Path(cfg.corpus_dir)
        self.codec_path = Path(cfg.codec_path)
        self.run_dir = Path(cfg.run_dir)
        self.out_dir = Path(cfg.out_dir)

        self._manifest: Manifest | None = None
        self._codec: ToyCodec | None = None
        self._model: VectorField | None = None

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / MODEL_FILE

    def manifest(self) -> Manifest:
        if self._manifest is None:
            require(self.corpus_dir / MANIFEST, "corpus manifest (run `musicflow synth`)")
            self._manifest = Manifest.load(self.corpus_dir)
            logger.debug(f"Loaded manifest with {len(self._manifest)} clips from {self.corpus_dir}")
        return self._manifest

    def codec(self) -> ToyCodec:
        if self._codec is None:
            require(self.codec_path, "codec (run `musicflow fit-codec`)")
            self._codec = ToyCodec.load(self.codec_path)
        return self._codec

    def model(self, path: Path | None = None) -> VectorField:
        if self._model is None or path is not None:
            checkpoint = require(path or self.checkpoint_path, "model checkpoint (run `musicflow train`)")
            self._model = VectorField.load(checkpoint)
            logger.debug(f"Loaded {checkpoint} ({self._model.params.count()} parameters)")
        return self._model

    def digests(self) -> dict[str, str]:
        """Digests of the upstream artifacts that exist, for provenance records."""
        candidates = {
            "manifest": self.corpus_dir / MANIFEST,
            "codec": self.codec_path,
            "checkpoint": self.checkpoint_path,
        }
        return {name: file_digest(path) for name, path in candidates.items() if path.exists()}
