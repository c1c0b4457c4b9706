from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

import numpy as np
import soundfile as sf

from musicflow.utils.errors import ArtifactReadError, ArtifactWriteError, MissingArtifactError
from musicflow.utils.settings import SAMPLE_RATE
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.typing import Waveform


def resolve(base: Path, *parts: str) -> Path:
    """
    Join path components under `base`, creating the parent directory.

    Args:
        base: Root directory of an artifact set.
        *parts: Path components below the root (e.g., "wav", "clip_0001_mix.wav").
    """
    path = base.joinpath(*parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(what, path)
    return path


def write_wav(path: Path, waveform: Waveform, sample_rate: int = SAMPLE_RATE) -> Path:
    """
    Write a mono waveform as 16-bit PCM.

    Args:
        path: Destination file.
        waveform: Samples in [-1, 1]; values outside are clipped by the PCM encoder.
        sample_rate: Sample rate in Hz.
    """
    try:
        sf.write(str(path), np.asarray(waveform, dtype=np.float64), sample_rate, subtype="PCM_16")
    except (OSError, RuntimeError) as err:
        raise ArtifactWriteError(f"Cannot write {path}: {err}") from err
    return path


def read_wav(path: Path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """
    Read a mono WAV file as float64 samples.

    Args:
        path: Source file.
        sample_rate: Expected sample rate; a mismatch is rejected.
    """
    require(path, "audio file")
    try:
        data, sr = sf.read(str(path), dtype="float64", always_2d=False)
    except (OSError, RuntimeError) as err:
        raise ArtifactReadError(f"Cannot read audio from {path}: {err}") from err
    if sr != sample_rate:
        raise ValueError(f"{path}: sample rate {sr} Hz, expected {sample_rate} Hz")
    if data.ndim > 1:
        data = data.mean(axis=1)
    return data


def write_json(path: Path, payload: Any) -> Path:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise ArtifactWriteError(f"Cannot write {path}: {err}") from err
    return path


def read_json(path: Path, what: str = "JSON file") -> Any:
    text = require(path, what).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise ArtifactReadError(f"{path} is not a valid {what}: {err}") from err


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> Path:
    with path.open("w") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_jsonl(path: Path, what: str = "manifest") -> Iterator[dict[str, Any]]:
    with require(path, what).open() as handle:
        for line in handle:
            if line.strip():
                yield json.loads(line)


def file_digest(path: Path) -> str:
    return hashlib.sha256(require(path, "file").read_bytes()).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
