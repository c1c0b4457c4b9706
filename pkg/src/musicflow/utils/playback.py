from __future__ import annotations

import logging
import time
from pathlib import Path

from musicflow.utils.errors import ArtifactReadError, MusicflowError
from musicflow.utils.support import require

logger = logging.getLogger(__name__)


def play_wav(path: Path, volume: float = 0.5) -> float:
    """
    Play a WAV file through pygame's mixer and block until it ends.

    Args:
        path: The audio file.
        volume: Playback volume in [0, 1].

    Returns:
        The clip length in seconds.
    """
    require(path, "audio file")
    if not 0.0 <= volume <= 1.0:
        raise ValueError(f"Volume must lie in [0, 1], got {volume}")
    try:
        import pygame
    except ImportError as err:
        raise MusicflowError("Playback needs the `preview` extra (pygame-ce)") from err

    pygame.mixer.init()
    try:
        try:
            sound = pygame.mixer.Sound(str(path))
        except pygame.error as err:
            raise ArtifactReadError(f"Cannot play {path}: {err}") from err
        sound.set_volume(volume)
        length = sound.get_length()
        logger.info(f"Playing {path} ({length:.2f} s)")
        sound.play()
        time.sleep(length)
    finally:
        pygame.mixer.quit()
    return length
