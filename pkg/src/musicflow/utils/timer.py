from __future__ import annotations

from collections.abc import Callable


class StepTimer:
    """Fires `func` every `every` steps; the training loop's clock."""

    def __init__(
        self,
        every: int,
        func: Callable[[int], None] | None = None,
        repeat: bool = True,
    ) -> None:
        if every <= 0:
            raise ValueError(f"Timer period must be positive, got {every}")

        self.every = every
        self.func = func
        self.start_step = 0
        self.active = False
        self.repeat = repeat

    def activate(self, step: int = 0) -> None:
        self.active = True
        self.start_step = step

    def deactivate(self, step: int) -> None:
        self.active = False
        if self.repeat:
            self.activate(step)

    def update(self, step: int) -> bool:
        """Advance to `step`; returns True when the timer fired."""
        if not self.active:
            return False
        if step - self.start_step >= self.every:
            if self.func:
                self.func(step)
            self.deactivate(step)
            return True
        return False
