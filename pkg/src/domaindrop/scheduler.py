"""Per-iteration choice of the layer that receives DomainDrop."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class LayerSchedule:
    candidates: tuple[int, ...]
    p_active: float = 0.8

    def __post_init__(self):
        if not self.candidates:
            raise ConfigError("candidate layer set is empty")
        if not 0 <= self.p_active <= 1:
            raise ConfigError(f"p_active must lie in [0, 1], got {self.p_active}")

    def validate(self, n_layers: int) -> "LayerSchedule":
        bad = [c for c in self.candidates if not 0 <= c < n_layers]
        if bad:
            raise ConfigError(f"candidate layers {bad} outside 0..{n_layers - 1}")
        return self


def select_layer(schedule: LayerSchedule, rng: np.random.Generator) -> int:
    return schedule.candidates[int(rng.integers(len(schedule.candidates)))]


def gate_active(p_active: float, rng: np.random.Generator) -> bool:
    return bool(rng.random() < p_active)
