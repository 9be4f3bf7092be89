"""Per-layer windowed sensitivity and adaptive step sizing.

Sensitivity is the mean of the most recent accuracy drops attributed to a
layer (a fixed-size sliding window; partially filled windows divide by the
number of recorded drops). The per-layer step adapts multiplicatively:
``step += gain * step * (threshold - sensitivity)``, clamped to bounds, so
layers whose pruning barely hurts get larger steps and vice versa.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import ContractViolationError

DEFAULT_WINDOW = 5
DEFAULT_GAIN = 1.0
DEFAULT_STEP = 0.05
DEFAULT_STEP_MIN = 0.005
DEFAULT_STEP_MAX = 0.25


@dataclass
class SensitivityState:
    layer_name: str
    window_size: int = DEFAULT_WINDOW
    step: float = DEFAULT_STEP
    gain: float = DEFAULT_GAIN
    step_min: float = DEFAULT_STEP_MIN
    step_max: float = DEFAULT_STEP_MAX
    window: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ContractViolationError("window size must be >= 1")
        self.window = deque(self.window, maxlen=self.window_size)

    @property
    def sensitivity(self) -> float:
        """Mean accuracy drop over the retained window; 0 before any impact."""
        if not self.window:
            return 0.0
        return sum(self.window) / len(self.window)

    def record_impact(self, baseline_acc: float, pruned_acc: float) -> None:
        """Push the latest accuracy drop, evicting the oldest when full."""
        drop = float(baseline_acc) - float(pruned_acc)
        if drop != drop or drop in (float("inf"), float("-inf")):
            raise ContractViolationError("non-finite accuracy drop")
        self.window.append(drop)

    def update_step(self, threshold: float) -> float:
        """Adapt the step toward the drop budget and return the new value."""
        if threshold <= 0:
            raise ContractViolationError(f"threshold must be positive, got {threshold}")
        raw = self.step + self.gain * self.step * (threshold - self.sensitivity)
        self.step = min(self.step_max, max(self.step_min, raw))
        return self.step

    def to_dict(self) -> dict:
        return {
            "layer_name": self.layer_name,
            "window_size": self.window_size,
            "step": self.step,
            "gain": self.gain,
            "step_min": self.step_min,
            "step_max": self.step_max,
            "window": list(self.window),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SensitivityState":
        return cls(**data)
