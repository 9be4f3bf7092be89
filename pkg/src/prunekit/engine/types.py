"""Result and capability types shared by built-in and external evaluators."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TrainerCapabilities:
    supports_gradients: bool
    supports_retrain: bool
    supports_activations: bool

    def to_dict(self) -> dict:
        return {
            "supports_gradients": self.supports_gradients,
            "supports_retrain": self.supports_retrain,
            "supports_activations": self.supports_activations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerCapabilities":
        return cls(
            supports_gradients=bool(data.get("supports_gradients", False)),
            supports_retrain=bool(data.get("supports_retrain", False)),
            supports_activations=bool(data.get("supports_activations", False)),
        )


@dataclass
class EvaluationResult:
    """Accuracy of one evaluation pass. ``top5`` is None below six classes."""

    top1: float
    top5: float | None
    samples: int

    def to_dict(self) -> dict:
        out = {"top1": self.top1, "samples": self.samples}
        if self.top5 is not None:
            out["top5"] = self.top5
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationResult":
        return cls(
            top1=float(data["top1"]),
            top5=float(data["top5"]) if data.get("top5") is not None else None,
            samples=int(data.get("samples", 0)),
        )
