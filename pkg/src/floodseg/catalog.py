"""Semantic class catalog for FloodNet-style label maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class SemanticClass:
    id: int
    name: str
    alpha: float
    is_background: bool = False


# Per-class focal-loss balancing factors published for the FloodNet training split.
FLOODNET_CLASSES = (
    SemanticClass(0, "Background", 0.08, True),
    SemanticClass(1, "Building Flooded", 0.14),
    SemanticClass(2, "Building Non-Flooded", 0.10),
    SemanticClass(3, "Road Flooded", 0.10),
    SemanticClass(4, "Road Non-Flooded", 0.05),
    SemanticClass(5, "Water", 0.015),
    SemanticClass(6, "Tree", 0.01),
    SemanticClass(7, "Vehicle", 0.25),
    SemanticClass(8, "Pool", 0.25),
    SemanticClass(9, "Grass", 0.005),
)


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[SemanticClass, ...]

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be 0..C-1 in order, got {ids}")
        if sum(c.is_background for c in self.classes) != 1:
            raise ValueError("exactly one class must be flagged as background")
        if any(c.alpha < 0 for c in self.classes):
            raise ValueError("alpha values must be nonnegative")

    @classmethod
    def default(cls) -> "ClassCatalog":
        return cls(FLOODNET_CLASSES)

    @classmethod
    def from_names(cls, names: Sequence[str], alphas: Iterable[float] | None = None) -> "ClassCatalog":
        """Build a catalog whose first name is the background class.

        Alphas default to uniform ``1/C``.
        """
        n = len(names)
        alphas = [1.0 / n] * n if alphas is None else list(alphas)
        return cls(tuple(SemanticClass(i, name, float(a), i == 0)
                         for i, (name, a) in enumerate(zip(names, alphas))))

    def __len__(self):
        return len(self.classes)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def alphas(self) -> np.ndarray:
        return np.array([c.alpha for c in self.classes], dtype=np.float64)

    @property
    def background_id(self) -> int:
        return next(c.id for c in self.classes if c.is_background)

    def to_dict(self) -> dict:
        return {"classes": [dict(id=c.id, name=c.name, alpha=c.alpha, is_background=c.is_background)
                            for c in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        return cls(tuple(SemanticClass(int(c["id"]), c["name"], float(c["alpha"]), bool(c["is_background"]))
                         for c in d["classes"]))
