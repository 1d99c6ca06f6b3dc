"""Ground-truth scenes and per-layer prediction sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .geometry import MIN_SIZE, Box


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: Box


@dataclass(frozen=True)
class Scene:
    n_classes: int
    objects: tuple[GroundTruth, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.n_classes < 1:
            raise ValueError("a scene needs at least one class")
        for obj in self.objects:
            if not 0 <= obj.class_id < self.n_classes:
                raise ValueError(f"class id {obj.class_id} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=int)

    @property
    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([o.box.as_tuple() for o in self.objects], dtype=float)

    def permuted(self, order) -> "Scene":
        return Scene(self.n_classes, tuple(self.objects[i] for i in order))


def sigmoid(x):
    return expit(np.asarray(x, dtype=float))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class PredictionSet:
    """Class probabilities ``[n, C]`` and center-format boxes ``[n, 4]`` of one layer.

    ``logits`` is kept when the set was built from logits so that the
    criterion's logit gradients refer to the caller's actual parameters.
    """

    scores: np.ndarray
    boxes: np.ndarray
    logits: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        self.boxes = np.reshape(np.asarray(self.boxes, dtype=float), (-1, 4))
        if self.scores.shape[0] != self.boxes.shape[0]:
            raise ValueError(
                f"{self.scores.shape[0]} score rows but {self.boxes.shape[0]} boxes"
            )
        # NaN fails the comparison as well
        if not (self.boxes[:, 2:] >= MIN_SIZE).all() or not np.isfinite(self.boxes).all():
            raise ValueError(f"invalid predicted box (non-finite, or w or h < {MIN_SIZE})")

    @classmethod
    def from_logits(cls, logits, boxes) -> "PredictionSet":
        logits = np.atleast_2d(np.asarray(logits, dtype=float))
        return cls(sigmoid(logits), boxes, logits=logits)

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def confidence(self) -> np.ndarray:
        return self.scores.max(axis=1)
