from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FixationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FixationMap:
    """Binary gaze map stored as unique, sorted 0-based (row, col) locations."""

    height: int
    width: int
    locations: np.ndarray  # (n, 2) int64

    @classmethod
    def from_points(cls, points, height: int, width: int) -> "FixationMap":
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= height) | (pts[:, 1] < 0) | (pts[:, 1] >= width)
        if bad.any():
            r, c = pts[np.argmax(bad)]
            raise FixationError(f"fixation ({r}, {c}) outside {height}x{width} map")
        pts = np.unique(pts, axis=0) if len(pts) else pts
        return cls(int(height), int(width), pts)

    @classmethod
    def from_mask(cls, mask) -> "FixationMap":
        mask = np.asarray(mask)
        return cls.from_points(np.argwhere(mask > 0), *mask.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def __len__(self) -> int:
        return len(self.locations)

    def to_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        if len(self.locations):
            m[self.locations[:, 0], self.locations[:, 1]] = True
        return m

    def flat_indices(self) -> np.ndarray:
        return self.locations[:, 0] * self.width + self.locations[:, 1]

    def values(self, saliency: np.ndarray) -> np.ndarray:
        return np.asarray(saliency)[self.locations[:, 0], self.locations[:, 1]]

    def __eq__(self, other) -> bool:
        return (isinstance(other, FixationMap) and self.shape == other.shape
                and np.array_equal(self.locations, other.locations))
