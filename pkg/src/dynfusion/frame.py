from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics

LUMA = np.array([0.2126, 0.7152, 0.0722])


def intensity(rgb: np.ndarray) -> np.ndarray:
    """Luma of an (..., 3) RGB array; pure white maps to exactly 255."""
    return np.asarray(rgb, dtype=np.float64) @ LUMA


@dataclass
class Frame:
    """One RGB-D observation. depth is metres (float32), 0 where invalid."""

    depth: np.ndarray
    color: np.ndarray
    intrinsics: CameraIntrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        self.color = np.ascontiguousarray(self.color, dtype=np.uint8)
        if self.depth.shape != self.intrinsics.shape:
            raise ValueError(f"depth shape {self.depth.shape} != intrinsics {self.intrinsics.shape}")
        if self.color.shape != self.depth.shape + (3,):
            raise ValueError("color must be (H, W, 3) matching depth")
        bad = ~np.isfinite(self.depth) | (self.depth < 0)
        if bad.any():
            self.depth = np.where(bad, 0.0, self.depth).astype(np.float32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def intensity(self) -> np.ndarray:
        return intensity(self.color)

    def with_depth(self, depth: np.ndarray) -> "Frame":
        return Frame(depth, self.color, self.intrinsics, self.timestamp)
