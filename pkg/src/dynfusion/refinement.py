"""Filling invalid depth from a short-term model of recent frames.

Zero-depth pixels are either non-measurable surfaces or beyond sensor
range. A throwaway volume fused from the last n registered frames is ray
marched from the target pose: where it has a surface, the hole is filled
from it; the remaining holes are treated as out of range and get a far
constant, which lets free-space carving act along those rays.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .frame import Frame
from .geometry import CameraIntrinsics, Pose
from .tsdf import TsdfVolume, VolumeConfig


@dataclass(frozen=True)
class RefinementConfig:
    n: int = 10
    far_value: float = 8.0
    enabled: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("window length n must be >= 1")


class FrameWindow:
    """Ring buffer of the last n (frame, pose) pairs in arrival order."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("window length must be >= 1")
        self.n = n
        self._items: deque = deque(maxlen=n)

    def push(self, frame: Frame, pose: Pose) -> None:
        if self._items and frame.timestamp < self._items[-1][0].timestamp:
            raise ValueError("frames must arrive in timestamp order")
        self._items.append((frame, pose))

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.n


def build_window_volume(window: FrameWindow, volume_config: VolumeConfig | None = None) -> TsdfVolume:
    if len(window) == 0:
        raise ValueError("cannot render from an empty window")
    cfg = volume_config or VolumeConfig()
    cfg = replace(cfg, max_weight=min(max(len(window), window.n), 255), allocate_free_space=False)
    vol = TsdfVolume(cfg)
    for frame, pose in window:
        vol.allocate_for_frame(frame, pose)
        vol.integrate(frame, pose)
    return vol


def render_virtual_depth(window: FrameWindow, target_pose: Pose, intrinsics: CameraIntrinsics,
                         volume_config: VolumeConfig | None = None) -> np.ndarray:
    """Depth of the window model seen from target_pose; 0 where no surface."""
    vol = build_window_volume(window, volume_config)
    return vol.raycast_depth(target_pose, intrinsics)


def refine_depth(raw_depth: np.ndarray, virtual_depth: np.ndarray, config: RefinementConfig | None = None) -> np.ndarray:
    config = config or RefinementConfig()
    raw = np.asarray(raw_depth, dtype=np.float32)
    virt = np.asarray(virtual_depth, dtype=np.float32)
    if raw.shape != virt.shape:
        raise ValueError("raw and virtual depth must have the same shape")
    out = raw.copy()
    hole = ~(raw > 0)
    fill = hole & (virt > 0)
    out[fill] = virt[fill]
    out[hole & ~fill] = config.far_value
    return out
