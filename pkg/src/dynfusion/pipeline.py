"""Per-frame orchestration: register, mask dynamics, re-register, carve, fuse."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dynamics import MaskConfig, build_mask
from .frame import Frame
from .geometry import Pose
from .refinement import FrameWindow, RefinementConfig, refine_depth, render_virtual_depth
from .registration import RegistrationConfig, RegistrationResult, ResidualImage, TrackingLost, register
from .tsdf import TsdfVolume, VolumeConfig

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    dynamics_enabled: bool = True

    _SECTIONS = ("volume", "registration", "mask", "refinement")

    def to_text(self) -> str:
        lines = ["# dynfusion configuration: key = value, '#' starts a comment"]
        for sec in self._SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                lines.append(f"{sec}.{f.name} = {getattr(getattr(self, sec), f.name)}")
        lines.append(f"dynamics_enabled = {self.dynamics_enabled}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        """Parse ``key = value`` lines. Keys are ``section.field`` or a bare
        field name, which sets that field in every section that has it
        (e.g. ``max_depth`` applies to both volume and registration)."""
        base = cls()
        updates: dict[str, dict] = {s: {} for s in cls._SECTIONS}
        dynamics = base.dynamics_enabled
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "dynamics_enabled":
                dynamics = _parse_value(val, bool)
                continue
            if "." in key:
                sec, name = key.split(".", 1)
                targets = [sec] if sec in updates else []
            else:
                name = key
                targets = [s for s in cls._SECTIONS if name in _field_types(getattr(base, s))]
            hit = False
            for sec in targets:
                types = _field_types(getattr(base, sec))
                if name in types:
                    updates[sec][name] = _parse_value(val, types[name])
                    hit = True
            if not hit:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        return cls(**{s: dataclasses.replace(getattr(base, s), **updates[s]) for s in cls._SECTIONS},
                   dynamics_enabled=dynamics)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text())


def _field_types(obj) -> dict:
    return {f.name: type(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _parse_value(val: str, typ):
    if typ is bool:
        low = val.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    return typ(val)


@dataclass
class FrameStats:
    index: int
    timestamp: float
    registrations: int = 0
    residuals: int = 0
    mask_fraction: float = 0.0
    tracking_lost: bool = False
    iterations: int = 0
    energy: float = float("nan")
    integrated: bool = False
    num_blocks: int = 0
    t_register: float = 0.0
    t_mask: float = 0.0
    t_fuse: float = 0.0


@dataclass
class _Pending:
    frame: Frame
    pose: Pose
    mask: np.ndarray
    integrated: bool


class PipelineState:
    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.volume = TsdfVolume(self.config.volume)
        self.pose = Pose()
        self.trajectory: list[tuple[float, Pose]] = []
        self.stats: list[FrameStats] = []
        self.window: FrameWindow | None = None
        self._pending: deque[_Pending] = deque()
        self.last_residuals: ResidualImage | None = None

    @property
    def frame_count(self) -> int:
        return len(self.trajectory)

    def _fuse(self, frame: Frame, pose: Pose, mask: np.ndarray) -> None:
        self.volume.allocate_for_frame(frame, pose, mask)
        self.volume.carve_free_space(frame, pose)
        self.volume.integrate(frame, pose, mask)

    def _refined(self, item: _Pending) -> Frame:
        virt = render_virtual_depth(self.window, item.pose, item.frame.intrinsics, self.config.volume)
        return item.frame.with_depth(refine_depth(item.frame.depth, virt, self.config.refinement))

    def _advance_window(self, item: _Pending) -> None:
        """Delayed fusion: once n frames are held back, the oldest one is
        refined against a model of itself and its successors, then fused."""
        n = self.config.refinement.n
        self._pending.append(item)
        if len(self._pending) > n:
            self._flush_one()

    def _flush_one(self) -> None:
        old = self._pending.popleft()
        window = FrameWindow(self.config.refinement.n)
        for p in [old, *self._pending][: window.n]:
            window.push(_masked(p.frame, p.mask), p.pose)
        self.window = window
        if not old.integrated:
            self._fuse(self._refined(old), old.pose, old.mask)

    def finish(self) -> None:
        """Fuse every frame still held back by the refinement delay."""
        while self._pending:
            self._flush_one()


def _masked(frame: Frame, mask: np.ndarray) -> Frame:
    if not mask.any():
        return frame
    return frame.with_depth(np.where(mask, 0.0, frame.depth))


def process_frame(state: PipelineState, frame: Frame) -> tuple[Pose, np.ndarray, FrameStats]:
    cfg = state.config
    if state.trajectory and frame.timestamp <= state.trajectory[-1][0]:
        raise ValueError(f"timestamp {frame.timestamp} does not increase")
    stats = FrameStats(state.frame_count, frame.timestamp)
    mask = np.zeros(frame.shape, dtype=bool)

    if state.frame_count == 0:
        pose = Pose()
        t0 = time.perf_counter()
        state._fuse(frame, pose, mask)
        stats.t_fuse = time.perf_counter() - t0
        stats.integrated = True
        bootstrap = True
    else:
        bootstrap = False
        t0 = time.perf_counter()
        try:
            stats.registrations = 1
            res: RegistrationResult = register(state.volume, frame, state.pose, None, cfg.registration)
            stats.t_register = time.perf_counter() - t0
            if cfg.dynamics_enabled:
                t1 = time.perf_counter()
                mask = build_mask(res.residuals, frame.depth, cfg.volume.truncation, cfg.mask)
                stats.t_mask = time.perf_counter() - t1
                t1 = time.perf_counter()
                stats.registrations = 2
                res = register(state.volume, frame, res.pose, mask, cfg.registration)
                stats.t_register += time.perf_counter() - t1
            pose = res.pose
            state.last_residuals = res.residuals
            stats.residuals = int(res.residuals.valid.sum())
            stats.iterations = res.iterations
            stats.energy = res.energy
        except TrackingLost as exc:
            log.warning("frame %d: tracking lost (%s); holding pose", stats.index, exc)
            stats.tracking_lost = True
            pose = state.pose
        if not stats.tracking_lost and not cfg.refinement.enabled:
            t0 = time.perf_counter()
            state._fuse(frame, pose, mask)
            stats.t_fuse = time.perf_counter() - t0
            stats.integrated = True

    valid = frame.valid
    stats.mask_fraction = float((mask & valid).sum() / max(valid.sum(), 1))
    if cfg.refinement.enabled and not stats.tracking_lost:
        t0 = time.perf_counter()
        state._advance_window(_Pending(frame, pose, mask, bootstrap))
        stats.t_fuse += time.perf_counter() - t0
        stats.integrated = True
    state.pose = pose
    state.trajectory.append((frame.timestamp, pose))
    stats.num_blocks = state.volume.num_blocks
    state.stats.append(stats)
    return pose, mask, stats


def run_sequence(config: PipelineConfig | None, frames: Iterable[Frame],
                 on_frame=None) -> tuple[list[tuple[float, Pose]], TsdfVolume, PipelineState]:
    """Process every frame in order; ``on_frame(index, pose, mask, stats,
    state)`` is called after each one."""
    state = PipelineState(config)
    it = iter(frames)
    i = 0
    while True:
        try:
            frame = next(it)
        except StopIteration:
            break
        except Exception as exc:
            raise IOError(f"failed to load frame {i}: {exc}") from exc
        pose, mask, stats = process_frame(state, frame)
        if on_frame is not None:
            on_frame(i, pose, mask, stats, state)
        i += 1
    if i == 0:
        raise ValueError("sequence has no frames")
    state.finish()
    return state.trajectory, state.volume, state


def write_stats_csv(path, stats: list[FrameStats]) -> None:
    names = [f.name for f in dataclasses.fields(FrameStats)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for s in stats:
            w.writerow([getattr(s, n) for n in names])
