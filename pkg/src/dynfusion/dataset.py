"""Reading and writing TUM-style RGB-D sequences and trajectories."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .frame import Frame
from .geometry import CameraIntrinsics, Pose, quaternion_to_rotation, rotation_to_quaternion

# Calibrated Freiburg 3 intrinsics, used when a sequence ships none.
FR3_INTRINSICS = CameraIntrinsics(535.4, 539.2, 320.1, 247.6, 640, 480, depth_scale=5000.0)


class DatasetError(Exception):
    """Malformed or missing sequence data."""


def read_list(path) -> list[tuple[float, list[str]]]:
    """Parse a whitespace-separated list with a timestamp in column one."""
    out = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            out.append((float(parts[0]), parts[1:]))
        except (ValueError, IndexError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad line {line!r}") from exc
    return out


def associate(first: list[float], second: list[float], max_difference: float = 0.02,
              offset: float = 0.0) -> list[tuple[int, int]]:
    """Greedy one-to-one matching of two timestamp lists.

    Candidate pairs closer than max_difference are taken in order of
    increasing gap; returns index pairs sorted by the first list.
    """
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64) + offset
    if a.size == 0 or b.size == 0:
        return []
    order = np.argsort(b)
    bs = b[order]
    cand = []
    for i, t in enumerate(a):
        lo = np.searchsorted(bs, t - max_difference, side="left")
        hi = np.searchsorted(bs, t + max_difference, side="right")
        for j in range(lo, hi):
            cand.append((abs(t - bs[j]), i, int(order[j])))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for gap, i, j in cand:
        if gap <= max_difference and i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs


# ------------------------------------------------------------------ images


def read_depth(path, depth_scale: float = 5000.0) -> np.ndarray:
    try:
        raw = np.asarray(Image.open(path))
    except OSError as exc:
        raise DatasetError(f"cannot read depth image {path}: {exc}") from exc
    if raw.ndim != 2:
        raise DatasetError(f"depth image {path} is not single channel")
    return (raw.astype(np.float64) / depth_scale).astype(np.float32)


def write_depth(path, depth: np.ndarray, depth_scale: float = 5000.0) -> None:
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    raw = np.clip(np.rint(d * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_color(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise DatasetError(f"cannot read colour image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.uint8)


def write_color(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


# ------------------------------------------------------------------ trajectories


def read_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    """Read "t tx ty tz qx qy qz qw" lines; returns (timestamps, poses)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    times, poses = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 8:
            raise DatasetError(f"{path}:{lineno}: expected 8 values, got {len(parts)}")
        try:
            v = np.asarray(parts[:8], dtype=np.float64)
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: bad line {line!r}") from exc
        if not np.all(np.isfinite(v)):
            raise DatasetError(f"{path}:{lineno}: non-finite value")
        qn = np.linalg.norm(v[4:])
        if abs(qn - 1.0) > 1e-3:
            warnings.warn(f"{path}:{lineno}: quaternion norm {qn:.6f}; normalised", stacklevel=2)
        times.append(v[0])
        poses.append(Pose(quaternion_to_rotation(v[4:]), v[1:4]))
    return np.asarray(times), poses


def write_trajectory(entries, path) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in entries:
        q = rotation_to_quaternion(pose.rotation)
        vals = " ".join(f"{x:.12f}" for x in list(pose.translation) + list(q))
        lines.append(f"{t:.6f} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    """One line: fx fy cx cy width height [depth_scale]."""
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        v = line.split()
        if len(v) not in (6, 7):
            raise DatasetError(f"{path}: expected 6 or 7 values, got {len(v)}")
        ds = float(v[6]) if len(v) == 7 else 5000.0
        return CameraIntrinsics(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]), depth_scale=ds)
    raise DatasetError(f"{path}: empty intrinsics file")


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    Path(path).write_text("# fx fy cx cy width height depth_scale\n"
                          f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height} {k.depth_scale!r}\n")


# ------------------------------------------------------------------ sequences


@dataclass
class FrameEntry:
    timestamp: float
    rgb: Path
    depth: Path
    label: Path | None = None


@dataclass
class SequenceManifest:
    root: Path
    intrinsics: CameraIntrinsics
    entries: list[FrameEntry]
    groundtruth: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def frame(self, i: int) -> Frame:
        return load_frame(self.entries[i], self.intrinsics)

    def label(self, i: int) -> np.ndarray | None:
        e = self.entries[i]
        return read_mask(e.label) if e.label is not None and e.label.exists() else None

    def __iter__(self):
        for i in range(len(self)):
            yield self.frame(i)


def load_manifest(root, intrinsics: CameraIntrinsics | None = None, max_difference: float = 0.02) -> SequenceManifest:
    """Discover a sequence in a TUM-layout directory.

    Needs rgb.txt and depth.txt; intrinsics.txt and groundtruth.txt are
    optional. A labels/ directory with files named like the depth images
    is picked up as per-frame dynamic masks.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    for name in ("rgb.txt", "depth.txt"):
        if not (root / name).exists():
            raise DatasetError(f"{root} has no {name}")
    rgb = read_list(root / "rgb.txt")
    dep = read_list(root / "depth.txt")
    pairs = associate([r[0] for r in rgb], [d[0] for d in dep], max_difference)
    if not pairs:
        raise DatasetError(f"{root}: no rgb/depth pairs within {max_difference} s")
    if intrinsics is None:
        intrinsics = read_intrinsics(root / "intrinsics.txt") if (root / "intrinsics.txt").exists() else FR3_INTRINSICS
    entries = []
    for i, j in pairs:
        dpath = root / dep[j][1][0]
        label = root / "labels" / dpath.name
        entries.append(FrameEntry(dep[j][0], root / rgb[i][1][0], dpath, label if label.exists() else None))
    gt = root / "groundtruth.txt"
    return SequenceManifest(root, intrinsics, entries, gt if gt.exists() else None)


def load_frame(entry: FrameEntry, intrinsics: CameraIntrinsics) -> Frame:
    depth = read_depth(entry.depth, intrinsics.depth_scale)
    color = read_color(entry.rgb)
    if depth.shape != intrinsics.shape or color.shape[:2] != intrinsics.shape:
        raise DatasetError(f"frame at t={entry.timestamp} has size {depth.shape}, expected {intrinsics.shape}")
    return Frame(depth, color, intrinsics, entry.timestamp)
