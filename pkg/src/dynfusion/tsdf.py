"""Hash-indexed colour TSDF volume.

Voxel payload is 8 bytes: sdf float32 (metres), weight uint8, RGB uint8 x3.
Weights are integer observation counts capped at ``max_weight`` (<= 255);
intensity is derived from the stored colour on demand.

Poses passed to this module are camera-to-world.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .frame import Frame
from .geometry import Pose
from .index import BlockIndex
from .kernels import fusion, sampling

MAGIC = b"DFTSDF\x00\x00"
VERSION = 1


class AllocationError(MemoryError):
    def __init__(self, requested: int, limit: int):
        super().__init__(f"block allocation limit exceeded: {requested} blocks requested, limit {limit}")
        self.requested = requested
        self.limit = limit


@dataclass
class VolumeConfig:
    voxel_size: float = 0.01
    truncation: float = 0.1
    block_side: int = 8
    max_weight: int = 64
    carve_weight: int = 1
    min_depth: float = 0.1
    max_depth: float = 5.0
    carve_clip: float = 4.0
    max_blocks: int = 400_000
    # allocate blocks along free-space segments so that carving can mark them
    allocate_free_space: bool = True
    free_space_stride: int = 4

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")
        if self.block_side < 2:
            raise ValueError("block_side must be >= 2")
        if not 1 <= self.max_weight <= 255:
            raise ValueError("max_weight must lie in [1, 255]")
        if not 1 <= self.carve_weight <= 255:
            raise ValueError("carve_weight must lie in [1, 255]")
        if self.free_space_stride < 1:
            raise ValueError("free_space_stride must be >= 1")

    @property
    def block_extent(self) -> float:
        return self.block_side * self.voxel_size


def _world_to_camera(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    inv = pose.inverse()
    return inv.rotation, inv.translation


class TsdfVolume:
    def __init__(self, config: VolumeConfig | None = None):
        self.config = config or VolumeConfig()
        self.index = BlockIndex()
        n = self.config.block_side**3
        cap = 64
        self.sdf = np.zeros((cap, n), dtype=np.float32)
        self.weight = np.zeros((cap, n), dtype=np.uint8)
        self.color = np.zeros((cap, n, 3), dtype=np.uint8)

    # ------------------------------------------------------------ storage

    @property
    def num_blocks(self) -> int:
        return self.index.count

    @property
    def block_coords(self) -> np.ndarray:
        return self.index.coords

    def _grow(self, count: int) -> None:
        cap = self.sdf.shape[0]
        if count <= cap:
            return
        new_cap = max(count, 2 * cap)
        n = self.sdf.shape[1]
        for name, shape in (("sdf", (new_cap, n)), ("weight", (new_cap, n)), ("color", (new_cap, n, 3))):
            old = getattr(self, name)
            arr = np.zeros(shape, dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)

    def allocate_blocks(self, coords) -> np.ndarray:
        """Allocate the given block coordinates; returns the newly created ones."""
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
        if len(coords) == 0:
            return np.zeros((0, 3), dtype=np.int32)
        missing = coords[self.index.lookup(coords) < 0]
        if len(missing) == 0:
            return np.zeros((0, 3), dtype=np.int32)
        missing = np.unique(missing, axis=0)
        total = self.index.count + len(missing)
        if total > self.config.max_blocks:
            raise AllocationError(total, self.config.max_blocks)
        _, new = self.index.insert(missing)
        self._grow(self.index.count)
        return missing[new]

    def allocate_for_frame(self, frame: Frame, pose: Pose, mask: np.ndarray | None = None,
                           free_space: bool | None = None) -> np.ndarray:
        """Allocate blocks pierced by each pixel's +/- truncation segment, and
        (optionally) by its free-space segment up to the carve clip.

        Returns the set of newly allocated block coordinates, (M, 3).
        """
        cfg = self.config
        if free_space is None:
            free_space = cfg.allocate_free_space
        if mask is None:
            mask = np.zeros(frame.shape, dtype=bool)
        K = frame.intrinsics.as_array()
        R, t = pose.rotation, pose.translation
        parts = [fusion.segment_blocks(frame.depth, mask, K, R, t, cfg.block_extent, cfg.truncation,
                                       cfg.min_depth, cfg.max_depth, cfg.carve_clip, 1, False)]
        if free_space:
            parts.append(fusion.segment_blocks(frame.depth, mask, K, R, t, cfg.block_extent, cfg.truncation,
                                               cfg.min_depth, cfg.max_depth, cfg.carve_clip,
                                               cfg.free_space_stride, True))
        return self.allocate_blocks(np.concatenate(parts))

    # --------------------------------------------------------- integration

    def _fuse(self, frame: Frame, pose: Pose, mask: np.ndarray | None, mode: int) -> int:
        cfg = self.config
        if self.num_blocks == 0:
            return 0
        if mask is None:
            mask = np.zeros(frame.shape, dtype=bool)
        elif mask.shape != frame.shape:
            raise ValueError(f"mask shape {mask.shape} != frame shape {frame.shape}")
        R, t = _world_to_camera(pose)
        return fusion.fuse(self.block_coords, self.sdf, self.weight, self.color, cfg.block_side, cfg.voxel_size,
                           R, t, frame.intrinsics.as_array(), frame.depth, frame.color, mask,
                           cfg.truncation, cfg.min_depth, cfg.max_depth, cfg.max_weight, cfg.carve_clip,
                           cfg.carve_weight, mode)

    def integrate(self, frame: Frame, pose: Pose, mask: np.ndarray | None = None) -> int:
        """Running-average fusion of the truncation band; masked pixels are skipped.

        Only already-allocated blocks are touched. Returns voxels updated.
        """
        if mask is not None and mask.all():
            return 0
        return self._fuse(frame, pose, mask, 0)

    def carve_free_space(self, frame: Frame, pose: Pose) -> int:
        """Pull allocated voxels in front of the measured surface (beyond the
        truncation band, closer than the carve clip) toward sdf = +tau."""
        return self._fuse(frame, pose, None, 1)

    # ------------------------------------------------------------ sampling

    def sample(self, points, want_color: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Batch trilinear sample; columns are sdf, intensity, d(sdf)/dx (3),
        d(intensity)/dx (3)."""
        cfg = self.config
        return sampling.sample(self.index.keys, self.index.vals, self.sdf, self.weight, self.color,
                               cfg.block_side, cfg.voxel_size, points, want_color)

    def sample_sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        res, ok = self.sample(x.reshape(-1, 3), want_color=False)
        if x.ndim == 1:
            return float(res[0, 0]), bool(ok[0])
        return res[:, 0], ok

    def sample_intensity(self, x):
        x = np.asarray(x, dtype=np.float64)
        res, ok = self.sample(x.reshape(-1, 3))
        if x.ndim == 1:
            return float(res[0, 1]), bool(ok[0])
        return res[:, 1], ok

    def sample_sdf_gradient(self, x):
        """Central differences of the interpolated sdf with step = voxel size;
        valid only when all six samples are."""
        x = np.asarray(x, dtype=np.float64)
        pts = x.reshape(-1, 3)
        h = self.config.voxel_size
        grad = np.zeros_like(pts)
        ok = np.ones(len(pts), dtype=bool)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fp, okp = self.sample_sdf(pts + e)
            fm, okm = self.sample_sdf(pts - e)
            grad[:, k] = (fp - fm) / (2 * h)
            ok &= okp & okm
        grad[~ok] = 0.0
        if x.ndim == 1:
            return grad[0], bool(ok[0])
        return grad, ok

    def raycast_depth(self, pose: Pose, intrinsics, z_min: float | None = None, z_max: float | None = None,
                      step: float | None = None) -> np.ndarray:
        """Depth image of the first front-to-back zero crossing, 0 where none."""
        from .geometry import pixel_rays

        cfg = self.config
        z_min = cfg.min_depth if z_min is None else z_min
        z_max = cfg.max_depth if z_max is None else z_max
        step = cfg.truncation / 2 if step is None else step
        return sampling.raymarch(self.index.keys, self.index.vals, self.sdf, self.weight, self.color,
                                 cfg.block_side, cfg.voxel_size, pose.rotation, pose.translation,
                                 pixel_rays(intrinsics), z_min, z_max, step)

    # ---------------------------------------------------------- voxel access

    def _locate(self, ijk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        B = self.config.block_side
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        blocks = np.floor_divide(ijk, B)
        local = ijk - blocks * B
        blk = self.index.lookup(blocks.astype(np.int32))
        return blk, local[:, 0] + B * (local[:, 1] + B * local[:, 2])

    def voxels(self, ijk):
        """(sdf, weight, color) at integer voxel coordinates; weight 0 where absent."""
        blk, off = self._locate(ijk)
        ok = blk >= 0
        b = np.where(ok, blk, 0)
        sdf = np.where(ok, self.sdf[b, off], 0.0)
        w = np.where(ok, self.weight[b, off], 0)
        col = np.where(ok[:, None], self.color[b, off], 0)
        return sdf, w, col

    def write_voxels(self, ijk, sdf, weight=1, color=(128, 128, 128)) -> None:
        """Set voxels directly, allocating their blocks (used for analytic fields)."""
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        self.allocate_blocks(np.unique(np.floor_divide(ijk, self.config.block_side), axis=0))
        blk, off = self._locate(ijk)
        tau = self.config.truncation
        self.sdf[blk, off] = np.clip(np.broadcast_to(sdf, len(ijk)), -tau, tau)
        self.weight[blk, off] = np.broadcast_to(weight, len(ijk))
        self.color[blk, off] = np.broadcast_to(np.asarray(color, dtype=np.uint8), (len(ijk), 3))

    @classmethod
    def from_function(cls, config: VolumeConfig, lo, hi, sdf_fn, color_fn=None, weight: int = 1) -> "TsdfVolume":
        """Volume whose voxels in the box [lo, hi] hold sdf_fn(points)."""
        vol = cls(config)
        s = config.voxel_size
        lo_i = np.floor(np.asarray(lo) / s).astype(np.int64)
        hi_i = np.ceil(np.asarray(hi) / s).astype(np.int64)
        axes = [np.arange(a, b + 1) for a, b in zip(lo_i, hi_i)]
        ijk = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        pts = ijk * s
        col = (128, 128, 128) if color_fn is None else np.clip(np.rint(color_fn(pts)), 0, 255)
        vol.write_voxels(ijk, sdf_fn(pts), weight, col)
        return vol

    def voxel_positions(self) -> np.ndarray:
        """World positions (num_blocks, B^3, 3) of all allocated voxels."""
        B = self.config.block_side
        lz, ly, lx = np.meshgrid(np.arange(B), np.arange(B), np.arange(B), indexing="ij")
        local = np.stack([lx.ravel(), ly.ravel(), lz.ravel()], axis=1)
        return (self.block_coords[:, None, :].astype(np.int64) * B + local[None]) * self.config.voxel_size

    def observed(self):
        """(positions, sdf, weight, color) of every voxel with weight > 0."""
        n = self.num_blocks
        w = self.weight[:n]
        sel = w > 0
        return self.voxel_positions()[sel], self.sdf[:n][sel], w[sel], self.color[:n][sel]

    # ------------------------------------------------------- serialization

    _HEADER = struct.Struct("<8sI ddIIIddd Q")

    def save(self, path) -> None:
        """Little-endian dump: header, then per block coord (3 x int32),
        sdf (B^3 float32), weight (B^3 uint8), colour (B^3 x 3 uint8)."""
        cfg = self.config
        n = self.num_blocks
        with open(path, "wb") as fh:
            fh.write(self._HEADER.pack(MAGIC, VERSION, cfg.voxel_size, cfg.truncation, cfg.block_side,
                                       cfg.max_weight, cfg.carve_weight, cfg.min_depth, cfg.max_depth,
                                       cfg.carve_clip, n))
            for i in range(n):
                fh.write(self.block_coords[i].astype("<i4").tobytes())
                fh.write(self.sdf[i].astype("<f4").tobytes())
                fh.write(self.weight[i].tobytes())
                fh.write(self.color[i].tobytes())

    @classmethod
    def load(cls, path, **overrides) -> "TsdfVolume":
        data = Path(path).read_bytes()
        head = cls._HEADER.unpack_from(data, 0)
        magic, version = head[0], head[1]
        if magic != MAGIC:
            raise ValueError(f"{path}: not a TSDF snapshot")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        names = ["voxel_size", "truncation", "block_side", "max_weight", "carve_weight",
                 "min_depth", "max_depth", "carve_clip"]
        cfg = VolumeConfig(**dict(zip(names, head[2:10])), **overrides)
        n = head[10]
        vol = cls(cfg)
        nv = cfg.block_side**3
        rec = np.dtype([("coord", "<i4", 3), ("sdf", "<f4", nv), ("weight", "u1", nv), ("color", "u1", (nv, 3))])
        blocks = np.frombuffer(data, dtype=rec, count=n, offset=cls._HEADER.size)
        if n:
            vol.index.insert(blocks["coord"])
            vol._grow(n)
            vol.sdf[:n] = blocks["sdf"]
            vol.weight[:n] = blocks["weight"]
            vol.color[:n] = blocks["color"]
        return vol

    def config_dict(self) -> dict:
        return asdict(self.config)


def config_field_names() -> list[str]:
    return [f.name for f in fields(VolumeConfig)]
