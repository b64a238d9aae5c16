"""Coloured triangle meshes from the TSDF zero level set, and PLY I/O."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .tsdf import TsdfVolume

MIN_WEIGHT = 2
_CHUNK = 2048


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64, metres
    colors: np.ndarray  # (V, 3) uint8
    faces: np.ndarray  # (F, 3) int64

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def _block_grids(volume: TsdfVolume, coords: np.ndarray):
    """(N, B+1, B+1, B+1) sdf / weight / colour grids indexed [x, y, z];
    the extra layer comes from the +x/+y/+z neighbour blocks."""
    B = volume.config.block_side
    n = len(coords)
    sdf = np.zeros((n, B + 1, B + 1, B + 1), dtype=np.float32)
    wgt = np.zeros((n, B + 1, B + 1, B + 1), dtype=np.uint8)
    col = np.zeros((n, B + 1, B + 1, B + 1, 3), dtype=np.uint8)
    for d in itertools.product((0, 1), repeat=3):
        idx = volume.index.lookup((coords + np.asarray(d)).astype(np.int32))
        have = idx >= 0
        if not have.any():
            continue
        src = idx[have]
        # storage order is [z, y, x]; flip to [x, y, z]
        s = volume.sdf[src].reshape(-1, B, B, B).transpose(0, 3, 2, 1)
        w = volume.weight[src].reshape(-1, B, B, B).transpose(0, 3, 2, 1)
        c = volume.color[src].reshape(-1, B, B, B, 3).transpose(0, 3, 2, 1, 4)
        dst = tuple(slice(B, B + 1) if k else slice(0, B) for k in d)
        part = tuple(slice(0, 1) if k else slice(0, B) for k in d)
        sdf[(have, *dst)] = s[(slice(None), *part)]
        wgt[(have, *dst)] = w[(slice(None), *part)]
        col[(have, *dst)] = c[(slice(None), *part)]
    return sdf, wgt, col


def _cell_valid(ok: np.ndarray) -> np.ndarray:
    """Cells (N, B, B, B) whose 8 corners are all ok."""
    c = ok[:, :-1, :-1, :-1].copy()
    for d in itertools.product((0, 1), repeat=3):
        if any(d):
            c &= ok[:, d[0]:d[0] + ok.shape[1] - 1, d[1]:d[1] + ok.shape[2] - 1, d[2]:d[2] + ok.shape[3] - 1]
    return c


def _edge_colors(grid_col: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Trilinear colour at grid-space positions."""
    g = grid_col.astype(np.float64)
    hi = np.array(g.shape[:3]) - 1
    base = np.clip(np.floor(verts).astype(np.int64), 0, hi - 1)
    f = verts - base
    out = np.zeros((len(verts), 3))
    for d in itertools.product((0, 1), repeat=3):
        wt = np.prod(np.where(np.asarray(d), f, 1 - f), axis=1)
        out += wt[:, None] * g[base[:, 0] + d[0], base[:, 1] + d[1], base[:, 2] + d[2]]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def extract_mesh(volume: TsdfVolume, min_weight: int = MIN_WEIGHT, weld: bool = True) -> Mesh:
    """Marching cubes over cells whose 8 corner voxels all have weight >=
    min_weight. Blocks are processed in lexicographic coordinate order."""
    if min_weight < 1:
        raise ValueError("min_weight must be >= 1")
    n = volume.num_blocks
    if n == 0:
        return Mesh.empty()
    B = volume.config.block_side
    s = volume.config.voxel_size
    coords = volume.block_coords.astype(np.int64)
    coords = coords[np.lexsort(coords.T[::-1])]
    verts, cols, faces = [], [], []
    nv = 0
    for lo in range(0, n, _CHUNK):
        chunk = coords[lo:lo + _CHUNK]
        sdf, wgt, col = _block_grids(volume, chunk)
        cells = _cell_valid(wgt >= min_weight)
        for i in np.nonzero(cells.reshape(len(chunk), -1).any(axis=1))[0]:
            g = sdf[i]
            used = np.zeros(g.shape, dtype=bool)
            for d in itertools.product((0, 1), repeat=3):
                used[d[0]:d[0] + B, d[1]:d[1] + B, d[2]:d[2] + B] |= cells[i]
            if g[used].min() > 0 or g[used].max() < 0:
                continue
            # skimage's mask entry [x, y, z] enables the cell spanning [x-1, x]
            m = np.zeros(g.shape, dtype=bool)
            m[1:, 1:, 1:] = cells[i]
            try:
                v, f, _, _ = marching_cubes(g, level=0.0, mask=m, method="lorensen")
            except (ValueError, RuntimeError):
                continue
            if len(f) == 0:
                continue
            cols.append(_edge_colors(col[i], v))
            verts.append((v + chunk[i] * B) * s)
            faces.append(f.astype(np.int64) + nv)
            nv += len(v)
    if not faces:
        return Mesh.empty()
    mesh = Mesh(np.concatenate(verts), np.concatenate(cols), np.concatenate(faces))
    if weld:
        mesh = _weld(mesh, s * 1e-6)
    keep = mesh.face_areas() > 1e-12
    keep &= (mesh.faces[:, 0] != mesh.faces[:, 1]) & (mesh.faces[:, 1] != mesh.faces[:, 2]) & (mesh.faces[:, 0] != mesh.faces[:, 2])
    return _compact(Mesh(mesh.vertices, mesh.colors, mesh.faces[keep]))


def _weld(mesh: Mesh, tol: float) -> Mesh:
    key = np.rint(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return Mesh(mesh.vertices[first[order]], mesh.colors[first[order]], remap[inverse][mesh.faces])


def _compact(mesh: Mesh) -> Mesh:
    used = np.zeros(len(mesh.vertices), dtype=bool)
    used[mesh.faces.ravel()] = True
    remap = np.cumsum(used) - 1
    return Mesh(mesh.vertices[used], mesh.colors[used], remap[mesh.faces])


# ------------------------------------------------------------------ PLY


def _header(n_vertex: int, n_face: int | None, fmt: str) -> bytes:
    lines = ["ply", f"format {fmt} 1.0", "comment dynfusion", f"element vertex {n_vertex}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if n_face is not None:
        lines += [f"element face {n_face}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _vertex_records(vertices, colors) -> np.ndarray:
    rec = np.empty(len(vertices), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
    for i, k in enumerate("xyz"):
        rec[k] = vertices[:, i]
    for i, k in enumerate("rgb"):
        rec[k] = colors[:, i]
    return rec


def write_ply(mesh: Mesh, path, ascii: bool = False) -> None:
    """Binary little-endian PLY (or ASCII): xyz float32, rgb uchar, faces as
    uchar-count int32 index lists."""
    n_v, n_f = len(mesh.vertices), len(mesh.faces)
    with open(path, "wb") as fh:
        fh.write(_header(n_v, n_f, "ascii" if ascii else "binary_little_endian"))
        if ascii:
            vs = mesh.vertices.astype(np.float32)
            for p, c in zip(vs, mesh.colors):
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}\n".encode())
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode())
            return
        fh.write(_vertex_records(mesh.vertices, mesh.colors).tobytes())
        frec = np.empty(n_f, dtype=[("n", "u1"), ("i", "<i4", (3,))])
        frec["n"] = 3
        frec["i"] = mesh.faces
        fh.write(frec.tobytes())


def write_pointcloud(vertices: np.ndarray, colors: np.ndarray, path, ascii: bool = False) -> None:
    write_ply(Mesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                   np.asarray(colors, dtype=np.uint8).reshape(-1, 3), np.zeros((0, 3), dtype=np.int64)), path, ascii)


def surface_points(volume: TsdfVolume, min_weight: int = MIN_WEIGHT) -> tuple[np.ndarray, np.ndarray]:
    """Mesh vertices as a coloured point cloud."""
    m = extract_mesh(volume, min_weight)
    return m.vertices, m.colors


def read_ply(path) -> Mesh:
    """Reader for the files written by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = next(line.split()[1] for line in header if line.startswith("format"))
    counts = {}
    for line in header:
        if line.startswith("element"):
            _, name, cnt = line.split()
            counts[name] = int(cnt)
    n_v, n_f = counts.get("vertex", 0), counts.get("face", 0)
    if fmt == "ascii":
        rows = body.decode("ascii").splitlines()
        vr = np.array([r.split() for r in rows[:n_v]], dtype=np.float64).reshape(-1, 6)
        fr = np.array([r.split()[1:4] for r in rows[n_v:n_v + n_f]], dtype=np.int64).reshape(-1, 3)
        return Mesh(vr[:, :3].astype(np.float32).astype(np.float64), vr[:, 3:].astype(np.uint8), fr)
    if fmt != "binary_little_endian":
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    vdt = _vertex_records(np.zeros((0, 3)), np.zeros((0, 3))).dtype
    vrec = np.frombuffer(body, dtype=vdt, count=n_v)
    frec = np.frombuffer(body, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=n_f, offset=n_v * vdt.itemsize)
    verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1).astype(np.float64)
    cols = np.stack([vrec["r"], vrec["g"], vrec["b"]], axis=1)
    return Mesh(verts, cols, frec["i"].astype(np.int64))
