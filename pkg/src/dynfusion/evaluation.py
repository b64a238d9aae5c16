"""Trajectory and reconstruction accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataset import associate
from .geometry import Pose


class EvaluationError(ValueError):
    pass


def _arrays(traj) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accept [(t, Pose), ...] or (times, [Pose, ...]); return times,
    positions (N, 3), rotations (N, 3, 3)."""
    if isinstance(traj, tuple) and len(traj) == 2 and not isinstance(traj[0], (int, float)):
        times, poses = traj
        items = list(zip(times, poses))
    else:
        items = list(traj)
    if not items:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3))
    times = np.array([float(t) for t, _ in items])
    pos = np.array([p.translation for _, p in items], dtype=np.float64)
    rot = np.array([p.rotation for _, p in items], dtype=np.float64)
    return times, pos, rot


def align(source: np.ndarray, target: np.ndarray) -> Pose:
    """Rigid transform T minimising sum |T source_i - target_i|^2 (no scale)."""
    a = np.asarray(source, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise EvaluationError("point sets must both be (N, 3)")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return Pose(r, cb - r @ ca)


@dataclass
class AteResult:
    rmse: float
    errors: np.ndarray  # per associated pose, metres
    times: np.ndarray
    alignment: Pose  # maps the estimate into the ground-truth frame


def ate(est, gt, max_dt: float = 0.02) -> AteResult:
    te, pe, _ = _arrays(est)
    tg, pg, _ = _arrays(gt)
    pairs = associate(list(te), list(tg), max_dt)
    if len(pairs) < 3:
        raise EvaluationError(f"need at least 3 associated poses, got {len(pairs)}")
    ie = np.array([i for i, _ in pairs])
    ig = np.array([j for _, j in pairs])
    a, b = pe[ie], pg[ig]
    T = align(a, b)
    err = np.linalg.norm(T.apply(a) - b, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), err, te[ie], T)


def ate_rmse(est, gt, max_dt: float = 0.02) -> float:
    return ate(est, gt, max_dt).rmse


def rpe_over_time(est, gt, delta: float = 1.0, max_dt: float = 0.02) -> list[tuple[float, float]]:
    """Translational error of relative motions over ``delta`` seconds:
    |trans((Q_i^-1 Q_j)^-1 (P_i^-1 P_j))| for each associated i whose
    partner j at t_i + delta exists (within max_dt)."""
    te, pe, re = _arrays(est)
    tg, pg, rg = _arrays(gt)
    pairs = associate(list(te), list(tg), max_dt)
    if len(pairs) < 2:
        raise EvaluationError("need at least 2 associated poses")
    ie = np.array([i for i, _ in pairs])
    ig = np.array([j for _, j in pairs])
    t = te[ie]
    out = []
    for k in range(len(t)):
        m = int(np.argmin(np.abs(t - (t[k] + delta))))
        if m == k or abs(t[m] - (t[k] + delta)) > max_dt:
            continue
        P = Pose(re[ie[k]], pe[ie[k]]).inverse() @ Pose(re[ie[m]], pe[ie[m]])
        Q = Pose(rg[ig[k]], pg[ig[k]]).inverse() @ Pose(rg[ig[m]], pg[ig[m]])
        out.append((float(t[k]), float(np.linalg.norm((Q.inverse() @ P).translation))))
    return out


def nearest_distances(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0 or len(reference) == 0:
        raise EvaluationError("point clouds must be non-empty")
    d, _ = cKDTree(reference).query(points, k=1)
    return d


def model_distance_cdf(model: np.ndarray, reference: np.ndarray, bin_edges) -> np.ndarray:
    """Percentage of model points within each distance edge of the reference."""
    d = np.sort(nearest_distances(model, reference))
    edges = np.asarray(bin_edges, dtype=np.float64)
    return 100.0 * np.searchsorted(d, edges, side="right") / len(d)


# ------------------------------------------------------------------ CSV


def write_ate_csv(path, rows: list[tuple[str, float]]) -> None:
    Path(path).write_text("scene,ate_rmse\n" + "".join(f"{s},{v:.6f}\n" for s, v in rows))


def write_rpe_csv(path, series: list[tuple[float, float]]) -> None:
    Path(path).write_text("time,rpe\n" + "".join(f"{t:.6f},{e:.6f}\n" for t, e in series))


def write_cdf_csv(path, edges, cdf) -> None:
    Path(path).write_text("distance,cumulative_percent\n" + "".join(f"{e:.6f},{c:.4f}\n" for e, c in zip(edges, cdf)))
