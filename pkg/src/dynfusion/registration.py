"""Direct frame-to-model registration.

The frame's points are pushed through the current camera-to-world pose and
scored against the volume: squared interpolated sdf (depth term) plus
``w_c`` times the squared intensity difference (photometric term). The
6-DoF increment is a left-multiplied twist ``T <- exp(xi) T`` and is solved
with Levenberg-Marquardt on a three-level decimation pyramid.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .frame import Frame
from .geometry import CameraIntrinsics, Pose, exp_map
from .tsdf import TsdfVolume

log = logging.getLogger(__name__)


class InsufficientOverlap(RuntimeError):
    def __init__(self, count: int, required: int):
        super().__init__(f"only {count} valid residuals, need {required}")
        self.count = count
        self.required = required


class TrackingLost(InsufficientOverlap):
    pass


class DegenerateGeometry(UserWarning):
    pass


@dataclass
class RegistrationConfig:
    w_c: float = 0.025
    pyramid_levels: int = 3
    max_iterations: int = 20
    lm_lambda_init: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 2.0
    convergence_eps: float = 1e-5
    min_residuals: int = 100
    # intensities enter the photometric term scaled to [0, 1]
    intensity_scale: float = 1.0 / 255.0
    # "analytic": exact derivative of the trilinear interpolant;
    # "central": central differences with one-voxel step
    gradient: str = "analytic"
    min_depth: float = 0.1
    max_depth: float = 5.0

    def __post_init__(self):
        if self.w_c < 0:
            raise ValueError("w_c must be non-negative")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        for name in ("max_iterations", "lm_lambda_init", "lm_lambda_up", "lm_lambda_down", "convergence_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gradient not in ("analytic", "central"):
            raise ValueError("gradient must be 'analytic' or 'central'")


@dataclass
class ResidualImage:
    """Per-pixel squared sdf residual (m^2); ``valid`` marks pixels that had
    a valid depth and a valid volume sample."""

    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def histogram(self, bins=50, range_=None):
        v = self.values[self.valid]
        return np.histogram(v, bins=bins, range=range_)


class PointSet(NamedTuple):
    points: np.ndarray  # (N, 3) camera frame
    intensity: np.ndarray  # (N,) raw 0..255
    pixels: np.ndarray  # (N,) flat index into the full-resolution image


class RegistrationResult(NamedTuple):
    pose: Pose
    residuals: ResidualImage
    converged: bool
    iterations: int
    energy: float


def _backproject(us, vs, z, k: CameraIntrinsics) -> np.ndarray:
    return np.stack([(us - k.cx) / k.fx * z, (vs - k.cy) / k.fy * z, z], axis=1)


def build_pyramid(frame: Frame, mask: np.ndarray | None, levels: int,
                  min_depth: float = 0.1, max_depth: float = 5.0) -> list[PointSet]:
    """Point sets for decimation factors 1, 2, 4, ...

    Each coarse cell keeps its closest valid unmasked pixel (back-projected at
    that pixel's own coordinate) and the mean intensity of its unmasked
    pixels. Masked pixels never re-enter at any level.
    """
    h, w = frame.shape
    k = frame.intrinsics
    depth = frame.depth.astype(np.float64)
    inten = frame.intensity()
    usable = (depth >= min_depth) & (depth <= max_depth)
    keep = np.ones((h, w), dtype=bool) if mask is None else ~mask
    usable &= keep
    out = []
    for lvl in range(levels):
        f = 1 << lvl
        hh, ww = h // f, w // f
        if hh == 0 or ww == 0:
            break
        d = np.where(usable, depth, np.inf)[: hh * f, : ww * f]
        cells = d.reshape(hh, f, ww, f).transpose(0, 2, 1, 3).reshape(hh, ww, f * f)
        pick = np.argmin(cells, axis=2)
        best = np.take_along_axis(cells, pick[..., None], axis=2)[..., 0]
        ok = np.isfinite(best)
        cv, cu = np.nonzero(ok)
        vv = cv * f + pick[ok] // f
        uu = cu * f + pick[ok] % f
        kk = keep[: hh * f, : ww * f].reshape(hh, f, ww, f).transpose(0, 2, 1, 3).reshape(hh, ww, f * f)
        ii = inten[: hh * f, : ww * f].reshape(hh, f, ww, f).transpose(0, 2, 1, 3).reshape(hh, ww, f * f)
        mean_i = (ii * kk).sum(axis=2) / np.maximum(kk.sum(axis=2), 1)
        pts = _backproject(uu.astype(np.float64), vv.astype(np.float64), best[ok], k)
        out.append(PointSet(pts, mean_i[ok], vv * w + uu))
    return out


def _frame_points(frame: Frame, mask, config: RegistrationConfig, level: int = 0) -> PointSet:
    return build_pyramid(frame, mask, level + 1, config.min_depth, config.max_depth)[level]


class _Terms(NamedTuple):
    r_d: np.ndarray
    r_c: np.ndarray
    J_d: np.ndarray | None
    J_c: np.ndarray | None
    valid: np.ndarray
    world: np.ndarray


def _evaluate(volume: TsdfVolume, ps: PointSet, pose: Pose, config: RegistrationConfig, jac: bool) -> _Terms:
    world = pose.apply(ps.points)
    res, valid = volume.sample(world, want_color=True)
    sc = config.intensity_scale
    r_d = res[valid, 0]
    r_c = sc * (res[valid, 1] - ps.intensity[valid])
    J_d = J_c = None
    if jac:
        y = world[valid]
        if config.gradient == "central":
            g_d, ok_d = volume.sample_sdf_gradient(y)
            g_c = _central_intensity_gradient(volume, y)
            g_d = np.where(ok_d[:, None], g_d, 0.0)
        else:
            g_d = res[valid, 2:5]
            g_c = res[valid, 5:8]
        g_c = sc * g_c
        # d(exp(xi) y)/d xi at xi = 0 is [I | -[y]x], so J = [g, y x g]
        J_d = np.hstack([g_d, np.cross(y, g_d)])
        J_c = np.hstack([g_c, np.cross(y, g_c)])
    return _Terms(r_d, r_c, J_d, J_c, valid, world)


def _central_intensity_gradient(volume: TsdfVolume, pts: np.ndarray) -> np.ndarray:
    h = volume.config.voxel_size
    g = np.zeros_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fp, _ = volume.sample_intensity(pts + e)
        fm, _ = volume.sample_intensity(pts - e)
        g[:, k] = (fp - fm) / (2 * h)
    return g


def _energy(t: _Terms, w_c: float) -> tuple[float, float, float]:
    e_d = float(np.dot(t.r_d, t.r_d))
    e_c = float(np.dot(t.r_c, t.r_c))
    return e_d + w_c * e_c, e_d, e_c


def _common_energies(a: _Terms, b: _Terms, w_c: float) -> tuple[float, float, int]:
    """Joint error of two evaluations restricted to pixels valid in both."""
    both = a.valid & b.valid
    ia = (np.cumsum(a.valid) - 1)[both]
    ib = (np.cumsum(b.valid) - 1)[both]
    ea = float(np.dot(a.r_d[ia], a.r_d[ia]) + w_c * np.dot(a.r_c[ia], a.r_c[ia]))
    eb = float(np.dot(b.r_d[ib], b.r_d[ib]) + w_c * np.dot(b.r_c[ib], b.r_c[ib]))
    return ea, eb, int(both.sum())


def _normal_equations(t: _Terms, w_c: float) -> tuple[np.ndarray, np.ndarray]:
    H = t.J_d.T @ t.J_d + w_c * (t.J_c.T @ t.J_c)
    b = t.J_d.T @ t.r_d + w_c * (t.J_c.T @ t.r_c)
    return H, b


def _check_overlap(n: int, config: RegistrationConfig, exc=InsufficientOverlap):
    if n < config.min_residuals:
        raise exc(n, config.min_residuals)


def evaluate_depth_error(volume: TsdfVolume, frame: Frame, pose: Pose, config: RegistrationConfig | None = None,
                         mask: np.ndarray | None = None) -> tuple[float, ResidualImage]:
    """E_d and the full-resolution residual image at ``pose``."""
    config = config or RegistrationConfig()
    ps = _frame_points(frame, mask, config)
    t = _evaluate(volume, ps, pose, config, jac=False)
    _check_overlap(int(t.valid.sum()), config)
    return float(np.dot(t.r_d, t.r_d)), _residual_image(frame.shape, ps, t)


def evaluate_color_error(volume: TsdfVolume, frame: Frame, pose: Pose, config: RegistrationConfig | None = None,
                         mask: np.ndarray | None = None) -> float:
    config = config or RegistrationConfig()
    ps = _frame_points(frame, mask, config)
    t = _evaluate(volume, ps, pose, config, jac=False)
    _check_overlap(int(t.valid.sum()), config)
    return float(np.dot(t.r_c, t.r_c))


def joint_error(volume: TsdfVolume, frame: Frame, pose: Pose, config: RegistrationConfig | None = None,
                mask: np.ndarray | None = None, level: int = 0) -> float:
    """E = E_d + w_c * E_c over the (masked) pixels of one pyramid level."""
    config = config or RegistrationConfig()
    t = _evaluate(volume, _frame_points(frame, mask, config, level), pose, config, jac=False)
    _check_overlap(int(t.valid.sum()), config)
    return _energy(t, config.w_c)[0]


def linearize(volume: TsdfVolume, frame: Frame, pose: Pose, config: RegistrationConfig | None = None,
              mask: np.ndarray | None = None, level: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton normal matrix H and vector b at xi = 0.

    The gradient of the joint error with respect to the twist is 2 b.
    """
    config = config or RegistrationConfig()
    t = _evaluate(volume, _frame_points(frame, mask, config, level), pose, config, jac=True)
    _check_overlap(int(t.valid.sum()), config)
    H, b = _normal_equations(t, config.w_c)
    _warn_if_degenerate(H)
    return H, b


def _warn_if_degenerate(H: np.ndarray, rcond: float = 1e-10) -> bool:
    ev = np.linalg.eigvalsh(H)
    if ev[-1] <= 0 or ev[0] < rcond * ev[-1]:
        warnings.warn(f"normal matrix is rank deficient (eigenvalues {ev})", DegenerateGeometry, stacklevel=3)
        return True
    return False


def _solve(H: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    d = np.diag(H)
    A = H + lam * np.diag(np.where(d > 0, d, 1e-12))
    try:
        return np.linalg.solve(A, -b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, -b, rcond=None)[0]


def _residual_image(shape, ps: PointSet, t: _Terms) -> ResidualImage:
    vals = np.zeros(shape[0] * shape[1], dtype=np.float32)
    valid = np.zeros(shape[0] * shape[1], dtype=bool)
    pix = ps.pixels[t.valid]
    vals[pix] = t.r_d**2
    valid[pix] = True
    return ResidualImage(vals.reshape(shape), valid.reshape(shape))


def register(volume: TsdfVolume, frame: Frame, initial_pose: Pose, mask: np.ndarray | None = None,
             config: RegistrationConfig | None = None) -> RegistrationResult:
    """Coarse-to-fine LM. Raises TrackingLost when the coarsest level has too
    few valid residuals."""
    config = config or RegistrationConfig()
    if volume.num_blocks == 0:
        raise TrackingLost(0, config.min_residuals)
    pyramid = build_pyramid(frame, mask, config.pyramid_levels, config.min_depth, config.max_depth)
    pose = initial_pose
    converged = False
    iterations = 0
    energy = np.inf
    for level in range(len(pyramid) - 1, -1, -1):
        ps = pyramid[level]
        terms = _evaluate(volume, ps, pose, config, jac=True)
        n = int(terms.valid.sum())
        if n < config.min_residuals:
            if level == len(pyramid) - 1:
                raise TrackingLost(n, config.min_residuals)
            continue
        energy = _energy(terms, config.w_c)[0]
        lam = config.lm_lambda_init
        converged = False
        for _ in range(config.max_iterations):
            iterations += 1
            H, b = _normal_equations(terms, config.w_c)
            delta = _solve(H, b, lam)
            candidate = exp_map(delta) @ pose
            trial = _evaluate(volume, ps, candidate, config, jac=True)
            # compare on the pixels valid at both poses; otherwise a step that
            # pushes points into unobserved space looks like an improvement
            e_old, e_new, n_common = _common_energies(terms, trial, config.w_c)
            if n_common >= config.min_residuals and e_new < e_old:
                pose, terms = candidate, trial
                energy = _energy(trial, config.w_c)[0]
                lam /= config.lm_lambda_down
            else:
                lam *= config.lm_lambda_up
            if np.linalg.norm(delta) < config.convergence_eps:
                converged = True
                break
        log.debug("level %d: energy %.6g after %d iterations", level, energy, iterations)
    full = pyramid[0]
    final = _evaluate(volume, full, pose, config, jac=False)
    return RegistrationResult(pose, _residual_image(frame.shape, full, final), converged, iterations, energy)
