"""Synthetic RGB-D sequences with analytic geometry and known trajectories.

A scene is a list of primitives (infinite planes, spheres, axis-aligned
boxes in their object frame) plus a camera trajectory. Primitives with
motion keyframes are dynamic; their pose is interpolated geodesically
between keyframes. Rendering casts one ray per pixel (pixel (u, v) sits at
(u, v)) and keeps the nearest hit.

Script text format, one statement per line, ``#`` starts a comment::

    intrinsics FX FY CX CY WIDTH HEIGHT
    depth_scale 5000
    noise sigma=0.001 dropout=0.0 seed=0
    plane  name=floor point=0,1.2,0 normal=0,-1,0 pattern=checker size=0.25 color=200,80,60 color2=60,60,180
    sphere name=ball center=0,0,0 radius=0.15 pattern=uniform color=220,220,40
    box    name=crate center=0.4,0.9,1.8 half=0.2,0.3,0.2 pattern=sine size=0.3 color=90,160,90
    motion ball T TX TY TZ QX QY QZ QW
    camera T TX TY TZ QX QY QZ QW

Optional primitive keys: ``visible=T0:T1`` limits when it exists,
``dynamic=1`` forces the dynamic label. Depth noise is sigma * z^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frame import Frame
from .geometry import CameraIntrinsics, Pose, interpolate, look_at, pixel_rays, quaternion_to_rotation, rotation_to_quaternion


@dataclass
class Pattern:
    kind: str = "uniform"  # uniform | checker | sine
    size: float = 0.2
    color: tuple = (180, 180, 180)
    color2: tuple = (60, 60, 60)

    def shade(self, p: np.ndarray) -> np.ndarray:
        c1 = np.asarray(self.color, dtype=np.float64)
        c2 = np.asarray(self.color2, dtype=np.float64)
        if self.kind == "uniform":
            return np.broadcast_to(c1, p.shape).copy()
        if self.kind == "checker":
            parity = np.floor(p / self.size).astype(np.int64).sum(axis=1) & 1
            return np.where(parity[:, None] == 1, c2, c1)
        if self.kind == "sine":
            k = 2 * np.pi / self.size
            s = 0.5 + 0.5 * np.sin(k * p[:, 0]) * np.sin(k * p[:, 1] + 0.7) * np.sin(k * p[:, 2] + 1.3)
            return c1 * s[:, None] + c2 * (1 - s[:, None])
        raise ValueError(f"unknown pattern {self.kind!r}")


@dataclass
class Primitive:
    kind: str  # plane | sphere | box
    name: str = ""
    params: dict = field(default_factory=dict)
    pattern: Pattern = field(default_factory=Pattern)
    motion: list = field(default_factory=list)  # [(t, Pose)] object-to-world keyframes
    visible: tuple = (-np.inf, np.inf)
    force_dynamic: bool = False

    def __post_init__(self):
        if self.kind == "sphere" and not self.params["radius"] > 0:
            raise ValueError("sphere radius must be positive")
        if self.kind == "box" and not np.all(np.asarray(self.params["half"]) > 0):
            raise ValueError("box extents must be positive")
        if self.kind == "plane":
            n = np.asarray(self.params["normal"], dtype=np.float64)
            self.params["normal"] = n / np.linalg.norm(n)

    @property
    def dynamic(self) -> bool:
        return self.force_dynamic or len(self.motion) > 0

    def pose_at(self, t: float) -> Pose:
        if not self.motion:
            return Pose()
        return _pose_along(self.motion, t)

    def exists_at(self, t: float) -> bool:
        return self.visible[0] <= t <= self.visible[1]

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter per ray (inf if none); o, d in
        the object frame."""
        if self.kind == "plane":
            p0 = np.asarray(self.params["point"], dtype=np.float64)
            n = self.params["normal"]
            dn = d @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((p0 - o) @ n) / dn
            return np.where((np.abs(dn) > 1e-12) & (t > 1e-9), t, np.inf)
        if self.kind == "sphere":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=np.float64)
            r = float(self.params["radius"])
            oc = o - c
            a = np.einsum("ij,ij->i", d, d)
            b = np.einsum("ij,ij->i", oc, d)
            cc = np.einsum("ij,ij->i", oc, oc) - r * r
            disc = b * b - a * cc
            sq = np.sqrt(np.maximum(disc, 0))
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
            t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
            return np.where(disc >= 0, t, np.inf)
        if self.kind == "box":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=np.float64)
            hw = np.asarray(self.params["half"], dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                ta = (c - hw - o) * inv
                tb = (c + hw - o) * inv
            tmin = np.nanmax(np.minimum(ta, tb), axis=1)
            tmax = np.nanmin(np.maximum(ta, tb), axis=1)
            t = np.where(tmin > 1e-9, tmin, tmax)
            return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)
        raise ValueError(f"unknown primitive {self.kind!r}")


def _pose_along(keys: list, t: float) -> Pose:
    times = [k[0] for k in keys]
    if t <= times[0]:
        return keys[0][1]
    if t >= times[-1]:
        return keys[-1][1]
    i = int(np.searchsorted(times, t, side="right")) - 1
    t0, p0 = keys[i]
    t1, p1 = keys[i + 1]
    return interpolate(p0, p1, (t - t0) / (t1 - t0))


@dataclass
class SceneScript:
    intrinsics: CameraIntrinsics
    primitives: list = field(default_factory=list)
    camera: list = field(default_factory=list)  # [(t, Pose)] camera-to-world
    noise_sigma: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        times = [c[0] for c in self.camera]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("camera timestamps must be strictly increasing")

    @property
    def timestamps(self) -> list[float]:
        return [c[0] for c in self.camera]

    def camera_pose(self, t: float) -> Pose:
        return _pose_along(self.camera, t)

    def primitive(self, name: str) -> Primitive:
        for p in self.primitives:
            if p.name == name:
                return p
        raise KeyError(name)


@dataclass
class Rendered:
    frame: Frame
    dynamic: np.ndarray  # (H, W) bool, winning primitive is dynamic
    depth: np.ndarray  # (H, W) noiseless analytic depth, 0 where no hit
    ids: np.ndarray  # (H, W) index of the winning primitive, -1 if none


def render(script: SceneScript, t: float, frame_index: int | None = None, noise: bool = True) -> Rendered:
    k = script.intrinsics
    cam = script.camera_pose(t)
    rays_c = pixel_rays(k).reshape(-1, 3)
    d_w = rays_c @ cam.rotation.T
    o_w = np.broadcast_to(cam.translation, d_w.shape)
    n = d_w.shape[0]
    best = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int64)
    for i, prim in enumerate(script.primitives):
        if not prim.exists_at(t):
            continue
        pose = prim.pose_at(t)
        # ray into the object frame; the parameter (= camera depth) is unchanged
        o_l = (o_w - pose.translation) @ pose.rotation
        d_l = d_w @ pose.rotation
        ti = prim.intersect(o_l, d_l)
        closer = ti < best
        best[closer] = ti[closer]
        ids[closer] = i
    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    rgb = np.zeros((n, 3))
    dyn = np.zeros(n, dtype=bool)
    for i, prim in enumerate(script.primitives):
        sel = ids == i
        if not sel.any():
            continue
        pose = prim.pose_at(t)
        p_w = o_w[sel] + d_w[sel] * best[sel, None]
        p_l = (p_w - pose.translation) @ pose.rotation
        rgb[sel] = prim.pattern.shade(p_l)
        dyn[sel] = prim.dynamic
    clean = depth.reshape(k.shape).astype(np.float32)
    noisy = clean.astype(np.float64).copy()
    if noise and (script.noise_sigma > 0 or script.dropout > 0):
        idx = frame_index if frame_index is not None else int(round(t * 1e6))
        rng = np.random.default_rng([script.seed, idx])
        noisy += rng.normal(size=noisy.shape) * script.noise_sigma * noisy**2
        if script.dropout > 0:
            noisy[rng.random(noisy.shape) < script.dropout] = 0.0
        noisy = np.where(clean > 0, np.maximum(noisy, 0.0), 0.0)
    color = np.clip(np.rint(rgb), 0, 255).astype(np.uint8).reshape(k.shape + (3,))
    frame = Frame(noisy.astype(np.float32), color, k, t)
    return Rendered(frame, dyn.reshape(k.shape), clean, ids.reshape(k.shape))


# ------------------------------------------------------------------ text format


def _vec(s: str) -> tuple:
    return tuple(float(x) for x in s.split(","))


def _pose_tokens(tok: list[str]) -> tuple[float, Pose]:
    t, tx, ty, tz, qx, qy, qz, qw = map(float, tok)
    return t, Pose(quaternion_to_rotation([qx, qy, qz, qw]), [tx, ty, tz])


def parse_script(text: str) -> SceneScript:
    intr = None
    depth_scale = 5000.0
    noise = {"sigma": 0.0, "dropout": 0.0, "seed": 0}
    prims: list[Primitive] = []
    motions: dict[str, list] = {}
    camera = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "intrinsics":
                fx, fy, cx, cy, w, h = rest
                intr = (float(fx), float(fy), float(cx), float(cy), int(w), int(h))
            elif head == "depth_scale":
                depth_scale = float(rest[0])
            elif head == "noise":
                for kv in rest:
                    key, val = kv.split("=")
                    noise[key] = int(val) if key == "seed" else float(val)
            elif head in ("plane", "sphere", "box"):
                kv = dict(tok.split("=", 1) for tok in rest)
                pat = Pattern(kv.pop("pattern", "uniform"), float(kv.pop("size", 0.2)),
                              _vec(kv.pop("color", "180,180,180")), _vec(kv.pop("color2", "60,60,60")))
                vis = kv.pop("visible", None)
                visible = tuple(float(x) for x in vis.split(":")) if vis else (-np.inf, np.inf)
                dyn = kv.pop("dynamic", "0") not in ("0", "false", "no")
                name = kv.pop("name", f"{head}{len(prims)}")
                params = {}
                for key, val in kv.items():
                    params[key] = float(val) if key == "radius" else _vec(val)
                prims.append(Primitive(head, name, params, pat, visible=visible, force_dynamic=dyn))
            elif head == "motion":
                motions.setdefault(rest[0], []).append(_pose_tokens(rest[1:]))
            elif head == "camera":
                camera.append(_pose_tokens(rest))
            else:
                raise ValueError(f"unknown statement {head!r}")
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if intr is None:
        raise ValueError("script has no intrinsics line")
    for p in prims:
        p.motion = sorted(motions.pop(p.name, []), key=lambda k: k[0])
    if motions:
        raise ValueError(f"motion for unknown primitive(s): {sorted(motions)}")
    k = CameraIntrinsics(*intr, depth_scale=depth_scale)
    return SceneScript(k, prims, camera, noise["sigma"], noise["dropout"], int(noise["seed"]))


def _fmt_pose(t: float, p: Pose) -> str:
    q = rotation_to_quaternion(p.rotation)
    vals = list(p.translation) + list(q)
    return f"{t:.6f} " + " ".join(f"{v:.12f}" for v in vals)


def format_script(script: SceneScript) -> str:
    k = script.intrinsics
    lines = [
        f"intrinsics {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}",
        f"depth_scale {k.depth_scale!r}",
        f"noise sigma={script.noise_sigma!r} dropout={script.dropout!r} seed={script.seed}",
    ]
    for p in script.primitives:
        toks = [p.kind, f"name={p.name}"]
        for key, val in p.params.items():
            toks.append(f"{key}={val!r}" if np.isscalar(val) else f"{key}=" + ",".join(repr(float(x)) for x in val))
        pat = p.pattern
        toks += [f"pattern={pat.kind}", f"size={pat.size!r}",
                 "color=" + ",".join(str(int(c)) for c in pat.color),
                 "color2=" + ",".join(str(int(c)) for c in pat.color2)]
        if np.isfinite(p.visible).any():
            toks.append(f"visible={p.visible[0]!r}:{p.visible[1]!r}")
        if p.force_dynamic:
            toks.append("dynamic=1")
        lines.append(" ".join(toks))
        lines += [f"motion {p.name} {_fmt_pose(t, pose)}" for t, pose in p.motion]
    lines += [f"camera {_fmt_pose(t, pose)}" for t, pose in script.camera]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ presets

DEFAULT_INTRINSICS_640 = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def default_intrinsics(width: int = 640, height: int = 480) -> CameraIntrinsics:
    f = 525.0 * width / 640.0
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def room_primitives() -> list[Primitive]:
    """A 3.2 x 2.4 x 3.4 m textured room with some furniture.

    World frame: x right, y down, z forward; the floor is y = +1.2.
    """
    P = Primitive
    return [
        P("plane", "floor", {"point": (0, 1.2, 0), "normal": (0, -1, 0)}, Pattern("checker", 0.25, (200, 90, 60), (70, 60, 170))),
        P("plane", "ceiling", {"point": (0, -1.2, 0), "normal": (0, 1, 0)}, Pattern("sine", 0.6, (230, 230, 210), (120, 120, 140))),
        P("plane", "back", {"point": (0, 0, 2.4), "normal": (0, 0, -1)}, Pattern("checker", 0.3, (60, 170, 80), (230, 220, 90))),
        P("plane", "front", {"point": (0, 0, -1.0), "normal": (0, 0, 1)}, Pattern("checker", 0.3, (90, 90, 90), (200, 200, 200))),
        P("plane", "left", {"point": (-1.6, 0, 0), "normal": (1, 0, 0)}, Pattern("sine", 0.5, (220, 120, 120), (80, 40, 120))),
        P("plane", "right", {"point": (1.6, 0, 0), "normal": (-1, 0, 0)}, Pattern("checker", 0.2, (240, 160, 40), (40, 120, 200))),
        P("box", "crate", {"center": (-0.7, 0.85, 1.7), "half": (0.3, 0.35, 0.3)}, Pattern("checker", 0.12, (150, 100, 50), (240, 200, 150))),
        P("box", "shelf", {"center": (0.9, 0.2, 2.15), "half": (0.35, 0.6, 0.25)}, Pattern("sine", 0.25, (70, 200, 200), (200, 50, 90))),
        P("sphere", "globe", {"center": (0.2, 0.95, 1.9), "radius": 0.25}, Pattern("checker", 0.1, (250, 250, 250), (30, 30, 30))),
    ]


def orbit_trajectory(n_frames: int, fps: float = 30.0, radius: float = 0.15, sweep_deg: float = 20.0,
                     center=(0.0, 0.0, 0.2), target=(0.0, 0.4, 2.0)) -> list[tuple[float, Pose]]:
    """Camera moving along a horizontal arc while looking at a fixed target."""
    out = []
    for i in range(n_frames):
        phi = np.deg2rad(-sweep_deg / 2 + sweep_deg * (i / max(n_frames - 1, 1)))
        eye = np.asarray(center) + radius * np.array([np.sin(phi), 0.3 * np.sin(2 * phi), -np.cos(phi) + 1.0])
        out.append((i / fps, look_at(eye, target)))
    return out


def textured_room_orbit(n_frames: int = 30, width: int = 640, height: int = 480, noise_sigma: float = 0.001,
                        dropout: float = 0.0, seed: int = 0, moving_sphere: bool = False,
                        fps: float = 30.0) -> SceneScript:
    """Static textured room seen by an orbiting camera; optionally a sphere
    flies across the view at roughly 1 m from the camera."""
    prims = room_primitives()
    if moving_sphere:
        t_end = (n_frames - 1) / fps
        a = Pose(np.eye(3), (-1.2, 0.1, 1.15))
        b = Pose(np.eye(3), (1.2, 0.1, 1.15))
        prims.append(Primitive("sphere", "ball", {"center": (0, 0, 0), "radius": 0.17},
                               Pattern("uniform", 0.2, (230, 40, 40)), motion=[(0.0, a), (t_end, b)]))
    return SceneScript(default_intrinsics(width, height), prims, orbit_trajectory(n_frames, fps),
                       noise_sigma, dropout, seed)


def generate_sequence(script: SceneScript, out_dir, labels: bool = True) -> Path:
    """Write a TUM-layout dataset (rgb/, depth/, rgb.txt, depth.txt,
    groundtruth.txt, intrinsics.txt, scene.txt and optional labels/)."""
    from . import dataset

    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    if labels:
        (out / "labels").mkdir(exist_ok=True)
    rgb_lines, depth_lines = [], []
    traj = []
    for i, t in enumerate(script.timestamps):
        r = render(script, t, frame_index=i)
        name = f"{t:.6f}.png"
        dataset.write_color(out / "rgb" / name, r.frame.color)
        dataset.write_depth(out / "depth" / name, r.frame.depth, script.intrinsics.depth_scale)
        if labels:
            dataset.write_mask(out / "labels" / name, r.dynamic)
        rgb_lines.append(f"{t:.6f} rgb/{name}")
        depth_lines.append(f"{t:.6f} depth/{name}")
        traj.append((t, script.camera_pose(t)))
    header = "# timestamp filename\n"
    (out / "rgb.txt").write_text(header + "\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text(header + "\n".join(depth_lines) + "\n")
    dataset.write_trajectory(traj, out / "groundtruth.txt")
    dataset.write_intrinsics(out / "intrinsics.txt", script.intrinsics)
    (out / "scene.txt").write_text(format_script(script))
    return out
