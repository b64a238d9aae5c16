"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 data error, 3 tracking failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset, evaluation, synth
from .dataset import DatasetError
from .pipeline import PipelineConfig, run_sequence, write_stats_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRACKING = 0, 1, 2, 3

log = logging.getLogger("dynfusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag name -> (section, field)
_OVERRIDES = {
    "voxel_size": ("volume", "voxel_size"),
    "truncation": ("volume", "truncation"),
    "max_weight": ("volume", "max_weight"),
    "w_c": ("registration", "w_c"),
    "theta": ("mask", "theta"),
    "gamma": ("mask", "gamma"),
}


def _build_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for flag, (sec, name) in _OVERRIDES.items():
        val = getattr(args, flag)
        if val is not None:
            cfg = dataclasses.replace(cfg, **{sec: dataclasses.replace(getattr(cfg, sec), **{name: val})})
    if args.no_dynamics:
        cfg = dataclasses.replace(cfg, dynamics_enabled=False)
    if args.refine is not None or args.refine_n is not None:
        ref = cfg.refinement
        ref = dataclasses.replace(ref, enabled=ref.enabled if args.refine is None else args.refine,
                                  n=ref.n if args.refine_n is None else args.refine_n)
        cfg = dataclasses.replace(cfg, refinement=ref)
    return cfg


def _cmd_run(args) -> int:
    try:
        cfg = _build_config(args)
    except (ValueError, TypeError, OSError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    if not Path(args.sequence).is_dir():
        raise UsageError(f"no such sequence directory: {args.sequence}")
    manifest = dataset.load_manifest(args.sequence)
    if args.refine is None and not args.config and manifest.intrinsics == dataset.FR3_INTRINSICS:
        # recorded sensor data has out-of-range pixels; synthetic sequences ship intrinsics.txt
        cfg = dataclasses.replace(cfg, refinement=dataclasses.replace(cfg.refinement, enabled=True))
        log.info("no intrinsics.txt: sensor sequence, depth refinement enabled")
    n = len(manifest) if args.max_frames is None else min(len(manifest), args.max_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    if args.save_masks:
        (out / "masks").mkdir(exist_ok=True)
    if args.save_residuals:
        (out / "residuals").mkdir(exist_ok=True)

    def frames():
        for i in range(n):
            yield manifest.frame(i)

    def on_frame(i, pose, mask, stats, st):
        ts = manifest.entries[i].timestamp
        if args.save_masks:
            dataset.write_mask(out / "masks" / f"{ts:.6f}.png", mask)
        if args.save_residuals and st.last_residuals is not None and i > 0:
            r = st.last_residuals
            img = np.clip(np.where(r.valid, r.values, 0.0) * 1e6, 0, 65535).astype(np.uint16)
            Image.fromarray(img).save(out / "residuals" / f"{ts:.6f}.png")
        log.info("frame %d/%d t=%.6f residuals=%d mask=%.3f lost=%s", i + 1, n, ts, stats.residuals,
                 stats.mask_fraction, stats.tracking_lost)

    traj, volume, state = run_sequence(cfg, frames(), on_frame)
    dataset.write_trajectory(traj, out / "trajectory.txt")
    write_stats_csv(out / "stats.csv", state.stats)
    if not args.no_mesh:
        from .mesh import extract_mesh, write_ply
        write_ply(extract_mesh(volume, args.min_weight), out / "mesh.ply")
    if args.save_volume:
        volume.save(out / "volume.tsdf")
    lost = sum(s.tracking_lost for s in state.stats)
    print(f"processed {n} frames, {lost} tracking losses, {volume.num_blocks} blocks")
    if manifest.groundtruth is not None:
        try:
            gt = dataset.read_trajectory(manifest.groundtruth)
            print(f"ate_rmse {evaluation.ate_rmse(traj, gt):.6f}")
        except evaluation.EvaluationError as exc:
            log.warning("ground truth evaluation skipped: %s", exc)
    if n > 1 and lost / (n - 1) > args.max_lost_fraction:
        print(f"tracking failed on {lost} of {n - 1} frames", file=sys.stderr)
        return EXIT_TRACKING
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.script:
        try:
            script = synth.parse_script(Path(args.script).read_text())
        except OSError as exc:
            raise DatasetError(str(exc)) from exc
        except ValueError as exc:
            raise UsageError(f"{args.script}: {exc}") from exc
    else:
        script = synth.textured_room_orbit(args.frames, args.width, args.height, args.noise, args.dropout,
                                           args.seed, moving_sphere=args.preset == "room-sphere")
    synth.generate_sequence(script, args.out)
    print(f"wrote {len(script.timestamps)} frames to {args.out}")
    return EXIT_OK


def _read_traj(path):
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return dataset.read_trajectory(path)


def _cmd_eval_ate(args) -> int:
    est, gt = _read_traj(args.estimate), _read_traj(args.groundtruth)
    rmse = evaluation.ate_rmse(est, gt, args.max_dt)
    print(f"{rmse:.6f}")
    if args.csv:
        evaluation.write_ate_csv(args.csv, [(args.scene, rmse)])
    return EXIT_OK


def _cmd_eval_rpe(args) -> int:
    est, gt = _read_traj(args.estimate), _read_traj(args.groundtruth)
    series = evaluation.rpe_over_time(est, gt, args.delta, args.max_dt)
    errs = np.array([e for _, e in series])
    print(f"pairs {len(series)} mean {errs.mean() if len(errs) else float('nan'):.6f} "
          f"max {errs.max() if len(errs) else float('nan'):.6f}")
    if args.csv:
        evaluation.write_rpe_csv(args.csv, series)
    return EXIT_OK


def _cmd_eval_model(args) -> int:
    from .mesh import read_ply

    for p in (args.model, args.groundtruth):
        if not Path(p).exists():
            raise UsageError(f"no such file: {p}")
    model = read_ply(args.model).vertices
    ref = read_ply(args.groundtruth).vertices
    edges = np.linspace(0.0, args.max_distance, args.bins + 1)
    cdf = evaluation.model_distance_cdf(model, ref, edges)
    d = evaluation.nearest_distances(model, ref)
    print(f"points {len(model)} mean {d.mean():.6f} median {np.median(d):.6f}")
    if args.csv:
        evaluation.write_cdf_csv(args.csv, edges, cdf)
    return EXIT_OK


def _cmd_export_mesh(args) -> int:
    from .mesh import extract_mesh, write_ply, write_pointcloud
    from .tsdf import TsdfVolume

    if not Path(args.volume).exists():
        raise UsageError(f"no such file: {args.volume}")
    try:
        vol = TsdfVolume.load(args.volume)
    except (ValueError, OSError) as exc:
        raise DatasetError(f"cannot load volume: {exc}") from exc
    mesh = extract_mesh(vol, args.min_weight)
    if args.points:
        write_pointcloud(mesh.vertices, mesh.colors, args.out, args.ascii)
    else:
        write_ply(mesh, args.out, args.ascii)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynfusion", description="Dense RGB-D SLAM on a colour TSDF with dynamic-object masking.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=None, help="numba worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="track and reconstruct a sequence")
    r.add_argument("sequence", help="TUM-layout directory")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="key = value configuration file")
    r.add_argument("--voxel-size", dest="voxel_size", type=float)
    r.add_argument("--truncation", type=float)
    r.add_argument("--max-weight", dest="max_weight", type=int)
    r.add_argument("--w-c", dest="w_c", type=float)
    r.add_argument("--theta", type=float)
    r.add_argument("--gamma", type=float)
    r.add_argument("--no-dynamics", action="store_true")
    r.add_argument("--refine", dest="refine", action="store_true", default=None,
                   help="depth refinement (default: on for sequences without intrinsics.txt)")
    r.add_argument("--no-refine", dest="refine", action="store_false")
    r.add_argument("--refine-n", dest="refine_n", type=int)
    r.add_argument("--max-frames", type=int)
    r.add_argument("--min-weight", type=int, default=2)
    r.add_argument("--no-mesh", action="store_true")
    r.add_argument("--save-volume", action="store_true")
    r.add_argument("--save-masks", action="store_true")
    r.add_argument("--save-residuals", action="store_true")
    r.add_argument("--max-lost-fraction", type=float, default=0.5)
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("out")
    s.add_argument("--script", help="scene script file")
    s.add_argument("--preset", choices=("room", "room-sphere"), default="room")
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("--height", type=int, default=480)
    s.add_argument("--noise", type=float, default=0.001, help="depth noise coefficient k in sigma = k z^2")
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)

    a = sub.add_parser("eval-ate", help="absolute trajectory error")
    a.add_argument("estimate")
    a.add_argument("groundtruth")
    a.add_argument("--max-dt", type=float, default=0.02)
    a.add_argument("--csv")
    a.add_argument("--scene", default="sequence")
    a.set_defaults(func=_cmd_eval_ate)

    e = sub.add_parser("eval-rpe", help="relative translational error over time")
    e.add_argument("estimate")
    e.add_argument("groundtruth")
    e.add_argument("--delta", type=float, default=1.0)
    e.add_argument("--max-dt", type=float, default=0.02)
    e.add_argument("--csv")
    e.set_defaults(func=_cmd_eval_rpe)

    m = sub.add_parser("eval-model", help="cumulative model-to-reference distance")
    m.add_argument("model", help="PLY")
    m.add_argument("groundtruth", help="PLY")
    m.add_argument("--max-distance", type=float, default=0.1)
    m.add_argument("--bins", type=int, default=50)
    m.add_argument("--csv")
    m.set_defaults(func=_cmd_eval_model)

    x = sub.add_parser("export-mesh", help="mesh a saved volume")
    x.add_argument("volume")
    x.add_argument("out")
    x.add_argument("--min-weight", type=int, default=2)
    x.add_argument("--ascii", action="store_true")
    x.add_argument("--points", action="store_true", help="write vertices only")
    x.set_defaults(func=_cmd_export_mesh)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.threads:
        try:
            import numba
            numba.set_num_threads(args.threads)
        except (ImportError, ValueError) as exc:
            log.warning("cannot set thread count: %s", exc)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dynfusion: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, evaluation.EvaluationError, OSError) as exc:
        print(f"dynfusion: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
