import csv
import dataclasses

import numpy as np
import pytest

from dynfusion import synth
from dynfusion.geometry import Pose
from dynfusion.pipeline import FrameStats, PipelineConfig, PipelineState, process_frame, run_sequence, write_stats_csv
from dynfusion.refinement import RefinementConfig
from dynfusion.registration import RegistrationConfig
from dynfusion.tsdf import VolumeConfig


def _frames(sc, n=None):
    for i, t in enumerate(sc.timestamps[:n]):
        yield synth.render(sc, t, i).frame


@pytest.fixture(scope="module")
def static_run():
    sc = synth.textured_room_orbit(12, 160, 120, noise_sigma=0.001)
    masks = []
    traj, vol, state = run_sequence(PipelineConfig(), _frames(sc), lambda i, p, m, s, st: masks.append(m))
    return sc, traj, vol, state, masks


def test_defaults_are_the_published_parameters():
    cfg = PipelineConfig()
    assert cfg.volume.voxel_size == 0.01
    assert cfg.volume.truncation == 0.1
    assert cfg.registration.w_c == 0.025
    assert cfg.mask.theta == 0.007
    assert cfg.mask.gamma == 0.5
    assert cfg.refinement.n == 10


def test_first_frame_identity_and_static_masks(static_run):
    sc, traj, vol, state, masks = static_run
    assert np.allclose(traj[0][1].matrix(), np.eye(4))
    assert not masks[0].any()
    for s in state.stats[1:]:
        assert s.mask_fraction < 0.01
        assert not s.tracking_lost and s.integrated
    times = [t for t, _ in traj]
    assert times == sorted(times) and len(set(times)) == len(times)


def test_static_tracking_accuracy(static_run):
    sc, traj, vol, state, masks = static_run
    g0 = sc.camera_pose(sc.timestamps[0])
    for t, p in traj:
        gt = g0.inverse() @ sc.camera_pose(t)
        assert np.linalg.norm((gt.inverse() @ p).translation) < 0.01


def test_one_frame_sequence():
    sc = synth.textured_room_orbit(1, 80, 60)
    traj, vol, state = run_sequence(None, _frames(sc))
    assert len(traj) == 1 and np.allclose(traj[0][1].matrix(), np.eye(4))
    assert vol.num_blocks > 0


def test_empty_and_failing_sources():
    with pytest.raises(ValueError):
        run_sequence(None, iter([]))

    def broken():
        sc = synth.textured_room_orbit(3, 80, 60)
        yield synth.render(sc, 0.0, 0).frame
        raise OSError("disk gone")

    with pytest.raises(IOError, match="frame 1"):
        run_sequence(None, broken())


def test_timestamps_must_increase():
    sc = synth.textured_room_orbit(2, 80, 60)
    st_ = PipelineState()
    fr = synth.render(sc, 0.0, 0).frame
    process_frame(st_, fr)
    with pytest.raises(ValueError):
        process_frame(st_, fr)


def test_dynamics_off_registers_once(monkeypatch):
    import dynfusion.pipeline as pl

    calls = []
    real = pl.register

    def counting(*a, **k):
        calls.append(a[3] is not None)
        return real(*a, **k)

    monkeypatch.setattr(pl, "register", counting)
    sc = synth.textured_room_orbit(3, 80, 60)
    run_sequence(PipelineConfig(dynamics_enabled=False), _frames(sc))
    assert calls == [False, False]
    calls.clear()
    run_sequence(PipelineConfig(), _frames(sc))
    assert calls == [False, True, False, True]


def test_mask_is_the_one_excluded(monkeypatch):
    import dynfusion.pipeline as pl

    seen = {}
    real_reg, real_int = pl.register, pl.TsdfVolume.integrate

    def reg(vol, frame, pose, mask, cfg):
        if mask is not None:
            seen["reg"] = mask
        return real_reg(vol, frame, pose, mask, cfg)

    def integ(self, frame, pose, mask=None):
        seen["int"] = mask
        return real_int(self, frame, pose, mask)

    monkeypatch.setattr(pl, "register", reg)
    monkeypatch.setattr(pl.TsdfVolume, "integrate", integ)
    sc = synth.textured_room_orbit(2, 80, 60, moving_sphere=True)
    st_ = PipelineState()
    frames = list(_frames(sc))
    process_frame(st_, frames[0])
    _, mask, _ = process_frame(st_, frames[1])
    assert seen["reg"] is mask and seen["int"] is mask


def test_tracking_loss_holds_pose():
    sc = synth.textured_room_orbit(3, 80, 60)
    frames = list(_frames(sc))
    st_ = PipelineState()
    process_frame(st_, frames[0])
    blank = dataclasses.replace(frames[1], depth=np.zeros_like(frames[1].depth))
    blocks = st_.volume.num_blocks
    pose, mask, stats = process_frame(st_, blank)
    assert stats.tracking_lost and not stats.integrated
    assert np.array_equal(pose.matrix(), st_.trajectory[0][1].matrix())
    assert st_.volume.num_blocks == blocks
    _, _, stats = process_frame(st_, frames[2])
    assert not stats.tracking_lost


def test_config_text_round_trip(tmp_path):
    cfg = PipelineConfig(volume=VolumeConfig(voxel_size=0.02, truncation=0.08),
                         registration=RegistrationConfig(w_c=0.1, gradient="central"),
                         refinement=RefinementConfig(n=4, enabled=True), dynamics_enabled=False)
    assert PipelineConfig.from_text(cfg.to_text()) == cfg
    p = tmp_path / "c.txt"
    p.write_text("# comment\nvoxel_size = 0.02   # trailing\nmax_depth = 4.0\nmask.theta=0.01\ndynamics_enabled = no\n")
    got = PipelineConfig.load(p)
    assert got.volume.voxel_size == 0.02 and got.mask.theta == 0.01 and not got.dynamics_enabled
    assert got.volume.max_depth == 4.0 and got.registration.max_depth == 4.0
    for bad in ("nonsense = 1", "volume.voxel_size", "dynamics_enabled = maybe", "volume.truncation = 0.001"):
        with pytest.raises(ValueError):
            PipelineConfig.from_text(bad)


def test_stats_csv(tmp_path, static_run):
    state = static_run[3]
    p = tmp_path / "s.csv"
    write_stats_csv(p, state.stats)
    rows = list(csv.DictReader(open(p)))
    assert len(rows) == len(state.stats)
    assert list(rows[0]) == [f.name for f in dataclasses.fields(FrameStats)]
    assert int(rows[3]["index"]) == 3
