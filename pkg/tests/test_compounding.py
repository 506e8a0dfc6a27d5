import json

import numpy as np
import pytest

from thyrovol.compounding import (
    CompoundingConfig,
    CompoundingError,
    LabelVolume,
    compound,
    export_volume,
    interpolate_pose,
    load_volume,
    merge_lobes,
    volume_of,
)
from thyrovol.controller import BASE_ROTATION, ScanConfig, SweepRecording, initial_pose, scan_lobe
from thyrovol.imaging import Frame, ImagingConfig, ProbePose, SegOracleConfig
from thyrovol.phantom import THYROID
from thyrovol.transforms import quat_angle, rot_z


def _pose(t, x=0.0, rot=np.eye(3)):
    return ProbePose(rot, [x, 0.0, 0.0], t)


def test_interpolate_exact_and_midpoint():
    poses = [_pose(0.0, 0.0), _pose(1.0, 10.0, rot_z(0.8))]
    assert interpolate_pose(poses, 1.0) is poses[1]
    mid = interpolate_pose(poses, 0.5)
    np.testing.assert_allclose(mid.translation, [5.0, 0.0, 0.0])
    np.testing.assert_allclose(mid.rotation, rot_z(0.4), atol=1e-12)
    with pytest.raises(CompoundingError):
        interpolate_pose(poses, -0.1)
    with pytest.raises(CompoundingError):
        interpolate_pose(poses, 1.1)


def test_interpolate_continuity():
    poses = [_pose(0.0), _pose(1.0, 4.0, rot_z(1.0)), _pose(2.0, 6.0, rot_z(-0.5))]
    ts = np.linspace(0.0, 2.0, 2001)
    prev = interpolate_pose(poses, 0.0)
    for t in ts[1:]:
        cur = interpolate_pose(poses, float(t))
        assert np.linalg.norm(cur.translation - prev.translation) < 0.01
        assert quat_angle(cur.quaternion, prev.quaternion) < 0.01
        prev = cur


def _single_frame_sweep(label, cfg):
    pose = ProbePose(BASE_ROTATION, [0.0, 0.0, 0.0], 0.0)
    fr = Frame(intensity=np.full(label.shape, 100, np.uint8), label=label, pose=pose,
               timestamp=0.0)
    return SweepRecording(frames=[fr], poses=[pose], imaging=cfg)


def test_single_frame_pixel_bookkeeping():
    # 1 mm pixels on a 1 mm grid: each pixel lands in its own voxel
    cfg = ImagingConfig(width_px=20, depth_px=10, footprint=20.0, depth=10.0)
    label = np.zeros((10, 20), bool)
    label[2:5, 3:11] = True
    for vote in ("any", "majority"):
        ivol, lv = compound(_single_frame_sweep(label, cfg),
                            CompoundingConfig(voxel_pitch=1.0, vote=vote), cfg)
        assert lv.occupancy.sum() == label.sum()
        assert lv.occupancy.any(axis=(1, 2)).sum() == 1  # one slab along x
    assert np.nanmax(ivol.values) == 100.0


def test_coincident_frames_idempotent():
    cfg = ImagingConfig(width_px=40, depth_px=30)
    label = np.zeros((30, 40), bool)
    label[5:20, 10:30] = True
    one = _single_frame_sweep(label, cfg)
    two = SweepRecording(frames=one.frames * 2, poses=one.poses, imaging=cfg)
    for vote in ("any", "majority"):
        c = CompoundingConfig(vote=vote)
        assert np.array_equal(compound(one, c, cfg)[1].occupancy, compound(two, c, cfg)[1].occupancy)


def test_frame_outside_pose_range():
    cfg = ImagingConfig(width_px=8, depth_px=8)
    sw = _single_frame_sweep(np.ones((8, 8), bool), cfg)
    sw.frames[0] = Frame(sw.frames[0].intensity, sw.frames[0].label, sw.frames[0].pose, 5.0)
    with pytest.raises(CompoundingError, match="frame 0"):
        compound(sw, CompoundingConfig(), cfg)


def test_empty_sweep_rejected():
    with pytest.raises(CompoundingError):
        compound(SweepRecording(), CompoundingConfig())


def _box(origin, shape, pitch=1.0, fill=True):
    occ = np.zeros(shape, bool)
    if fill:
        occ[:] = True
    return LabelVolume(occ, (pitch, pitch, pitch), np.asarray(origin, float))


def test_volume_of_basic():
    assert volume_of(_box([0, 0, 0], (10, 10, 10))) == 1.0
    assert volume_of(_box([0, 0, 0], (10, 10, 10), fill=False)) == 0.0


def test_volume_of_phantom_grid_identity(default_model):
    from thyrovol.phantom import ground_truth_volume

    lv = LabelVolume(default_model.label_grid == THYROID, default_model.spacing,
                     default_model.origin)
    assert volume_of(lv) == ground_truth_volume(default_model)


def test_merge_identities():
    a = _box([0, 0, 0], (6, 5, 4))
    empty = _box([20, 0, 0], (3, 3, 3), fill=False)
    assert volume_of(merge_lobes(a, empty)) == volume_of(a)
    assert volume_of(merge_lobes(a, a)) == volume_of(a)


def test_merge_disjoint_and_mixed_pitch():
    a = _box([0, 0, 0], (4, 4, 4), pitch=1.0)
    b = _box([10.0, 0.5, 0.5], (4, 4, 4), pitch=0.5)
    m = merge_lobes(a, b)
    assert m.spacing == (0.5, 0.5, 0.5)
    expect = volume_of(a) + volume_of(b)
    assert volume_of(m) == pytest.approx(expect, abs=0.0005)


def test_merge_monotone(rng):
    for _ in range(10):
        a = LabelVolume(rng.random((8, 9, 7)) < 0.3, (0.5, 0.5, 0.5), rng.uniform(-3, 3, 3).round())
        b = LabelVolume(rng.random((6, 8, 9)) < 0.3, (0.5, 0.5, 0.5), rng.uniform(-3, 3, 3).round())
        v = volume_of(merge_lobes(a, b))
        assert max(volume_of(a), volume_of(b)) - 1e-12 <= v <= volume_of(a) + volume_of(b) + 1e-12


def test_dense_sweep_matches_lobe(default_model):
    spec = default_model.spec
    imaging = ImagingConfig()
    res = scan_lobe(initial_pose(default_model, -20.0), default_model, imaging, SegOracleConfig(),
                    ScanConfig(centering=False), lobe="left")
    # keep only voxels near the lobe so the isthmus does not count
    _, lv = compound(res.recording, CompoundingConfig(), imaging, intensity=False)
    idx = np.argwhere(lv.occupancy)
    centers = lv.origin + (idx + 0.5) * np.asarray(lv.spacing)
    near = spec.lobe_left.contains(centers) | ~spec.isthmus.contains(centers)
    v = near.sum() * np.prod(lv.spacing) / 1000.0
    truth = spec.lobe_left.volume() / 1000.0
    assert abs(v - truth) / truth < 0.05


def test_export_roundtrip(tmp_path):
    lv = _box([1.0, -2.0, 3.0], (3, 4, 5))
    side = export_volume(tmp_path / "v.raw", lv.occupancy, lv.spacing, lv.origin, {"seed": 1})
    arr, meta = load_volume(side)
    assert np.array_equal(arr.astype(bool), lv.occupancy)
    assert meta["origin_mm"] == [1.0, -2.0, 3.0] and meta["provenance"] == {"seed": 1}
    assert json.loads(side.read_text())["dims"] == [3, 4, 5]


def test_config_validation():
    with pytest.raises(CompoundingError):
        CompoundingConfig(voxel_pitch=0.0)
    with pytest.raises(CompoundingError):
        CompoundingConfig(vote="mean")
