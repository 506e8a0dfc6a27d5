import math
from collections import deque

import numpy as np
import pytest

from thyrovol.controller import (
    BASE_ROTATION,
    Centering,
    ControllerState,
    Phase,
    ScanConfig,
    ScanPreconditionError,
    Side,
    centering_adjustment,
    correction_matrix,
    detect_shadow_side,
    do_pose_adjustment,
    initial_pose,
    rotation_adjustment,
    scan_lobe,
    target_pose,
    thyroid_present,
)
from thyrovol.imaging import Frame, ImagingConfig, ProbePose, SegOracleConfig
from thyrovol.phantom import EllipsoidSpec, PhantomSpec, build_phantom

CFG = ScanConfig()
IMG = ImagingConfig()
W, D = IMG.width_px, IMG.depth_px
FOOT = IMG.footprint


def _frame(label=None, intensity=None):
    label = np.zeros((D, W), bool) if label is None else label
    intensity = np.full((D, W), 120, np.uint8) if intensity is None else intensity
    pose = ProbePose(np.eye(3), [0, 0, 0])
    return Frame(intensity=intensity, label=label, pose=pose, timestamp=0.0)


def _state(**kw):
    st = ControllerState(R_init=np.eye(3), t_init=np.zeros(3), alpha_max=30.0, y_max=80.0)
    for k, v in kw.items():
        setattr(st, k, v)
    return st


# shadow detection

def test_shadow_none_left_both():
    img = np.full((D, W), 120, np.uint8)
    assert detect_shadow_side(img, CFG) == Side.NONE
    img[:, :5] = 0
    assert detect_shadow_side(img, CFG) == Side.LEFT
    assert detect_shadow_side(img[:, ::-1], CFG) == Side.RIGHT
    assert detect_shadow_side(np.zeros((D, W), np.uint8), CFG) == Side.BOTH


def test_shadow_needs_every_segment():
    img = np.full((D, W), 120, np.uint8)
    img[: D - 16, :5] = 0  # last segment bright
    assert detect_shadow_side(img, CFG) == Side.NONE
    img = np.full((D, W), 120, np.uint8)
    img[:, :5] = 0
    img[::16, :5] = 120  # 1 row in 16 bright: still >= 90 % dark in every segment
    assert detect_shadow_side(img, CFG) == Side.LEFT


# rotation

def test_rotation_steps_and_saturation():
    assert rotation_adjustment(0.0, Side.LEFT, CFG) == (5.0, False, None)
    assert rotation_adjustment(0.0, Side.RIGHT, CFG) == (-5.0, False, None)
    assert rotation_adjustment(30.0, Side.LEFT, CFG) == (30.0, True, None)
    new, sat, warn = rotation_adjustment(10.0, Side.BOTH, CFG)
    assert new == 10.0 and not sat and "both" in warn


# centering

def test_centering_case_c_noop():
    lab = np.zeros((D, W), bool)
    lab[40:80, 30:66] = True
    assert centering_adjustment(lab, 3.0, CFG, FOOT) == (3.0, Centering.NONE, False, False)
    assert centering_adjustment(np.zeros((D, W), bool), 0.0, CFG, FOOT)[2] is False


def test_centering_flush_right():
    lab = np.zeros((D, W), bool)
    lab[40:80, 60:] = True  # touches the right strip only
    y, case, needed, sat = centering_adjustment(lab, 0.0, CFG, FOOT)
    assert case == Centering.ONE_BORDER and needed and not sat
    # free (left) edge at column 60 goes to 6 % of the width from the left border
    assert y == pytest.approx((60 - 0.06 * W) * FOOT / W)
    # applying the shift puts that edge at the target column
    shift_px = y / (FOOT / W)
    assert 60 - shift_px == pytest.approx(0.06 * W)


def test_centering_both_borders_center_of_mass():
    lab = np.zeros((D, W), bool)
    lab[:, :] = False
    lab[50:60, 0:W - 20] = True
    lab[50:51, W - 4:] = True  # also touches the right strip
    cols = np.arange(W) + 0.5
    mass = lab.sum(axis=0)
    com = float(np.dot(cols, mass) / mass.sum())
    y, case, needed, _ = centering_adjustment(lab, 0.0, CFG, FOOT)
    assert case == Centering.BOTH_BORDERS and needed
    assert y == pytest.approx((com - W / 2) * FOOT / W)


def test_centering_com_ten_px_left():
    lab = np.zeros((D, W), bool)
    lab[60:70, 0:W - 20] = True  # centre of mass at column (W - 20) / 2 = W / 2 - 10
    lab[60, W - 1] = True  # touch the right strip with one pixel
    y, case, _, _ = centering_adjustment(lab, 0.0, CFG, FOOT)
    assert case == Centering.BOTH_BORDERS
    px = FOOT / W
    assert y == pytest.approx(-10 * px, abs=0.1 * px)


def test_centering_clamp():
    lab = np.zeros((D, W), bool)
    lab[40:80, 60:] = True
    y, _, needed, sat = centering_adjustment(lab, 79.0, CFG, FOOT)
    assert y == 80.0 and needed and not sat
    y, _, needed, sat = centering_adjustment(lab, 80.0, CFG, FOOT)
    assert y == 80.0 and sat


# presence

def test_thyroid_present():
    yes = np.zeros((D, W), bool)
    yes[5, 5] = True
    full = deque([_frame(yes) for _ in range(30)], maxlen=30)
    assert thyroid_present(full)
    full.append(_frame())
    assert not thyroid_present(full)
    assert not thyroid_present(deque())


# target pose

def test_target_pose_identity_and_steps():
    st = _state()
    p = target_pose(st, CFG)
    assert np.array_equal(p.rotation, np.eye(3)) and np.array_equal(p.translation, np.zeros(3))
    st.n_steps = 2
    np.testing.assert_allclose(target_pose(st, CFG).translation, [10.0, 0.0, 0.0])


def test_correction_matrix_entries():
    m = correction_matrix(30.0)
    assert m[1, 1] == pytest.approx(math.cos(math.radians(30)))
    assert m[2, 2] == pytest.approx(0.8660254)
    assert m[2, 1] == pytest.approx(0.5)
    assert m[0, 0] == 1.0


def test_target_pose_composition():
    r0 = correction_matrix(17.0) @ BASE_ROTATION
    st = _state(R_init=r0, t_init=np.array([1.0, 2.0, 3.0]), n_steps=-3, alpha_corr=10.0,
                y_corr=4.0)
    p = target_pose(st, CFG)
    np.testing.assert_allclose(p.rotation, correction_matrix(10.0) @ r0)
    np.testing.assert_allclose(p.translation, st.t_init + r0 @ [-15.0, 4.0, 0.0])


def test_state_clamp_and_phase_order():
    st = _state(alpha_corr=31.0)
    with pytest.raises(AssertionError):
        st.check()
    st = _state()
    st.advance_phase(Phase.RECORDING)
    with pytest.raises(AssertionError):
        st.advance_phase(Phase.RECORDING)


# pose adjustment

def test_adjustment_fixed_point():
    lab = np.zeros((D, W), bool)
    lab[40:80, 30:66] = True
    st = _state()
    before = st.snapshot()
    calls = []
    do_pose_adjustment(st, _frame(lab), CFG, lambda s: calls.append(1), FOOT)
    assert st.snapshot() == before and not calls


def test_adjustment_left_shadow_one_roll():
    dark = np.full((D, W), 120, np.uint8)
    dark[:, :8] = 0
    frames = iter([_frame()])
    st = _state()
    events = []
    do_pose_adjustment(st, _frame(intensity=dark), CFG, lambda s: next(frames), FOOT, events)
    assert st.alpha_corr == 5.0 and st.y_corr == 0.0
    assert [e["event"] for e in events] == ["rotate"]


def test_adjustment_flush_right_only_translates():
    lab = np.zeros((D, W), bool)
    lab[40:80, 60:] = True
    moved = lab.copy()
    moved[:] = False
    moved[40:80, 6:42] = True
    frames = iter([_frame(moved)])
    st = _state()
    do_pose_adjustment(st, _frame(lab), CFG, lambda s: next(frames), FOOT)
    assert st.alpha_corr == 0.0 and st.y_corr > 0.0


def test_adjustment_both_sides_warns():
    st = _state()
    events = []
    do_pose_adjustment(st, _frame(intensity=np.zeros((D, W), np.uint8)), CFG,
                       lambda s: None, FOOT, events)
    assert st.alpha_corr == 0.0
    assert events[0]["event"] == "warning"


def test_adjustment_rotation_saturates():
    dark = np.full((D, W), 120, np.uint8)
    dark[:, :8] = 0
    st = _state()
    events = []
    do_pose_adjustment(st, _frame(intensity=dark), CFG, lambda s: _frame(intensity=dark),
                       FOOT, events)
    assert st.alpha_corr == 30.0
    # the iteration budget alpha_max / alpha_step is spent exactly at the clamp
    assert [e["event"] for e in events] == ["rotate"] * 6
    events.clear()
    do_pose_adjustment(st, _frame(intensity=dark), CFG, lambda s: _frame(intensity=dark),
                       FOOT, events)
    assert st.alpha_corr == 30.0
    assert events == [{"event": "saturated", "t": 0.0, "what": "alpha_corr"}]


def test_roll_sign_relieves_left_shadow(default_model):
    # a right-hand tilt shadows the left side; +5 deg roll must restore contact
    from thyrovol.imaging import contact_mask

    pose = initial_pose(default_model, 0.0, tilt_deg=-6.0)
    c = contact_mask(pose, default_model.surface, IMG)
    assert not c[:5].any() and c[-5:].all()
    fixed = initial_pose(default_model, 0.0, tilt_deg=-1.0)
    assert contact_mask(fixed, default_model.surface, IMG).sum() > c.sum()
    st = _state(R_init=pose.rotation, t_init=pose.translation, alpha_corr=5.0)
    np.testing.assert_allclose(target_pose(st, CFG).rotation, fixed.rotation, atol=1e-12)


# full scans

@pytest.fixture(scope="module")
def centered_scan(default_model):
    pose = initial_pose(default_model, -20.0)
    return scan_lobe(pose, default_model, IMG, SegOracleConfig(), CFG, seed=3, lobe="left")


def test_scan_spans_lobe(centered_scan, default_model):
    rec = centered_scan.recording
    xs = np.array([f.pose.translation[0] for f in rec.frames])
    length = 2 * default_model.spec.lobe_left.semi_axes[0]
    assert xs.max() - xs.min() >= length - 2 * CFG.step_size
    assert not rec.frames[0].has_thyroid or not rec.frames[-1].has_thyroid


def test_scan_lobe_end_bracketing(centered_scan):
    rec = centered_scan.recording
    xs = np.array([f.pose.translation[0] for f in rec.frames])
    has = np.array([f.has_thyroid for f in rec.frames])
    for end in (0, -1):
        empty = xs[~has]
        assert np.min(np.abs(empty - xs[end])) <= CFG.step_size


def test_scan_monotone_and_timestamps(centered_scan):
    rec = centered_scan.recording
    ts = [f.timestamp for f in rec.frames]
    assert all(b > a for a, b in zip(ts, ts[1:]))
    pts = [p.timestamp for p in rec.poses]
    assert all(b > a for a, b in zip(pts, pts[1:]))
    assert pts[0] <= ts[0] and ts[-1] <= pts[-1]
    xs = np.array([f.pose.translation[0] for f in rec.frames])
    assert np.all(np.diff(xs) >= -1e-9) or np.all(np.diff(xs) <= 1e-9)


def test_scan_deterministic(default_model, centered_scan):
    again = scan_lobe(initial_pose(default_model, -20.0), default_model, IMG, SegOracleConfig(),
                      CFG, seed=3, lobe="left")
    a, b = centered_scan.recording, again.recording
    assert len(a.frames) == len(b.frames)
    assert all(np.array_equal(x.intensity, y.intensity) for x, y in zip(a.frames, b.frames))
    assert centered_scan.events == again.events


def test_scan_at_tip(default_model):
    lobe = default_model.spec.lobe_left
    # phase 1 runs along -x-hat, which is +x in the world for the base orientation
    x_tip = lobe.center[0] + lobe.semi_axes[0] - 2.0
    res = scan_lobe(initial_pose(default_model, -20.0, x=x_tip), default_model, IMG,
                    SegOracleConfig(), CFG, lobe="left")
    phase1 = [e for e in res.events if e["event"] == "step" and e["phase"] == "seek_first_end"]
    assert len(phase1) <= 1
    xs = [f.pose.translation[0] for f in res.recording.frames]
    assert max(xs) - min(xs) >= 2 * lobe.semi_axes[0] - 2 * CFG.step_size


def test_scan_precondition():
    spec = PhantomSpec(lobe_left=EllipsoidSpec((0.0, -20.0, -18.0), (10.0, 12.0, 10.0)),
                       lobe_right=None, isthmus=None)
    model = build_phantom(spec)
    with pytest.raises(ScanPreconditionError, match="lobe left"):
        scan_lobe(initial_pose(model, 30.0, x=30.0), model, IMG, SegOracleConfig(), CFG)


def test_header_reflects_flags(default_model):
    cfg = ScanConfig(shadow_correction=False, centering=False)
    res = scan_lobe(initial_pose(default_model, 20.0), default_model, IMG, SegOracleConfig(),
                    cfg, lobe="right", lobe_index=1)
    head = res.events[0]
    assert head["event"] == "header"
    assert head["shadow_correction"] is False and head["centering"] is False
    assert not any(e["event"] in ("rotate", "translate") for e in res.events)
