"""Image-guided probe motion: lobe-end search, shadow roll and lobe centering.

The probe moves in discrete steps along its out-of-plane axis. After each
step the live image is checked for one-sided shadowing (fixed by rolling
about the scan axis) and for thyroid touching an image border (fixed by a
lateral shift). A lobe end is declared once a frame in the trailing
presence window carries no thyroid label.

Conventions: the probe's x-hat is the scan axis, y-hat points to image
column index increasing ("right"), z-hat points into the tissue. The
base orientation ``BASE_ROTATION`` looks straight down (-z world) with
y-hat along +y world, so a positive roll angle lifts the right side of
the face and presses the left side into the skin.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .imaging import (
    Frame,
    ImagingConfig,
    ProbePose,
    SegOracleConfig,
    render_frame,
    settle_z,
)
from .phantom import PhantomModel
from .transforms import lerp, matrix_to_quat, quat_to_matrix, rot_x, slerp

log = logging.getLogger(__name__)

BASE_ROTATION = np.diag([-1.0, 1.0, -1.0])


class ScanError(RuntimeError):
    """A scan that could not be completed (step budget exhausted, bad pose)."""


class ScanPreconditionError(ScanError):
    """The initial pose does not show any thyroid."""


class Side(str, enum.Enum):
    NONE = "none"
    LEFT = "left"
    RIGHT = "right"
    BOTH = "both"


class Phase(str, enum.Enum):
    SEEK_FIRST_END = "seek_first_end"
    RECORDING = "recording"
    DONE = "done"


_PHASE_ORDER = {Phase.SEEK_FIRST_END: 0, Phase.RECORDING: 1, Phase.DONE: 2}


@dataclass(frozen=True)
class ScanConfig:
    step_size: float = 5.0  # mm
    alpha_step: float = 5.0  # deg
    alpha_max: float = 30.0  # deg
    y_max: float = 80.0  # mm
    shadow_margin_frac: float = 0.05
    shadow_segments: int = 8
    shadow_pixel_frac: float = 0.90
    p_brightness: float = 70.0
    border_frac: float = 0.04
    target_edge_frac: float = 0.06
    centering_tolerance_frac: float = 0.02
    presence_window: float = 1.0  # s
    max_total_steps: int = 200
    shadow_correction: bool = True
    centering: bool = True
    probe_speed: float = 5.0  # mm/s along the scan axis
    adjust_duration: float = 0.2  # s per correction move
    pose_rate: float = 100.0  # Hz, robot pose stream

    def __post_init__(self):
        for name in ("shadow_margin_frac", "border_frac", "target_edge_frac"):
            v = getattr(self, name)
            if not 0.0 < v < 0.5:
                raise ValueError(f"{name} must lie in (0, 0.5)")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not 0 < self.alpha_step <= self.alpha_max:
            raise ValueError("need 0 < alpha_step <= alpha_max")
        if self.y_max <= 0 or self.shadow_segments < 1 or self.max_total_steps < 1:
            raise ValueError("y_max, shadow_segments and max_total_steps must be positive")
        if self.probe_speed <= 0 or self.adjust_duration <= 0 or self.pose_rate <= 0:
            raise ValueError("probe_speed, adjust_duration and pose_rate must be > 0")


@dataclass
class ControllerState:
    R_init: np.ndarray
    t_init: np.ndarray
    alpha_max: float
    y_max: float
    n_steps: int = 0
    alpha_corr: float = 0.0  # deg
    y_corr: float = 0.0  # mm
    direction: int = -1
    phase: Phase = Phase.SEEK_FIRST_END

    def check(self) -> None:
        if abs(self.alpha_corr) > self.alpha_max + 1e-12:
            raise AssertionError(f"alpha_corr {self.alpha_corr} exceeds {self.alpha_max}")
        if abs(self.y_corr) > self.y_max + 1e-12:
            raise AssertionError(f"y_corr {self.y_corr} exceeds {self.y_max}")

    def advance_phase(self, phase: Phase) -> None:
        if _PHASE_ORDER[phase] != _PHASE_ORDER[self.phase] + 1:
            raise AssertionError(f"illegal phase transition {self.phase} -> {phase}")
        self.phase = phase

    def snapshot(self) -> tuple:
        return (self.n_steps, self.alpha_corr, self.y_corr, self.direction, self.phase)


@dataclass
class SweepRecording:
    frames: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    lobe: str = "left"
    imaging: Optional[ImagingConfig] = None

    def add_pose(self, pose: ProbePose) -> None:
        if self.poses and pose.timestamp <= self.poses[-1].timestamp:
            return
        self.poses.append(pose)


@dataclass
class ScanResult:
    recording: SweepRecording
    events: list
    # every rendered frame: (timestamp, x position, has_thyroid, recorded)
    history: np.ndarray
    # (alpha_corr, y_corr) after every state transition
    trace: np.ndarray
    warnings: list


def detect_shadow_side(intensity: np.ndarray, cfg: ScanConfig) -> Side:
    """Which image margin (if any) is dark in every one of its vertical segments."""
    img = np.asarray(intensity)
    rows, width = img.shape
    m = max(1, int(round(cfg.shadow_margin_frac * width)))

    def shadowed(strip: np.ndarray) -> bool:
        for block in np.array_split(strip, cfg.shadow_segments, axis=0):
            if block.size == 0 or np.mean(block < cfg.p_brightness) < cfg.shadow_pixel_frac:
                return False
        return True

    left = shadowed(img[:, :m])
    right = shadowed(img[:, width - m:])
    if left and right:
        return Side.BOTH
    if left:
        return Side.LEFT
    if right:
        return Side.RIGHT
    return Side.NONE


def rotation_adjustment(alpha_corr: float, side: Side, cfg: ScanConfig):
    """Next roll angle for a shadowed side; returns ``(alpha, saturated, warning)``."""
    if side == Side.BOTH:
        return alpha_corr, False, "both image sides shadowed; no rotation applied"
    if side == Side.NONE:
        return alpha_corr, False, None
    step = cfg.alpha_step if side == Side.LEFT else -cfg.alpha_step
    new = min(max(alpha_corr + step, -cfg.alpha_max), cfg.alpha_max)
    return new, new == alpha_corr, None


class Centering(str, enum.Enum):
    NONE = "none"  # no border touched, or empty label
    ONE_BORDER = "one_border"
    BOTH_BORDERS = "both_borders"


def centering_offset(label: np.ndarray, cfg: ScanConfig, footprint: float):
    """Lateral probe shift (mm, along y-hat) that re-centres the thyroid label.

    Thyroid in exactly one border strip: the opposite, free edge of the label
    is brought to ``target_edge_frac`` of the width from its own border, so
    the lobe stays whole in view while the cut side (isthmus or a clipped
    lobe) gains coverage. Thyroid in both strips: the label centre of mass
    is moved to the image centre. Returns ``(case, shift_mm)``.
    """
    lab = np.asarray(label, dtype=bool)
    width = lab.shape[1]
    cols = np.flatnonzero(lab.any(axis=0))
    if cols.size == 0:
        return Centering.NONE, 0.0
    dy = footprint / width
    b = max(1, int(round(cfg.border_frac * width)))
    in_left = bool(cols[0] < b)
    in_right = bool(cols[-1] >= width - b)
    if in_left and in_right:
        col_mass = lab.sum(axis=0)
        com = float(np.dot(np.arange(width) + 0.5, col_mass) / col_mass.sum())
        return Centering.BOTH_BORDERS, (com - 0.5 * width) * dy
    if in_right:
        edge = float(cols[0])  # left boundary of the leftmost thyroid column
        return Centering.ONE_BORDER, (edge - cfg.target_edge_frac * width) * dy
    if in_left:
        edge = float(cols[-1] + 1)
        return Centering.ONE_BORDER, (edge - (1.0 - cfg.target_edge_frac) * width) * dy
    return Centering.NONE, 0.0


def centering_adjustment(label: np.ndarray, y_corr: float, cfg: ScanConfig, footprint: float):
    """Next lateral correction; returns ``(y_corr, case, needed, saturated)``."""
    case, shift = centering_offset(label, cfg, footprint)
    if case == Centering.NONE or abs(shift) <= cfg.centering_tolerance_frac * footprint:
        return y_corr, case, False, False
    new = min(max(y_corr + shift, -cfg.y_max), cfg.y_max)
    return new, case, True, new == y_corr


def thyroid_present(buffer, cfg: Optional[ScanConfig] = None) -> bool:
    """True iff the buffer is non-empty and every frame in it shows thyroid.

    ``buffer`` holds the frames of the trailing presence window (the caller
    sizes it to ``presence_window * frame_rate`` frames).
    """
    frames = list(buffer)
    return bool(frames) and all(f.has_thyroid for f in frames)


def correction_matrix(alpha_deg: float) -> np.ndarray:
    return rot_x(math.radians(alpha_deg))


def target_pose(state: ControllerState, cfg: ScanConfig, timestamp: float = 0.0) -> ProbePose:
    """Commanded pose before surface settling.

    Rotation is the roll correction applied on top of the initial
    orientation; translation is the initial position plus the step count
    along the scan axis and the lateral correction, both expressed in the
    initial probe frame.
    """
    R = correction_matrix(state.alpha_corr) @ state.R_init
    offset = np.array([cfg.step_size * state.n_steps, state.y_corr, 0.0])
    t = state.t_init + state.R_init @ offset
    return ProbePose(R, t, timestamp)


def do_pose_adjustment(state: ControllerState, frame: Frame, cfg: ScanConfig,
                       render: Callable[[ControllerState], Frame], footprint: float,
                       events: Optional[list] = None) -> Frame:
    """Roll away shadows, then shift to centre the lobe; mutates ``state``.

    ``render`` moves the probe to the state's current target and returns the
    newest frame. Each loop stops when no correction is needed, when the
    clamp leaves the value unchanged, or after its iteration budget.
    Returns the last frame seen.
    """
    events = events if events is not None else []
    if cfg.shadow_correction:
        for _ in range(int(math.ceil(cfg.alpha_max / cfg.alpha_step))):
            side = detect_shadow_side(frame.intensity, cfg)
            new, saturated, warning = rotation_adjustment(state.alpha_corr, side, cfg)
            if warning:
                events.append({"event": "warning", "t": frame.timestamp, "message": warning})
            if side in (Side.NONE, Side.BOTH):
                break
            if saturated:
                events.append({"event": "saturated", "t": frame.timestamp, "what": "alpha_corr"})
                break
            state.alpha_corr = new
            state.check()
            events.append({"event": "rotate", "t": frame.timestamp, "side": side.value,
                           "alpha_corr": new})
            frame = render(state)
    if cfg.centering:
        budget = int(math.ceil(cfg.y_max / (0.5 * footprint)))
        for _ in range(budget):
            new, case, needed, saturated = centering_adjustment(frame.label, state.y_corr, cfg,
                                                                footprint)
            if not needed:
                break
            if saturated:
                events.append({"event": "saturated", "t": frame.timestamp, "what": "y_corr"})
                break
            state.y_corr = new
            state.check()
            events.append({"event": "translate", "t": frame.timestamp, "case": case.value,
                           "y_corr": new})
            frame = render(state)
    return frame


def initial_pose(model: PhantomModel, y: float, x: float = 0.0, tilt_deg: float = 0.0,
                 cfg: Optional[ImagingConfig] = None) -> ProbePose:
    """Probe placed normal to the skin at (x, y), then rolled by ``tilt_deg``."""
    cfg = cfg or ImagingConfig()
    r = model.spec.neck_radius
    phi = -math.asin(max(-1.0, min(1.0, y / r)))
    R = rot_x(phi + math.radians(tilt_deg)) @ BASE_ROTATION
    return settle_z(ProbePose(R, [x, y, 0.0]), model.surface, cfg)


def frame_seed(seed: int, run: int, lobe: int, tick: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(run, lobe, tick))
    return np.random.default_rng(ss)


class ProbeSimulator:
    """Simulated robot clock: moves the probe and streams frames and poses."""

    def __init__(self, model: PhantomModel, imaging: ImagingConfig, oracle: SegOracleConfig,
                 scan: ScanConfig, seed: int = 0, run: int = 0, lobe_index: int = 0):
        self.model = model
        self.imaging = imaging
        self.oracle = oracle
        self.scan = scan
        self.seed = seed
        self.run = run
        self.lobe_index = lobe_index
        self.surface = model.surface
        self.tick = 0
        self.pose: Optional[ProbePose] = None
        self.window = max(1, int(round(scan.presence_window * imaging.frame_rate)))
        self.buffer: deque = deque(maxlen=self.window)
        self.history: list = []
        self.recording: Optional[SweepRecording] = None
        self.last_frame: Optional[Frame] = None

    def now(self) -> float:
        return self.tick / self.imaging.frame_rate

    def _settled(self, R, t, timestamp) -> ProbePose:
        return settle_z(ProbePose(R, t, timestamp), self.surface, self.imaging)

    def place(self, pose: ProbePose) -> None:
        self.pose = self._settled(pose.rotation, pose.translation, self.now())

    def _render(self, pose: ProbePose) -> Frame:
        rng = frame_seed(self.seed, self.run, self.lobe_index, self.tick)
        fr = render_frame(pose, self.model, self.imaging, self.oracle, rng, surface=self.surface)
        self.buffer.append(fr)
        rec = self.recording is not None
        self.history.append((fr.timestamp, pose.translation[0], fr.has_thyroid, rec))
        if rec:
            self.recording.frames.append(fr)
        self.last_frame = fr
        return fr

    def move_to(self, target: ProbePose, n_ticks: int) -> Frame:
        """Lerp/slerp from the current pose to ``target`` over ``n_ticks`` frames."""
        start = self.pose
        q0, q1 = matrix_to_quat(start.rotation), matrix_to_quat(target.rotation)
        t0, t1 = start.translation, target.translation
        T0 = self.now()
        T1 = (self.tick + n_ticks) / self.imaging.frame_rate

        def pose_at(t: float, u: float) -> ProbePose:
            if u >= 1.0:
                R, tr = target.rotation, t1
            else:
                R, tr = quat_to_matrix(slerp(q0, q1, u)), lerp(t0, t1, u)
            return self._settled(R, tr, t)

        rate = self.scan.pose_rate
        j = int(math.floor(T0 * rate)) + 1
        base = self.tick
        frame = None
        for k in range(1, n_ticks + 1):
            tk = (base + k) / self.imaging.frame_rate
            if self.recording is not None:
                while j / rate < tk - 1e-9:
                    tp = j / rate
                    self.recording.add_pose(pose_at(tp, (tp - T0) / (T1 - T0)))
                    j += 1
            pose = pose_at(tk, k / n_ticks)
            if self.recording is not None:
                self.recording.add_pose(pose)
            self.tick = base + k
            frame = self._render(pose)
        self.pose = pose_at(T1, 1.0)
        return frame

    def dwell(self, n_ticks: int) -> Frame:
        return self.move_to(self.pose.at(self.now()), n_ticks)

    def start_recording(self, lobe: str) -> None:
        self.recording = SweepRecording(lobe=lobe, imaging=self.imaging)
        self.recording.add_pose(self.pose.at(self.now()))

    def stop_recording(self) -> SweepRecording:
        rec, self.recording = self.recording, None
        return rec


def scan_lobe(initial: ProbePose, model: PhantomModel, imaging: ImagingConfig,
              oracle: SegOracleConfig, scan: ScanConfig, seed: int = 0, run: int = 0,
              lobe: str = "left", lobe_index: int = 0) -> ScanResult:
    """Find the first lobe end, then record one continuous sweep to the other end."""
    sim = ProbeSimulator(model, imaging, oracle, scan, seed=seed, run=run, lobe_index=lobe_index)
    try:
        sim.place(initial)
    except ValueError as exc:
        raise ScanError(f"lobe {lobe}: {exc}") from exc
    state = ControllerState(R_init=sim.pose.rotation.copy(), t_init=sim.pose.translation.copy(),
                            alpha_max=scan.alpha_max, y_max=scan.y_max)
    events: list = [{
        "event": "header", "lobe": lobe, "seed": seed, "run": run,
        "shadow_correction": scan.shadow_correction, "centering": scan.centering,
        "initial_pose": sim.pose.to_dict(),
    }]
    trace = [(state.alpha_corr, state.y_corr)]
    step_ticks = max(1, int(round(scan.step_size / scan.probe_speed * imaging.frame_rate)))
    adjust_ticks = max(1, int(round(scan.adjust_duration * imaging.frame_rate)))
    total_steps = 0

    def go(st: ControllerState, ticks: int) -> Frame:
        trace.append((st.alpha_corr, st.y_corr))
        return sim.move_to(target_pose(st, scan, sim.now()), ticks)

    def render_adjust(st: ControllerState) -> Frame:
        return go(st, adjust_ticks)

    def step(direction: int) -> Frame:
        nonlocal total_steps
        if total_steps >= scan.max_total_steps:
            raise ScanError(
                f"lobe {lobe}: exceeded max_total_steps={scan.max_total_steps} "
                f"(phase {state.phase.value}, n_steps={state.n_steps})")
        total_steps += 1
        state.n_steps += direction
        return go(state, step_ticks)

    def log_step(frame: Frame, present: bool) -> None:
        events.append({
            "event": "step", "t": frame.timestamp, "phase": state.phase.value,
            "n_steps": state.n_steps, "alpha_corr": state.alpha_corr, "y_corr": state.y_corr,
            "shadow": detect_shadow_side(frame.intensity, scan).value,
            "thyroid": frame.has_thyroid, "present": present, "pose": frame.pose.to_dict(),
        })

    def move_until_end(direction: int) -> None:
        state.direction = direction
        while thyroid_present(sim.buffer):
            frame = step(direction)
            frame = do_pose_adjustment(state, frame, scan, render_adjust, imaging.footprint,
                                       events)
            log_step(frame, thyroid_present(sim.buffer))

    try:
        sim.dwell(sim.window)
        if not any(f.has_thyroid for f in sim.buffer):
            raise ScanPreconditionError(f"lobe {lobe}: no thyroid visible at the initial pose")
        move_until_end(-1)
        state.advance_phase(Phase.RECORDING)
        sim.start_recording(lobe)
        # move probe into thyroid again, then let the presence window refill
        step(+1)
        sim.dwell(sim.window)
        move_until_end(+1)
        recording = sim.stop_recording()
        state.advance_phase(Phase.DONE)
    except ValueError as exc:
        raise ScanError(f"lobe {lobe}: {exc}") from exc
    warnings = [e["message"] for e in events if e["event"] == "warning"]
    events.append({"event": "done", "t": sim.now(), "steps": total_steps,
                   "frames": len(recording.frames), "poses": len(recording.poses)})
    return ScanResult(recording=recording, events=events,
                      history=np.array(sim.history, dtype=float).reshape(-1, 4),
                      trace=np.array(trace, dtype=float), warnings=warnings)
