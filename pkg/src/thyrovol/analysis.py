"""Clinical baselines and the experiment harnesses.

Statistics use the population standard deviation (divide by N).
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .compounding import LabelVolume, compound, merge_lobes, volume_of
from .controller import ScanError, ScanResult, initial_pose, scan_lobe
from .imaging import ProbePose, settle_z
from .phantom import PhantomModel, build_phantom, ground_truth_volume, lobe_mask
from .scenario import InitialPoseSpec, Scenario

ELLIPSOID_COEFFICIENT = 0.48
MARINELLI_COEFFICIENT = 25.0

# name -> (shadow_correction, centering)
CONFIGURATIONS = {
    "none": (False, False),
    "shadow": (True, False),
    "centering": (False, True),
    "both": (True, True),
}

_PERTURB_STREAM = 2 ** 31 - 1


@dataclass(frozen=True)
class AxisMeasurements:
    m1: float  # cm
    m2: float
    m3: float

    def __post_init__(self):
        if min(self.m1, self.m2, self.m3) <= 0:
            raise ValueError("axis measurements must be > 0")


@dataclass(frozen=True)
class DoseParams:
    m: float  # g
    D: float  # Gy
    IU_24h: float
    T_eff: float  # h

    def __post_init__(self):
        if min(self.m, self.D, self.T_eff) <= 0:
            raise ValueError("m, D and T_eff must be > 0")
        if not 0.0 < self.IU_24h <= 1.0:
            raise ValueError("IU_24h must lie in (0, 1]")


def ellipsoid_volume(meas: AxisMeasurements, c: float = ELLIPSOID_COEFFICIENT) -> float:
    """c * m1 * m2 * m3; cm^3 is ml."""
    if c <= 0:
        raise ValueError("coefficient must be > 0")
    return c * meas.m1 * meas.m2 * meas.m3


def marinelli_activity(p: DoseParams) -> float:
    """Administered activity 25 * m * D / (IU_24h * T_eff)."""
    denom = p.IU_24h * p.T_eff
    if denom <= 0:
        raise ValueError("IU_24h * T_eff must be > 0")
    return MARINELLI_COEFFICIENT * p.m * p.D / denom


def longest_run(mask: np.ndarray, axis: int) -> int:
    """Longest run of consecutive True voxels along ``axis``."""
    m = np.moveaxis(np.asarray(mask, dtype=bool), axis, -1)
    if m.size == 0 or not m.any():
        return 0
    flat = m.reshape(-1, m.shape[-1]).astype(np.int8)
    padded = np.pad(flat, ((0, 0), (1, 1)))
    d = np.diff(padded, axis=1)
    starts = np.nonzero(d == 1)
    ends = np.nonzero(d == -1)
    return int((ends[1] - starts[1]).max())


def axis_measurement_oracle(model: PhantomModel, lobe: str) -> AxisMeasurements:
    """Longest chord of the lobe along each world axis, measured on the voxel grid."""
    mask = lobe_mask(model, lobe)
    if not mask.any():
        raise ValueError(f"lobe {lobe} has no voxels")
    cm = [longest_run(mask, k) * model.spacing[k] / 10.0 for k in range(3)]
    return AxisMeasurements(*cm)


def run_conventional_baseline(model: PhantomModel, c: float = ELLIPSOID_COEFFICIENT) -> dict:
    per_lobe = {}
    for name in model.spec.lobes:
        meas = axis_measurement_oracle(model, name)
        per_lobe[name] = {"m_cm": [meas.m1, meas.m2, meas.m3], "volume_ml": ellipsoid_volume(meas, c)}
    return {"volume_ml": sum(v["volume_ml"] for v in per_lobe.values()), "lobes": per_lobe}


def pose_from_spec(model: PhantomModel, spec: InitialPoseSpec, scenario: Scenario) -> ProbePose:
    if spec.quaternion is not None:
        p = ProbePose.from_quaternion(spec.quaternion, [spec.x, spec.y, 0.0])
        return settle_z(p, model.surface, scenario.imaging)
    return initial_pose(model, spec.y, x=spec.x, tilt_deg=spec.tilt_deg, cfg=scenario.imaging)


def perturbed_pose_specs(scenario: Scenario, count: Optional[int] = None) -> list[dict]:
    """Initial placements with uniform lateral offset and tilt, one stream per run."""
    pert = scenario.perturbation
    if pert is None:
        raise ValueError("scenario has no perturbation block")
    n = pert.count if count is None else count
    out = []
    for r in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=(_PERTURB_STREAM, r)))
        row = {}
        for lobe in sorted(scenario.initial_poses):
            base = scenario.initial_poses[lobe]
            dy = rng.uniform(-pert.lateral_offset_mm, pert.lateral_offset_mm)
            dt = rng.uniform(-pert.tilt_deg, pert.tilt_deg)
            row[lobe] = InitialPoseSpec(x=base.x, y=base.y + dy, tilt_deg=base.tilt_deg + dt,
                                        quaternion=None)
        out.append(row)
    return out


@dataclass
class VolumetryResult:
    volume_ml: float
    lobe_volumes_ml: dict
    labels: Optional[LabelVolume]
    lobe_labels: dict = field(default_factory=dict)
    intensities: dict = field(default_factory=dict)
    scans: dict = field(default_factory=dict)


def run_robotic_volumetry(model: PhantomModel, scenario: Scenario,
                          pose_specs: Optional[dict] = None, run: int = 0,
                          intensity: bool = False, keep_scans: bool = True) -> VolumetryResult:
    """Scan every lobe, compound each sweep, merge and measure."""
    pose_specs = pose_specs or scenario.initial_poses
    lobe_labels = {}
    intensities = {}
    scans: dict[str, ScanResult] = {}
    for idx, lobe in enumerate(sorted(pose_specs)):
        pose = pose_from_spec(model, pose_specs[lobe], scenario)
        res = scan_lobe(pose, model, scenario.imaging, scenario.oracle, scenario.scan,
                        seed=scenario.seed, run=run, lobe=lobe, lobe_index=idx)
        try:
            ivol, lv = compound(res.recording, scenario.compounding, scenario.imaging,
                                intensity=intensity)
        except ValueError as exc:
            raise ScanError(f"lobe {lobe}: compounding failed: {exc}") from exc
        lobe_labels[lobe] = lv
        if ivol is not None:
            intensities[lobe] = ivol
        if keep_scans:
            scans[lobe] = res
    merged = None
    for lv in lobe_labels.values():
        merged = lv if merged is None else merge_lobes(merged, lv)
    return VolumetryResult(
        volume_ml=volume_of(merged) if merged is not None else 0.0,
        lobe_volumes_ml={k: volume_of(v) for k, v in lobe_labels.items()},
        labels=merged, lobe_labels=lobe_labels, intensities=intensities, scans=scans,
    )


@dataclass
class AblationResult:
    ground_truth_ml: float
    rows: list  # dicts: config, run, seed, volume_ml (None on failure), rel_err, error
    summary: dict  # config -> {mean_ml, std_ml, mean_abs_err_pct, n, failures}

    def volumes(self, config: str) -> list:
        return [r["volume_ml"] for r in self.rows if r["config"] == config]


_WORKER: dict = {}


def _init_worker(spec):
    _WORKER["model"] = build_phantom(spec)


def _ablation_cell(args):
    scenario, config, run, poses = args
    model = _WORKER.get("model")
    if model is None:
        model = build_phantom(scenario.phantom)
        _WORKER["model"] = model
    return _run_cell(model, scenario, config, run, poses)


def _run_cell(model, scenario, config, run, poses):
    shadow, centering = CONFIGURATIONS[config]
    sc = scenario.with_scan(shadow_correction=shadow, centering=centering)
    try:
        res = run_robotic_volumetry(model, sc, poses, run=run, keep_scans=False)
        return {"config": config, "run": run, "volume_ml": res.volume_ml, "error": ""}
    except ScanError as exc:
        return {"config": config, "run": run, "volume_ml": None, "error": str(exc)}


def summarize(volumes, truth: float) -> dict:
    v = np.asarray([x for x in volumes if x is not None], dtype=float)
    if v.size == 0:
        return {"mean_ml": math.nan, "std_ml": math.nan, "mean_abs_err_pct": math.nan, "n": 0}
    return {
        "mean_ml": float(v.mean()),
        "std_ml": float(v.std()),
        "mean_abs_err_pct": float(np.mean(np.abs(v - truth) / truth) * 100.0),
        "n": int(v.size),
    }


def run_ablation(model: PhantomModel, scenario: Scenario, pose_pairs: list,
                 configs=tuple(CONFIGURATIONS), jobs: int = 1,
                 truth: Optional[float] = None) -> AblationResult:
    """Every configuration on the same initial placements and seeds.

    A run that fails in any configuration is dropped from every
    configuration's statistics so the comparison stays paired.
    """
    if len(pose_pairs) < 1:
        raise ValueError("need at least one placement")
    truth = ground_truth_volume(model) if truth is None else truth
    cells = [(scenario, c, r, poses) for r, poses in enumerate(pose_pairs) for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(scenario.phantom,)) as pool:
            rows = list(pool.map(_ablation_cell, cells))
    else:
        rows = [_run_cell(model, s, c, r, p) for s, c, r, p in cells]
    failed_runs = {r["run"] for r in rows if r["volume_ml"] is None}
    for r in rows:
        r["seed"] = scenario.seed
        r["rel_err"] = None if r["volume_ml"] is None else (r["volume_ml"] - truth) / truth
    summary = {}
    for c in configs:
        vols = [r["volume_ml"] for r in rows if r["config"] == c and r["run"] not in failed_runs]
        summary[c] = summarize(vols, truth)
        summary[c]["failures"] = sum(1 for r in rows if r["config"] == c and r["volume_ml"] is None)
    summary["_excluded_runs"] = sorted(failed_runs)
    return AblationResult(ground_truth_ml=truth, rows=rows, summary=summary)


def check_trends(result: AblationResult) -> dict:
    """Orderings expected from the motion corrections; name -> passed."""
    s = result.summary
    stds = {c: s[c]["std_ml"] for c in CONFIGURATIONS if c in s}
    return {
        "std_both_is_min": s["both"]["std_ml"] <= min(stds.values()),
        "err_both_le_none": s["both"]["mean_abs_err_pct"] <= s["none"]["mean_abs_err_pct"],
        "err_shadow_le_none": s["shadow"]["mean_abs_err_pct"] <= s["none"]["mean_abs_err_pct"],
    }


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def rows_csv(result: AblationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "run", "seed", "volume_ml", "rel_err"])
    for r in result.rows:
        w.writerow([r["config"], r["run"], r["seed"], _fmt(r["volume_ml"]), _fmt(r["rel_err"])])
    return buf.getvalue()


def summary_csv(result: AblationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "mean_ml", "std_ml", "mean_abs_err_pct"])
    for c in CONFIGURATIONS:
        if c in result.summary:
            s = result.summary[c]
            w.writerow([c, _fmt(s["mean_ml"]), _fmt(s["std_ml"]), _fmt(s["mean_abs_err_pct"])])
    return buf.getvalue()
