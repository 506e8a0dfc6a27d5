"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from thyrovol import cli
from thyrovol.analysis import (
    AxisMeasurements,
    DoseParams,
    ellipsoid_volume,
    marinelli_activity,
    run_conventional_baseline,
    run_robotic_volumetry,
)
from thyrovol.controller import scan_lobe
from thyrovol.imaging import SegOracleConfig
from thyrovol.phantom import (
    EllipsoidSpec,
    PhantomSpec,
    analytic_thyroid_volume,
    build_phantom,
    ground_truth_volume,
)
from thyrovol.scenario import InitialPoseSpec, Perturbation, Scenario, save_scenario
from thyrovol.analysis import pose_from_spec
from thyrovol.transforms import lerp, quat_angle, slerp

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


def test_1_single_ellipsoid_volume(report):
    t0 = time.perf_counter()
    spec = PhantomSpec(lobe_left=EllipsoidSpec(center=(0.0, -20.0, -18.0),
                                               semi_axes=(20.0, 10.0, 10.0)),
                       lobe_right=None, isthmus=None, trachea=None, voxel_pitch=0.5)
    vol = ground_truth_volume(build_phantom(spec)) * 1000.0
    dt = time.perf_counter() - t0
    exact = 4.0 / 3.0 * math.pi * 20 * 10 * 10
    err = abs(vol - exact) / exact
    report(1, err <= 0.01 and dt < 5.0,
           f"voxel {vol:.1f} mm^3 vs {exact:.1f} (err {err * 100:.3f}%), {dt:.2f} s")


def test_2_slerp_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 100_000
    q0s = rng.normal(size=(n, 4))
    q0s /= np.linalg.norm(q0s, axis=1, keepdims=True)
    q1s = rng.normal(size=(n, 4))
    q1s /= np.linalg.norm(q1s, axis=1, keepdims=True)
    ts = rng.random(n)
    bad = {"endpoint": 0, "norm": 0, "geodesic": 0, "lerp": 0}
    for q0, q1, t in zip(q0s, q1s, ts):
        if not (np.array_equal(slerp(q0, q1, 0.0), q0) and np.array_equal(slerp(q0, q1, 1.0), q1)):
            bad["endpoint"] += 1
        q = slerp(q0, q1, t)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            bad["norm"] += 1
        total = quat_angle(q0, q1)
        if abs(quat_angle(q0, q) - t * total) > 1e-6:
            bad["geodesic"] += 1
        a, b = q0[:3], q1[:3]
        if not np.array_equal(lerp(a, b, 0.5), a + 0.5 * (b - a)):
            bad["lerp"] += 1
    dt = time.perf_counter() - t0
    report(2, not any(bad.values()) and dt < 10.0, f"{n} cases, failures {bad}, {dt:.2f} s")


def test_3_end_to_end_accuracy(report, default_model):
    t0 = time.perf_counter()
    truth = analytic_thyroid_volume(default_model.spec)
    errs = []
    for seed in range(10):
        res = run_robotic_volumetry(default_model, Scenario(seed=seed), keep_scans=False)
        errs.append(abs(res.volume_ml - truth) / truth)
    dt = time.perf_counter() - t0
    mean = float(np.mean(errs)) * 100.0
    report(3, mean <= 10.0 and dt < 120.0,
           f"mean |error| {mean:.2f}% over 10 seeds (max {max(errs) * 100:.2f}%), {dt:.1f} s")


def test_4_ablation_trends(report, tmp_path):
    sc = tmp_path / "ablate.json"
    save_scenario(Scenario(perturbation=Perturbation(count=30)), sc)
    t0 = time.perf_counter()
    rc = cli.main(["ablate", "--scenario", str(sc), "--out", str(tmp_path / "o"),
                   "--check-trends"])
    dt = time.perf_counter() - t0
    doc = json.loads((tmp_path / "o" / "ablation.json").read_text())
    summary = {c: round(doc["summary"][c]["std_ml"], 3) for c in ("none", "shadow", "centering", "both")}
    report(4, rc == 0 and all(doc["trends"].values()) and doc["runs"] >= 30 and dt < 600.0,
           f"trends {doc['trends']}, std {summary}, exit {rc}, {dt:.0f} s")


def test_5_conventional_bias(report, default_model):
    truth = analytic_thyroid_volume(default_model.spec)
    conv = run_conventional_baseline(default_model)["volume_ml"]
    under = (truth - conv) / truth
    lobe = EllipsoidSpec(center=(0.0, -20.0, -18.0), semi_axes=(28.0, 12.0, 10.0))
    pure_spec = PhantomSpec(lobe_left=lobe, lobe_right=None, isthmus=None)
    pure = build_phantom(pure_spec)
    pure_truth = analytic_thyroid_volume(pure_spec)
    pure_under = 1.0 - run_conventional_baseline(pure)["volume_ml"] / pure_truth
    closed = 1.0 - 0.48 * 8.0 / (4.0 * math.pi / 3.0)
    rel = abs(pure_under - closed) / closed
    report(5, under > 0.05 and rel <= 0.01,
           f"default underestimate {under * 100:.2f}%, pure {pure_under * 100:.3f}% "
           f"vs closed form {closed * 100:.3f}% (rel diff {rel * 100:.2f}%)")


def test_6_controller_safety(report, default_model):
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    base = Scenario()
    problems = []
    covered = 0
    for k in range(100):
        lobe = ("left", "right")[k % 2]
        home = base.initial_poses[lobe]
        spec = InitialPoseSpec(y=home.y + rng.uniform(-10, 10), tilt_deg=rng.uniform(-10, 10))
        sc = base.replace(seed=k, oracle=SegOracleConfig(dropout_prob=rng.uniform(0, 0.05)))
        pose = pose_from_spec(default_model, spec, sc)
        try:
            res = scan_lobe(pose, default_model, sc.imaging, sc.oracle, sc.scan, seed=k,
                            lobe=lobe, lobe_index=k % 2)
        except Exception as exc:  # noqa: BLE001
            problems.append(f"{k}: {exc}")
            continue
        steps = res.events[-1]["steps"]
        if steps > sc.scan.max_total_steps:
            problems.append(f"{k}: {steps} steps")
        if np.abs(res.trace[:, 0]).max() > sc.scan.alpha_max or \
                np.abs(res.trace[:, 1]).max() > sc.scan.y_max:
            problems.append(f"{k}: clamp violated")
        frames = res.recording.frames
        xs = np.array([f.pose.translation[0] for f in frames])
        h = res.history  # every rendered frame, recorded or not
        empty = h[h[:, 2] == 0, 1]
        step = sc.scan.step_size
        for end in (xs[0], xs[-1]):
            if empty.size == 0 or np.min(np.abs(empty - end)) > step + 1e-9:
                problems.append(f"{k}: recording end x={end:.1f} not bracketed")
        lobe_spec = default_model.spec.lobes[lobe]
        cx, a = lobe_spec.center[0], lobe_spec.semi_axes[0]
        if xs.min() <= cx - a + step and xs.max() >= cx + a - step:
            covered += 1
    dt = time.perf_counter() - t0
    report(6, not problems and dt < 300.0,
           f"100 randomized scans, {len(problems)} problems {problems[:3]}, "
           f"{covered} sweeps span the full lobe, {dt:.0f} s")


def _outputs(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.suffix in {".csv", ".json", ".jsonl"}}


def test_7_determinism(report, tmp_path):
    sc = tmp_path / "sc.json"
    save_scenario(Scenario(seed=7, perturbation=Perturbation(count=2)), sc)
    commands = {
        "phantom": [],
        "scan": [],
        "volumetry": [],
        "ablate": [],
        "dose": ["--mass", "20", "--dose", "150", "--uptake", "0.5", "--t-eff", "120"],
    }
    diffs = []
    for name, extra in commands.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / rep / name
            base = [name, "--out", str(out)] + ([] if name == "dose" else ["--scenario", str(sc)])
            assert cli.main(base + extra) == 0
            outs.append(_outputs(out))
        if not outs[0] or outs[0] != outs[1]:
            diffs.append(name)
    report(7, not diffs, f"{len(commands)} subcommands run twice, differing: {diffs or 'none'}")


def test_8_arithmetic(report, capsys):
    a = marinelli_activity(DoseParams(m=20.0, D=150.0, IU_24h=0.5, T_eff=120.0))
    rc = cli.main(["dose", "--mass", "20", "--dose", "150", "--uptake", "0.5", "--t-eff", "120"])
    printed = capsys.readouterr().out
    v = ellipsoid_volume(AxisMeasurements(4.0, 2.0, 1.5))
    ok = a == 1250.0 and rc == 0 and "1250.0" in printed and v == 0.48 * 4.0 * 2.0 * 1.5
    report(8, ok, f"activity {a}, cli exit {rc}, ellipsoid 0.48*4*2*1.5 = {v}")
