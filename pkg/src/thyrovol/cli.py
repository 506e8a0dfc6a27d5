"""Command-line entry point.

    thyrovol phantom   [--scenario F] [--out DIR] [--pitch MM]
    thyrovol scan      [--scenario F] [--out DIR] [--seed N] [--no-shadow-correction]
                       [--no-centering] [--export-frames]
    thyrovol volumetry [... same as scan ...]
    thyrovol ablate    [--scenario F] [--out DIR] [--seed N] [--jobs N] [--check-trends]
    thyrovol dose      --mass G --dose GY --uptake F --t-eff H [--out DIR]

Exit codes: 0 success, 1 validation error, 2 runtime or scan failure,
3 trend check failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (
    CONFIGURATIONS,
    ELLIPSOID_COEFFICIENT,
    DoseParams,
    check_trends,
    marinelli_activity,
    perturbed_pose_specs,
    pose_from_spec,
    rows_csv,
    run_ablation,
    run_conventional_baseline,
    run_robotic_volumetry,
    summary_csv,
)
from .compounding import CompoundingError, export_volume
from .controller import ScanError, scan_lobe
from .imaging import ImagingError, export_frames
from .phantom import PhantomError, analytic_thyroid_volume, build_phantom, ground_truth_volume
from .scenario import Perturbation, Scenario, ScenarioError, load_scenario

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_TRENDS = 3

log = logging.getLogger("thyrovol")


class ValidationError(Exception):
    pass


def _write_text(path: Path, text: str) -> Path:
    """Atomic write: a half-written file never appears under the final name."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def _clean(obj):
    # NaN is not valid JSON; failed statistics become null
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> Path:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    return _write_text(path, text + "\n")


def _write_jsonl(path: Path, records) -> Path:
    return _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _provenance(sc: Scenario) -> dict:
    return {"package_version": __version__, "scenario_digest": sc.digest(), "seed": sc.seed}


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario) if args.scenario else Scenario()
    if getattr(args, "seed", None) is not None:
        sc = sc.replace(seed=args.seed)
    if getattr(args, "pitch", None) is not None:
        if args.pitch <= 0:
            raise ValidationError("--pitch must be > 0")
        sc = sc.replace(phantom=dataclasses.replace(sc.phantom, voxel_pitch=args.pitch))
    changes = {}
    if getattr(args, "no_shadow_correction", False):
        changes["shadow_correction"] = False
    if getattr(args, "no_centering", False):
        changes["centering"] = False
    if changes:
        sc = sc.with_scan(**changes)
    return sc


def _poses_csv(poses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
    for p in poses:
        w.writerow([repr(float(v)) for v in (p.timestamp, *p.translation, *p.quaternion)])
    return buf.getvalue()


def _frames_csv(frames) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "t", "thyroid_px", "contact_cols"])
    for k, f in enumerate(frames):
        contact = int(f.contact.sum()) if f.contact is not None else ""
        w.writerow([k, repr(float(f.timestamp)), int(f.label.sum()), contact])
    return buf.getvalue()


def _write_scan(out: Path, lobe: str, res, export: bool) -> dict:
    rec = res.recording
    _write_jsonl(out / f"events_{lobe}.jsonl", res.events)
    _write_text(out / f"poses_{lobe}.csv", _poses_csv(rec.poses))
    _write_text(out / f"frames_{lobe}.csv", _frames_csv(rec.frames))
    if export:
        export_frames(rec.frames, out / f"frames_{lobe}", prefix=lobe)
    return {
        "frames": len(rec.frames),
        "poses": len(rec.poses),
        "t_start": rec.frames[0].timestamp if rec.frames else None,
        "t_end": rec.frames[-1].timestamp if rec.frames else None,
        "max_abs_alpha_corr": float(np.abs(res.trace[:, 0]).max()),
        "max_abs_y_corr": float(np.abs(res.trace[:, 1]).max()),
        "warnings": list(res.warnings),
    }


def cmd_phantom(args) -> int:
    from .plotting import plot_phantom

    sc = _scenario(args)
    out = Path(args.out)
    t0 = time.perf_counter()
    model = build_phantom(sc.phantom)
    voxel = ground_truth_volume(model)
    analytic = analytic_thyroid_volume(sc.phantom)
    prov = _provenance(sc)
    export_volume(out / "phantom_labels.raw", model.label_grid, model.spacing, model.origin,
                  {**prov, "classes": {"0": "background", "1": "thyroid", "2": "trachea"}})
    report = {
        "voxel_pitch_mm": sc.phantom.voxel_pitch,
        "dims": [int(d) for d in model.label_grid.shape],
        "ground_truth_ml": voxel,
        "analytic_ml": analytic,
        "discretization_error_pct": abs(voxel - analytic) / analytic * 100.0 if analytic else 0.0,
        "lobes_ml": {k: v.volume() / 1000.0 for k, v in sc.phantom.lobes.items()},
        "provenance": prov,
    }
    _write_json(out / "phantom_report.json", report)
    plot_phantom(model, out / "phantom.png")
    print(f"ground truth volume: {voxel:.4f} ml (analytic {analytic:.4f} ml, "
          f"pitch {sc.phantom.voxel_pitch} mm, {time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


def cmd_scan(args) -> int:
    from .plotting import plot_scan_trace

    sc = _scenario(args)
    out = Path(args.out)
    model = build_phantom(sc.phantom)
    summary = {"provenance": _provenance(sc), "scan": dataclasses.asdict(sc.scan), "lobes": {}}
    scans = {}
    for idx, lobe in enumerate(sorted(sc.initial_poses)):
        pose = pose_from_spec(model, sc.initial_poses[lobe], sc)
        res = scan_lobe(pose, model, sc.imaging, sc.oracle, sc.scan, seed=sc.seed, run=0,
                        lobe=lobe, lobe_index=idx)
        scans[lobe] = res
        summary["lobes"][lobe] = _write_scan(out, lobe, res, args.export_frames)
        log.info("lobe %s: %d frames recorded", lobe, len(res.recording.frames))
    _write_json(out / "scan_summary.json", summary)
    plot_scan_trace(scans, out / "scan_trace.png")
    print(f"recorded {len(scans)} sweep(s) into {out}")
    return EXIT_OK


def cmd_volumetry(args) -> int:
    from .plotting import plot_scan_trace, plot_volumetry

    sc = _scenario(args)
    out = Path(args.out)
    model = build_phantom(sc.phantom)
    truth = analytic_thyroid_volume(sc.phantom)
    res = run_robotic_volumetry(model, sc, intensity=True)
    prov = _provenance(sc)
    lobes = {}
    for lobe, scan in sorted(res.scans.items()):
        lobes[lobe] = _write_scan(out, lobe, scan, args.export_frames)
        lobes[lobe]["volume_ml"] = res.lobe_volumes_ml[lobe]
        lv = res.lobe_labels[lobe]
        export_volume(out / f"labels_{lobe}.raw", lv.occupancy, lv.spacing, lv.origin, prov)
        iv = res.intensities[lobe]
        export_volume(out / f"bmode_{lobe}.raw", iv.values, iv.spacing, iv.origin, prov)
    merged = res.labels
    export_volume(out / "labels_merged.raw", merged.occupancy, merged.spacing, merged.origin, prov)
    conv = run_conventional_baseline(model)
    comparison = {
        "schema_version": 1,
        "ground_truth": {"analytic_ml": truth, "voxel_ml": ground_truth_volume(model)},
        "robotic": {
            "volume_ml": res.volume_ml,
            "rel_err": (res.volume_ml - truth) / truth,
            "lobes": lobes,
        },
        "conventional": {
            "volume_ml": conv["volume_ml"],
            "rel_err": (conv["volume_ml"] - truth) / truth,
            "lobes": conv["lobes"],
            "coefficient": ELLIPSOID_COEFFICIENT,
        },
        "corrections": {"shadow_correction": sc.scan.shadow_correction,
                        "centering": sc.scan.centering},
        "provenance": prov,
    }
    _write_json(out / "comparison.json", comparison)
    plot_volumetry(merged, model, out / "volumetry.png")
    plot_scan_trace(res.scans, out / "scan_trace.png")
    print(f"robotic volume {res.volume_ml:.3f} ml, conventional {conv['volume_ml']:.3f} ml, "
          f"ground truth {truth:.3f} ml")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    sc = _scenario(args)
    if sc.perturbation is None:
        sc = sc.replace(perturbation=Perturbation())
    if sc.perturbation.count < 2:
        raise ValidationError("ablation needs perturbation.count >= 2")
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    out = Path(args.out)
    model = build_phantom(sc.phantom)
    truth = analytic_thyroid_volume(sc.phantom)
    t0 = time.perf_counter()
    pose_pairs = perturbed_pose_specs(sc)
    result = run_ablation(model, sc, pose_pairs, jobs=args.jobs, truth=truth)
    trends = check_trends(result)
    _write_text(out / "ablation_runs.csv", rows_csv(result))
    _write_text(out / "ablation_summary.csv", summary_csv(result))
    poses = [{lobe: dataclasses.asdict(p) for lobe, p in row.items()} for row in pose_pairs]
    doc = {
        "schema_version": 1,
        "ground_truth_ml": truth,
        "runs": len(pose_pairs),
        "statistics": "population standard deviation (divide by N)",
        "configurations": {c: {"shadow_correction": f[0], "centering": f[1]}
                           for c, f in CONFIGURATIONS.items()},
        "summary": {c: result.summary[c] for c in CONFIGURATIONS},
        "excluded_runs": result.summary["_excluded_runs"],
        "trends": trends,
        "initial_poses": poses,
        "provenance": _provenance(sc),
    }
    _write_json(out / "ablation.json", doc)
    plot_ablation(result, out / "ablation.png")
    print(summary_csv(result), end="")
    log.info("ablation of %d runs took %.1f s", len(pose_pairs), time.perf_counter() - t0)
    for name, ok in trends.items():
        print(f"trend {name}: {'ok' if ok else 'VIOLATED'}")
    if args.check_trends and not all(trends.values()):
        return EXIT_TRENDS
    return EXIT_OK


def cmd_dose(args) -> int:
    try:
        params = DoseParams(m=args.mass, D=args.dose, IU_24h=args.uptake, T_eff=args.t_eff)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    activity = marinelli_activity(params)
    print(f"activity: {activity!r}")
    if args.out:
        from .plotting import plot_dose

        out = Path(args.out)
        _write_json(out / "dose.json", {"inputs": dataclasses.asdict(params), "activity": activity})
        plot_dose(activity, params, out / "dose.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thyrovol", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="scenario JSON file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--pitch", type=float, help="phantom voxel pitch, mm")

    scan_flags = argparse.ArgumentParser(add_help=False)
    scan_flags.add_argument("--no-shadow-correction", action="store_true")
    scan_flags.add_argument("--no-centering", action="store_true")
    scan_flags.add_argument("--export-frames", action="store_true",
                            help="write every recorded frame as PGM")

    sub.add_parser("phantom", parents=[common], help="build and export the phantom") \
        .set_defaults(func=cmd_phantom)
    sub.add_parser("scan", parents=[common, scan_flags], help="robotic sweeps of both lobes") \
        .set_defaults(func=cmd_scan)
    sub.add_parser("volumetry", parents=[common, scan_flags],
                   help="sweeps, compounding and volume vs the conventional baseline") \
        .set_defaults(func=cmd_volumetry)
    ab = sub.add_parser("ablate", parents=[common], help="four-configuration ablation")
    ab.add_argument("--jobs", type=int, default=1, help="worker processes")
    ab.add_argument("--check-trends", action="store_true",
                    help="exit 3 if an expected ordering is violated")
    ab.set_defaults(func=cmd_ablate)
    d = sub.add_parser("dose", help="radioiodine activity from thyroid mass")
    d.add_argument("--mass", type=float, required=True, help="thyroid mass, g")
    d.add_argument("--dose", type=float, required=True, help="target dose, Gy")
    d.add_argument("--uptake", type=float, required=True, help="24 h iodine uptake fraction")
    d.add_argument("--t-eff", type=float, required=True, help="effective half-life, h")
    d.add_argument("--out", type=Path, help="optional output directory")
    d.set_defaults(func=cmd_dose)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, PhantomError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ScanError, ImagingError, CompoundingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
