"""Scenario files: one JSON document holding every configuration block.

Schema (version 1)::

    {
      "schema_version": 1,
      "seed": 0,
      "phantom":   {PhantomSpec fields; lobes/isthmus/trachea as objects or null},
      "imaging":   {ImagingConfig fields},
      "oracle":    {SegOracleConfig fields},
      "scan":      {ScanConfig fields},
      "compounding": {CompoundingConfig fields},
      "initial_poses": {"left": {"x": 0, "y": -20, "tilt_deg": 0}, "right": {...}},
      "perturbation": {"count": 30, "lateral_offset_mm": 10, "tilt_deg": 10} or null
    }

Every block is optional and falls back to the defaults. Unknown keys are
rejected with the offending field path in the message.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .compounding import CompoundingConfig
from .controller import ScanConfig
from .imaging import ImagingConfig, SegOracleConfig
from .phantom import BoxSpec, CylinderSpec, EllipsoidSpec, PhantomSpec

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario file; the message names the offending field."""


@dataclass(frozen=True)
class InitialPoseSpec:
    x: float = 0.0
    y: float = 0.0
    tilt_deg: float = 0.0  # extra roll on top of the skin-normal orientation
    quaternion: Optional[tuple[float, float, float, float]] = None  # overrides the orientation


@dataclass(frozen=True)
class Perturbation:
    count: int = 30
    lateral_offset_mm: float = 10.0
    tilt_deg: float = 10.0

    def __post_init__(self):
        if self.count < 1:
            raise ScenarioError("perturbation.count must be >= 1")
        if self.lateral_offset_mm < 0 or self.tilt_deg < 0:
            raise ScenarioError("perturbation ranges must be >= 0")


def _default_poses() -> dict[str, InitialPoseSpec]:
    return {"left": InitialPoseSpec(y=-20.0), "right": InitialPoseSpec(y=20.0)}


@dataclass(frozen=True)
class Scenario:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    oracle: SegOracleConfig = field(default_factory=SegOracleConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    compounding: CompoundingConfig = field(default_factory=CompoundingConfig)
    initial_poses: dict = field(default_factory=_default_poses)
    perturbation: Optional[Perturbation] = None
    seed: int = 0

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def with_scan(self, **changes) -> "Scenario":
        return dataclasses.replace(self, scan=dataclasses.replace(self.scan, **changes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ScenarioError(f"{path}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    for f in dataclasses.fields(cls):
        v = getattr(obj, f.name)
        if isinstance(v, tuple) and not all(isinstance(x, (int, float)) for x in v):
            raise ScenarioError(f"{path}.{f.name}: expected numbers")
    return obj


_PHANTOM_PARTS = {
    "lobe_left": EllipsoidSpec,
    "lobe_right": EllipsoidSpec,
    "isthmus": BoxSpec,
    "trachea": CylinderSpec,
}


def _phantom(data: Any) -> PhantomSpec:
    if not isinstance(data, dict):
        raise ScenarioError("phantom: expected an object")
    data = dict(data)
    for key, cls in _PHANTOM_PARTS.items():
        if key in data and data[key] is not None:
            part = _build(cls, data[key], f"phantom.{key}")
            for name in ("center", "semi_axes", "extents"):
                if hasattr(part, name) and len(getattr(part, name)) != 3:
                    raise ScenarioError(f"phantom.{key}.{name}: expected 3 values")
            data[key] = part
    spec = _build(PhantomSpec, data, "phantom")
    try:
        spec.validate()
    except ValueError as exc:
        raise ScenarioError(f"phantom: {exc}") from None
    return spec


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario: expected a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version: unsupported version {version!r}")
    known = {f.name for f in dataclasses.fields(Scenario)} | {"schema_version"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ScenarioError(f"scenario: unknown field(s) {', '.join(unknown)}")
    kw: dict[str, Any] = {}
    if "phantom" in data:
        kw["phantom"] = _phantom(data["phantom"])
    for key, cls in (("imaging", ImagingConfig), ("oracle", SegOracleConfig),
                     ("scan", ScanConfig), ("compounding", CompoundingConfig)):
        if key in data:
            kw[key] = _build(cls, data[key], key)
    if "initial_poses" in data:
        poses = data["initial_poses"]
        if not isinstance(poses, dict) or not poses:
            raise ScenarioError("initial_poses: expected an object keyed by lobe")
        kw["initial_poses"] = {
            lobe: _build(InitialPoseSpec, p, f"initial_poses.{lobe}") for lobe, p in poses.items()
        }
    if data.get("perturbation") is not None:
        kw["perturbation"] = _build(Perturbation, data["perturbation"], "perturbation")
    if "seed" in data:
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
            raise ScenarioError("seed: expected an integer")
        kw["seed"] = data["seed"]
    if "initial_poses" not in kw:
        names = set(kw.get("phantom", PhantomSpec()).lobes)
        kw["initial_poses"] = {k: v for k, v in _default_poses().items() if k in names}
    sc = Scenario(**kw)
    lobes = set(sc.phantom.lobes)
    extra = sorted(set(sc.initial_poses) - lobes)
    if extra:
        raise ScenarioError(f"initial_poses: no such lobe(s) {', '.join(extra)}")
    return sc


def load_scenario(path: Path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(data)


def save_scenario(sc: Scenario, path: Path) -> None:
    Path(path).write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True))
