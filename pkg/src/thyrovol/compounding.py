"""Pose interpolation, forward-splat compounding and label volumetry."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .imaging import ImagingConfig, ProbePose, plane_points
from .transforms import lerp, matrix_to_quat, quat_to_matrix, slerp

__all__ = [
    "CompoundingConfig",
    "LabelVolume",
    "compound",
    "interpolate_pose",
    "merge_lobes",
    "slerp",
    "volume_of",
]


class CompoundingError(ValueError):
    pass


@dataclass(frozen=True)
class CompoundingConfig:
    voxel_pitch: float = 0.5  # mm
    vote: str = "majority"  # "majority" or "any" (any-hit)
    padding: float = 2.0  # mm around the sweep bounds

    def __post_init__(self):
        if self.voxel_pitch <= 0:
            raise CompoundingError("voxel_pitch must be > 0")
        if self.vote not in ("any", "majority"):
            raise CompoundingError("vote must be 'any' or 'majority'")
        if self.padding < 0:
            raise CompoundingError("padding must be >= 0")


@dataclass(frozen=True, eq=False)
class LabelVolume:
    occupancy: np.ndarray  # bool, indexed [ix, iy, iz]
    spacing: tuple[float, float, float]
    origin: np.ndarray  # corner of voxel (0, 0, 0)

    def __post_init__(self):
        if min(self.spacing) <= 0:
            raise CompoundingError("spacing must be > 0")
        object.__setattr__(self, "occupancy", np.asarray(self.occupancy, dtype=bool))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.occupancy.shape) * np.asarray(self.spacing)


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    values: np.ndarray  # float32 mean of contributions, NaN where unvisited
    spacing: tuple[float, float, float]
    origin: np.ndarray


def volume_of(v: LabelVolume) -> float:
    """Occupied voxel count times the voxel volume, in ml."""
    d1, d2, d3 = v.spacing
    return d1 * d2 * d3 * int(np.count_nonzero(v.occupancy)) / 1000.0


def interpolate_pose(poses: Sequence[ProbePose], t: float) -> ProbePose:
    """Pose at time ``t``: lerp for translation, slerp for rotation.

    Stored poses are returned unchanged at their own timestamps. Times
    outside the recorded range raise instead of extrapolating.
    """
    if not poses:
        raise CompoundingError("no poses to interpolate")
    times = [p.timestamp for p in poses]
    if t < times[0] or t > times[-1]:
        raise CompoundingError(f"t={t} outside the pose range [{times[0]}, {times[-1]}]")
    i = bisect.bisect_left(times, t)
    if times[i] == t:
        return poses[i]
    a, b = poses[i - 1], poses[i]
    u = (t - a.timestamp) / (b.timestamp - a.timestamp)
    q = slerp(matrix_to_quat(a.rotation), matrix_to_quat(b.rotation), u)
    return ProbePose(quat_to_matrix(q), lerp(a.translation, b.translation, u), t)


def _grid_for(points_lo: np.ndarray, points_hi: np.ndarray, pitch: float, padding: float):
    origin = np.floor((points_lo - padding) / pitch) * pitch
    dims = np.ceil((points_hi + padding - origin) / pitch).astype(int)
    return origin, tuple(int(d) for d in np.maximum(dims, 1))


def _frame_corners(pose: ProbePose, imaging: ImagingConfig) -> np.ndarray:
    _, yh, zh = pose.rotation.T
    half = 0.5 * imaging.footprint
    t = pose.translation
    return np.array([t + s * half * yh + d * zh for s in (-1, 1) for d in (0.0, imaging.depth)])


def compound(sweep, cfg: CompoundingConfig, imaging: Optional[ImagingConfig] = None,
             intensity: bool = True):
    """Splat every recorded frame into a voxel grid sized to the sweep.

    Each frame is placed with the pose interpolated at its timestamp; every
    pixel lands in the voxel containing its center. Returns
    ``(IntensityVolume or None, LabelVolume)``.
    """
    imaging = imaging or getattr(sweep, "imaging", None) or ImagingConfig()
    frames = list(sweep.frames)
    if not frames:
        raise CompoundingError("sweep has no frames")
    poses = list(sweep.poses)
    placed = []
    for k, fr in enumerate(frames):
        try:
            placed.append(interpolate_pose(poses, fr.timestamp))
        except CompoundingError as exc:
            raise CompoundingError(f"frame {k} (t={fr.timestamp}): {exc}") from None
    corners = np.concatenate([_frame_corners(p, imaging) for p in placed])
    pitch = cfg.voxel_pitch
    origin, dims = _grid_for(corners.min(axis=0), corners.max(axis=0), pitch, cfg.padding)
    n_vox = int(np.prod(dims))
    strides = np.array([dims[1] * dims[2], dims[2], 1])

    def flat_index(pts: np.ndarray) -> np.ndarray:
        idx = np.floor((pts - origin) / pitch).astype(np.int64)
        idx = np.clip(idx, 0, np.array(dims) - 1)
        return idx @ strides

    occupancy = np.zeros(n_vox, dtype=bool)
    need_all = intensity or cfg.vote == "majority"
    hits = np.zeros(n_vox, dtype=np.int64)
    total = np.zeros(n_vox, dtype=np.int64) if need_all else None
    isum = np.zeros(n_vox, dtype=np.float64) if intensity else None
    ys = (np.arange(imaging.width_px) + 0.5) * imaging.lateral_spacing - 0.5 * imaging.footprint
    zs = (np.arange(imaging.depth_px) + 0.5) * imaging.axial_spacing
    # accumulate indices over batches of frames; one bincount per batch
    batch = 64
    for b0 in range(0, len(frames), batch):
        flat_all, flat_lab, vals = [], [], []
        for fr, pose in zip(frames[b0:b0 + batch], placed[b0:b0 + batch]):
            if need_all:
                flat = flat_index(plane_points(pose, imaging).reshape(-1, 3))
                flat_all.append(flat)
                flat_lab.append(flat[fr.label.ravel()])
                if intensity:
                    vals.append(fr.intensity.ravel())
            elif fr.label.any():
                rows, cols = np.nonzero(fr.label)
                _, yh, zh = pose.rotation.T
                pts = pose.translation + ys[cols, None] * yh + zs[rows, None] * zh
                flat_lab.append(flat_index(pts))
        if flat_lab:
            lab = np.concatenate(flat_lab)
            if cfg.vote == "majority":
                hits += np.bincount(lab, minlength=n_vox)
            else:
                occupancy[lab] = True
        if flat_all:
            flat = np.concatenate(flat_all)
            total += np.bincount(flat, minlength=n_vox)
            if intensity:
                isum += np.bincount(flat, weights=np.concatenate(vals).astype(float),
                                    minlength=n_vox)
    if cfg.vote == "majority":
        occupancy = 2 * hits > total
    labels = LabelVolume(occupancy.reshape(dims), (pitch, pitch, pitch), origin)
    ivol = None
    if intensity:
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(total > 0, isum / np.maximum(total, 1), np.nan)
        ivol = IntensityVolume(mean.reshape(dims).astype(np.float32), (pitch, pitch, pitch),
                               origin)
    return ivol, labels


def merge_lobes(a: LabelVolume, b: LabelVolume) -> LabelVolume:
    """Spatial union of two label volumes on a grid at the finer pitch.

    An output voxel is set iff its center falls inside an occupied voxel of
    either input, so overlapping thyroid is counted once.
    """
    pitch = np.minimum(np.asarray(a.spacing), np.asarray(b.spacing))
    lo = np.minimum(a.origin, b.origin)
    hi = np.maximum(a.upper, b.upper)
    dims = np.maximum(np.ceil((hi - lo) / pitch - 1e-9).astype(int), 1)
    out = np.zeros(tuple(dims), dtype=bool)
    for v in (a, b):
        sel = []
        valid = []
        for k in range(3):
            centers = lo[k] + (np.arange(dims[k]) + 0.5) * pitch[k]
            idx = np.floor((centers - v.origin[k]) / v.spacing[k]).astype(int)
            ok = (idx >= 0) & (idx < v.occupancy.shape[k])
            sel.append(np.clip(idx, 0, v.occupancy.shape[k] - 1))
            valid.append(ok)
        sub = v.occupancy[np.ix_(*sel)]
        sub &= valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
        out |= sub
    return LabelVolume(out, tuple(float(p) for p in pitch), lo)


def export_volume(path: Path, data: np.ndarray, spacing, origin,
                  provenance: Optional[dict] = None) -> Path:
    """Raw little-endian voxel file plus a ``.json`` sidecar; index order [x, y, z], C order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(data)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)
    sidecar = {
        "file": path.name,
        "dtype": arr.dtype.str,
        "dims": [int(d) for d in arr.shape],
        "order": "C, index [x, y, z]",
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in origin],
        "provenance": provenance or {},
    }
    side = path.with_suffix(".json")
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return side


def load_volume(sidecar: Path) -> tuple[np.ndarray, dict]:
    sidecar = Path(sidecar)
    meta = json.loads(sidecar.read_text())
    raw = (sidecar.parent / meta["file"]).read_bytes()
    arr = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["dims"])
    return arr, meta
