"""Synthetic B-mode frames, contact/shadow model and the segmentation oracle.

A frame is an image plane spanned by the probe's lateral axis (y-hat) and
depth axis (z-hat); x-hat is the out-of-plane scan direction. Images are
stored as ``(depth_px, width_px)`` arrays, so a "column" is one lateral
position on the probe face.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .phantom import BACKGROUND, THYROID, TRACHEA, PhantomModel, SurfaceField, classify_plane
from .transforms import matrix_to_quat, quat_to_matrix


class ImagingError(ValueError):
    pass


_EYE = np.eye(3)


@dataclass(frozen=True, eq=False)
class ProbePose:
    rotation: np.ndarray  # 3x3, columns are the probe axes in world coordinates
    translation: np.ndarray  # probe-face center, mm
    timestamp: float = 0.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3) or np.abs(r.T @ r - _EYE).max() > 1e-9:
            raise ImagingError("rotation must be an orthonormal 3x3 matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def from_quaternion(cls, q, translation, timestamp: float = 0.0) -> "ProbePose":
        return cls(quat_to_matrix(q), translation, timestamp)

    @property
    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    def with_translation(self, t) -> "ProbePose":
        return ProbePose(self.rotation, t, self.timestamp)

    def at(self, timestamp: float) -> "ProbePose":
        return ProbePose(self.rotation, self.translation, timestamp)

    def to_dict(self) -> dict:
        return {
            "t": self.timestamp,
            "translation": [float(v) for v in self.translation],
            "quaternion": [float(v) for v in self.quaternion],
        }


@dataclass(frozen=True)
class ImagingConfig:
    width_px: int = 96
    depth_px: int = 128
    footprint: float = 40.0  # mm, lateral aperture
    depth: float = 50.0  # mm
    frame_rate: float = 30.0  # Hz
    intensity_background: float = 120.0
    intensity_thyroid: float = 80.0
    intensity_trachea: float = 30.0
    intensity_shadow: float = 5.0
    speckle_std: float = 10.0
    contact_gap_tol: float = 2.0  # mm
    indentation: float = 1.0  # mm

    def __post_init__(self):
        if self.frame_rate <= 0 or self.footprint <= 0 or self.depth <= 0:
            raise ImagingError("frame_rate, footprint and depth must be > 0")
        if self.width_px < 1 or self.depth_px < 1:
            raise ImagingError("image dimensions must be >= 1 px")
        for name in ("background", "thyroid", "trachea", "shadow"):
            v = getattr(self, f"intensity_{name}")
            if not 0.0 <= v <= 255.0:
                raise ImagingError(f"intensity_{name} must lie in [0, 255]")
        if self.speckle_std < 0:
            raise ImagingError("speckle_std must be >= 0")

    @property
    def lateral_spacing(self) -> float:
        return self.footprint / self.width_px

    @property
    def axial_spacing(self) -> float:
        return self.depth / self.depth_px

    def lateral_positions(self) -> np.ndarray:
        return (np.arange(self.width_px) + 0.5) * self.lateral_spacing - 0.5 * self.footprint

    def depth_positions(self) -> np.ndarray:
        return (np.arange(self.depth_px) + 0.5) * self.axial_spacing

    def pixel_to_plane(self, col, row):
        """Pixel indices -> in-plane (lateral, depth) coordinates, mm."""
        y = (np.asarray(col) + 0.5) * self.lateral_spacing - 0.5 * self.footprint
        z = (np.asarray(row) + 0.5) * self.axial_spacing
        return y, z

    def plane_to_pixel(self, y, z):
        col = np.floor((np.asarray(y) + 0.5 * self.footprint) / self.lateral_spacing).astype(int)
        row = np.floor(np.asarray(z) / self.axial_spacing).astype(int)
        return col, row


@dataclass(frozen=True)
class SegOracleConfig:
    dropout_prob: float = 0.0
    boundary_jitter: float = 0.0  # mm; dilation or erosion radius, random sign
    shadow_masking: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ImagingError("dropout_prob must lie in [0, 1]")
        if self.boundary_jitter < 0:
            raise ImagingError("boundary_jitter must be >= 0")


@dataclass(frozen=True, eq=False)
class Frame:
    intensity: np.ndarray  # uint8, (depth_px, width_px)
    label: np.ndarray  # bool, same shape
    pose: ProbePose
    timestamp: float
    contact: Optional[np.ndarray] = field(default=None)

    @property
    def has_thyroid(self) -> bool:
        return bool(self.label.any())


def probe_frame_axes(pose: ProbePose):
    r = pose.rotation
    return r[:, 0].copy(), r[:, 1].copy(), r[:, 2].copy()


def face_points(pose: ProbePose, cfg: ImagingConfig) -> np.ndarray:
    _, yhat, _ = probe_frame_axes(pose)
    return pose.translation + cfg.lateral_positions()[:, None] * yhat


def contact_mask(pose: ProbePose, surface: SurfaceField, cfg: ImagingConfig) -> np.ndarray:
    """Per-column contact flags: the face-to-skin gap must not exceed the tolerance."""
    _, _, zhat = probe_frame_axes(pose)
    if zhat[2] >= 0.0:
        # face not looking into the tissue
        return np.zeros(cfg.width_px, dtype=bool)
    p = face_points(pose, cfg)
    skin = surface.height(p[:, 0], p[:, 1])
    gap = p[:, 2] - skin
    return np.where(np.isnan(gap), False, gap <= cfg.contact_gap_tol)


def settle_z(pose: ProbePose, surface: SurfaceField, cfg: ImagingConfig) -> ProbePose:
    """Place the face center ``indentation`` below the skin, keeping x, y and rotation."""
    x, y, _ = pose.translation
    if not surface.contains(x, y):
        raise ImagingError(f"probe position ({x:.2f}, {y:.2f}) mm is outside the scan region")
    z = float(surface.height(x, y)) - cfg.indentation
    return pose.with_translation([x, y, z])


def plane_points(pose: ProbePose, cfg: ImagingConfig) -> np.ndarray:
    """World coordinates of every pixel center, shape (depth_px, width_px, 3)."""
    _, yhat, zhat = probe_frame_axes(pose)
    ys = cfg.lateral_positions()
    zs = cfg.depth_positions()
    return (pose.translation
            + zs[:, None, None] * zhat
            + ys[None, :, None] * yhat)


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def degrade_label(label: np.ndarray, contact: np.ndarray, cfg: ImagingConfig,
                  oracle: SegOracleConfig, rng: np.random.Generator) -> np.ndarray:
    # draws are unconditional so the stream does not depend on the config
    drop = rng.random() < oracle.dropout_prob
    sign = 1 if rng.random() < 0.5 else -1
    out = label.copy()
    if oracle.boundary_jitter > 0.0 and out.any():
        px = 0.5 * (cfg.lateral_spacing + cfg.axial_spacing)
        radius = int(round(oracle.boundary_jitter / px))
        if radius > 0:
            op = ndimage.binary_dilation if sign > 0 else ndimage.binary_erosion
            out = op(out, structure=_disk(radius))
    if oracle.shadow_masking:
        out[:, ~contact] = False
    if drop:
        out[:] = False
    return out


def render_frame(pose: ProbePose, model: PhantomModel, cfg: ImagingConfig,
                 oracle: SegOracleConfig, rng: np.random.Generator,
                 surface: Optional[SurfaceField] = None) -> Frame:
    surface = surface if surface is not None else model.surface
    _, yhat, zhat = probe_frame_axes(pose)
    classes = classify_plane(model.spec, pose.translation, yhat, zhat,
                             cfg.lateral_positions(), cfg.depth_positions())
    levels = np.empty(3)
    levels[BACKGROUND] = cfg.intensity_background
    levels[THYROID] = cfg.intensity_thyroid
    levels[TRACHEA] = cfg.intensity_trachea
    img = levels[classes]
    contact = contact_mask(pose, surface, cfg)
    img[:, ~contact] = cfg.intensity_shadow
    if cfg.speckle_std > 0:
        img = img + cfg.speckle_std * rng.standard_normal(img.shape)
    intensity = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    label = degrade_label(classes == THYROID, contact, cfg, oracle, rng)
    return Frame(intensity=intensity, label=label, pose=pose,
                 timestamp=pose.timestamp, contact=contact)


def write_pgm(path: Path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def export_frames(frames, out_dir: Path, prefix: str = "frame") -> Path:
    """Write intensity and label PGMs plus a JSON index of timestamps and poses."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for k, fr in enumerate(frames):
        stem = f"{prefix}_{k:05d}"
        write_pgm(out_dir / f"{stem}.pgm", fr.intensity)
        write_pgm(out_dir / f"{stem}_label.pgm", fr.label.astype(np.uint8) * 255)
        index.append({"file": f"{stem}.pgm", "label": f"{stem}_label.pgm", **fr.pose.to_dict()})
    path = out_dir / f"{prefix}_index.json"
    path.write_text(json.dumps(index, indent=1))
    return path
