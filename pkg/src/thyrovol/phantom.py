"""Synthetic neck phantom: analytic solids plus their voxelization.

Coordinates (mm): x runs superior-inferior along the neck axis, y is
lateral, z is anterior-posterior with the skin crest at z = 0 and tissue
below it. The neck is a cylinder of radius ``neck_radius`` whose axis is
the line y = 0, z = -neck_radius.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

BACKGROUND = 0
THYROID = 1
TRACHEA = 2

CLASS_NAMES = {BACKGROUND: "background", THYROID: "thyroid", TRACHEA: "trachea"}


class PhantomError(ValueError):
    """Raised for phantom specs that violate a geometric invariant."""


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]  # along x, y, z before rotation
    rotation_deg: float = 0.0  # about the x (superior-inferior) axis

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        th = np.deg2rad(self.rotation_deg)
        c, s = np.cos(th), np.sin(th)
        u = c * d[..., 1] + s * d[..., 2]
        v = -s * d[..., 1] + c * d[..., 2]
        a, b, cc = self.semi_axes
        return (d[..., 0] / a) ** 2 + (u / b) ** 2 + (v / cc) ** 2 <= 1.0

    def quadric(self) -> np.ndarray:
        """Matrix M with p inside iff (p - center)^T M (p - center) <= 1."""
        th = np.deg2rad(self.rotation_deg)
        c, s = np.cos(th), np.sin(th)
        rot = np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
        a, b, cc = self.semi_axes
        return rot.T @ np.diag([1.0 / a ** 2, 1.0 / b ** 2, 1.0 / cc ** 2]) @ rot

    def volume(self) -> float:
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * np.pi * a * b * c

    def yz_outline(self, n: int = 720) -> np.ndarray:
        """Points of the largest cross-section (x = center) in the y-z plane."""
        t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        _, b, c = self.semi_axes
        th = np.deg2rad(self.rotation_deg)
        u, v = b * np.cos(t), c * np.sin(t)
        y = self.center[1] + np.cos(th) * u - np.sin(th) * v
        z = self.center[2] + np.sin(th) * u + np.cos(th) * v
        return np.stack([y, z], axis=1)

    def half_extents(self) -> np.ndarray:
        a, b, c = self.semi_axes
        th = np.deg2rad(self.rotation_deg)
        hy = np.hypot(b * np.cos(th), c * np.sin(th))
        hz = np.hypot(b * np.sin(th), c * np.cos(th))
        return np.array([a, hy, hz])


@dataclass(frozen=True)
class BoxSpec:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]  # full edge lengths along x, y, z

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.abs(pts - np.asarray(self.center))
        h = 0.5 * np.asarray(self.extents)
        return (d[..., 0] <= h[0]) & (d[..., 1] <= h[1]) & (d[..., 2] <= h[2])

    def volume(self) -> float:
        return float(np.prod(self.extents))


@dataclass(frozen=True)
class CylinderSpec:
    """Cylinder parallel to the x axis through ``center``."""

    center: tuple[float, float, float]
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        dy = pts[..., 1] - self.center[1]
        dz = pts[..., 2] - self.center[2]
        return dy * dy + dz * dz <= self.radius * self.radius


def _default_left() -> EllipsoidSpec:
    return EllipsoidSpec(center=(0.0, -20.0, -18.0), semi_axes=(28.0, 12.0, 10.0))


def _default_right() -> EllipsoidSpec:
    return EllipsoidSpec(center=(0.0, 20.0, -18.0), semi_axes=(28.0, 12.0, 10.0))


def _default_isthmus() -> BoxSpec:
    return BoxSpec(center=(0.0, 0.0, -12.0), extents=(14.0, 20.0, 8.0))


def _default_trachea() -> CylinderSpec:
    return CylinderSpec(center=(0.0, 0.0, -34.0), radius=9.0)


@dataclass(frozen=True)
class PhantomSpec:
    neck_radius: float = 70.0
    neck_length: float = 90.0
    lobe_left: Optional[EllipsoidSpec] = field(default_factory=_default_left)
    lobe_right: Optional[EllipsoidSpec] = field(default_factory=_default_right)
    isthmus: Optional[BoxSpec] = field(default_factory=_default_isthmus)
    trachea: Optional[CylinderSpec] = field(default_factory=_default_trachea)
    voxel_pitch: float = 0.5

    @property
    def lobes(self) -> dict[str, EllipsoidSpec]:
        out = {}
        if self.lobe_left is not None:
            out["left"] = self.lobe_left
        if self.lobe_right is not None:
            out["right"] = self.lobe_right
        return out

    @property
    def neck_axis_z(self) -> float:
        return -self.neck_radius

    def validate(self) -> None:
        if self.neck_radius <= 0 or self.neck_length <= 0:
            raise PhantomError("neck_radius and neck_length must be > 0")
        if self.voxel_pitch <= 0:
            raise PhantomError("voxel_pitch must be > 0")
        for name, lobe in self.lobes.items():
            if min(lobe.semi_axes) <= 0:
                raise PhantomError(f"lobe_{name}: semi-axes must be > 0")
            ring = lobe.yz_outline()
            r = np.hypot(ring[:, 0], ring[:, 1] - self.neck_axis_z)
            if r.max() >= self.neck_radius:
                raise PhantomError(f"lobe_{name} is not strictly inside the neck cylinder")
            if abs(lobe.center[0]) + lobe.semi_axes[0] >= 0.5 * self.neck_length:
                raise PhantomError(f"lobe_{name} extends past the neck ends")
            if self.trachea is not None:
                t = self.trachea
                dist = np.hypot(ring[:, 0] - t.center[1], ring[:, 1] - t.center[2])
                tc = np.array([[lobe.center[0], t.center[1], t.center[2]]])
                if dist.min() <= t.radius or lobe.contains(tc)[0]:
                    raise PhantomError(f"lobe_{name} intersects the trachea")
        if self.isthmus is not None and min(self.isthmus.extents) <= 0:
            raise PhantomError("isthmus extents must be > 0")
        if self.trachea is not None:
            t = self.trachea
            if t.radius <= 0:
                raise PhantomError("trachea radius must be > 0")
            if np.hypot(t.center[1], t.center[2] - self.neck_axis_z) + t.radius >= self.neck_radius:
                raise PhantomError("trachea is not inside the neck cylinder")


def _quadric_on_plane(m, center, origin, yhat, zhat, ys, zs):
    """(p - c)^T M (p - c) for p = origin + y*yhat + z*zhat on the (zs, ys) grid."""
    d0 = np.asarray(origin, dtype=float) - np.asarray(center, dtype=float)
    md0, my, mz = m @ d0, m @ yhat, m @ zhat
    col = 2.0 * (yhat @ md0) * ys + (yhat @ my) * ys * ys
    row = (d0 @ md0) + 2.0 * (zhat @ md0) * zs + (zhat @ mz) * zs * zs
    return row[:, None] + col[None, :] + 2.0 * (yhat @ mz) * zs[:, None] * ys[None, :]


def _linear_on_plane(k, origin, yhat, zhat, ys, zs):
    """Coordinate k of origin + y*yhat + z*zhat on the (zs, ys) grid."""
    return origin[k] + zhat[k] * zs[:, None] + yhat[k] * ys[None, :]


def classify_plane(spec: PhantomSpec, origin, yhat, zhat, ys, zs) -> np.ndarray:
    """Tissue classes on the planar grid origin + ys*yhat + zs*zhat, shape (len(zs), len(ys)).

    Same rule as ``classify_points``; every solid is a quadric or a slab, so
    the tests reduce to separable expressions in the two plane coordinates.
    """
    origin = np.asarray(origin, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    zhat = np.asarray(zhat, dtype=float)
    ys = np.asarray(ys, dtype=float)
    zs = np.asarray(zs, dtype=float)
    x = _linear_on_plane(0, origin, yhat, zhat, ys, zs)
    tube = np.diag([0.0, 1.0, 1.0])
    r2 = _quadric_on_plane(tube, (0.0, 0.0, spec.neck_axis_z), origin, yhat, zhat, ys, zs)
    inside = (r2 <= spec.neck_radius ** 2) & (np.abs(x) <= 0.5 * spec.neck_length)
    thyroid = np.zeros(inside.shape, dtype=bool)
    for lobe in spec.lobes.values():
        thyroid |= _quadric_on_plane(lobe.quadric(), lobe.center, origin, yhat, zhat, ys, zs) <= 1.0
    if spec.isthmus is not None:
        b = spec.isthmus
        box = np.ones(inside.shape, dtype=bool)
        for k in range(3):
            box &= np.abs(_linear_on_plane(k, origin, yhat, zhat, ys, zs) - b.center[k]) <= 0.5 * b.extents[k]
        thyroid |= box
    out = np.zeros(inside.shape, dtype=np.uint8)
    if spec.trachea is not None:
        t = spec.trachea
        q = _quadric_on_plane(tube, t.center, origin, yhat, zhat, ys, zs)
        out[(q <= t.radius ** 2) & inside] = TRACHEA
    out[thyroid & inside] = THYROID
    return out


def classify_points(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Tissue class for an (..., 3) array of points; thyroid takes precedence."""
    pts = np.asarray(pts, dtype=float)
    dy = pts[..., 1]
    dz = pts[..., 2] - spec.neck_axis_z
    inside = (dy * dy + dz * dz <= spec.neck_radius ** 2) & (
        np.abs(pts[..., 0]) <= 0.5 * spec.neck_length
    )
    thyroid = np.zeros(pts.shape[:-1], dtype=bool)
    for lobe in spec.lobes.values():
        thyroid |= lobe.contains(pts)
    if spec.isthmus is not None:
        thyroid |= spec.isthmus.contains(pts)
    out = np.zeros(pts.shape[:-1], dtype=np.uint8)
    if spec.trachea is not None:
        out[spec.trachea.contains(pts) & inside] = TRACHEA
    out[thyroid & inside] = THYROID
    return out


@dataclass(frozen=True)
class SurfaceField:
    """Skin height z = f(x, y) of the neck cylinder."""

    radius: float
    axis_z: float
    half_length: float
    half_width: float  # |y| limit of the scan region

    def contains(self, x, y) -> np.ndarray:
        return (np.abs(x) <= self.half_length) & (np.abs(y) <= self.half_width)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h = self.axis_z + np.sqrt(np.clip(self.radius ** 2 - y * y, 0.0, None))
        return np.where(self.contains(x, y), h, np.nan)

    def inward_normal(self, y: float) -> np.ndarray:
        """Unit normal pointing into the tissue at lateral position y."""
        z = self.axis_z + np.sqrt(self.radius ** 2 - y * y)
        n = np.array([0.0, -y, -(z - self.axis_z)])
        return n / np.linalg.norm(n)


@dataclass(frozen=True, eq=False)
class PhantomModel:
    spec: PhantomSpec
    label_grid: np.ndarray  # uint8, indexed [ix, iy, iz]
    origin: np.ndarray  # corner of voxel (0, 0, 0), mm
    spacing: tuple[float, float, float]

    @property
    def surface(self) -> SurfaceField:
        return make_surface(self.spec)

    def voxel_centers(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(idx) + 0.5) * np.asarray(self.spacing)


def make_surface(spec: PhantomSpec, width_frac: float = 0.9) -> SurfaceField:
    return SurfaceField(
        radius=spec.neck_radius,
        axis_z=spec.neck_axis_z,
        half_length=0.5 * spec.neck_length,
        half_width=width_frac * spec.neck_radius,
    )


def _grid_layout(spec: PhantomSpec, pitch: float):
    lo = np.array([-0.5 * spec.neck_length, -spec.neck_radius, -2.0 * spec.neck_radius])
    hi = np.array([0.5 * spec.neck_length, spec.neck_radius, 0.0])
    origin = np.floor(lo / pitch) * pitch
    dims = np.ceil((hi - origin) / pitch - 1e-9).astype(int)
    return origin, tuple(int(d) for d in dims)


def build_phantom(spec: PhantomSpec) -> PhantomModel:
    spec.validate()
    pitch = spec.voxel_pitch
    origin, (nx, ny, nz) = _grid_layout(spec, pitch)
    ys = origin[1] + (np.arange(ny) + 0.5) * pitch
    zs = origin[2] + (np.arange(nz) + 0.5) * pitch
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    grid = np.empty((nx, ny, nz), dtype=np.uint8)
    pts = np.empty((ny, nz, 3))
    pts[..., 1] = yy
    pts[..., 2] = zz
    for i in range(nx):
        pts[..., 0] = origin[0] + (i + 0.5) * pitch
        grid[i] = classify_points(spec, pts)
    grid.setflags(write=False)
    return PhantomModel(spec=spec, label_grid=grid, origin=origin, spacing=(pitch, pitch, pitch))


def classify_point(model: PhantomModel, p) -> int:
    return int(classify_points(model.spec, np.asarray(p, dtype=float)[None, :])[0])


def ground_truth_volume(model: PhantomModel) -> float:
    """Thyroid volume of the voxel grid in ml."""
    n = int(np.count_nonzero(model.label_grid == THYROID))
    return float(np.prod(model.spacing)) * n / 1000.0


def _ellipsoid_y_interval(lobe: EllipsoidSpec, x, z):
    a, b, c = lobe.semi_axes
    th = np.deg2rad(lobe.rotation_deg)
    cs, sn = np.cos(th), np.sin(th)
    k = 1.0 - ((x - lobe.center[0]) / a) ** 2
    dz = z - lobe.center[2]
    qa = cs * cs / b ** 2 + sn * sn / c ** 2
    qb = 2.0 * dz * sn * cs * (1.0 / b ** 2 - 1.0 / c ** 2)
    qc = dz * dz * (sn * sn / b ** 2 + cs * cs / c ** 2) - k
    disc = qb * qb - 4.0 * qa * qc
    ok = (k > 0) & (disc > 0)
    root = np.sqrt(np.where(ok, disc, 0.0))
    lo = np.where(ok, (-qb - root) / (2 * qa) + lobe.center[1], np.nan)
    hi = np.where(ok, (-qb + root) / (2 * qa) + lobe.center[1], np.nan)
    return lo, hi


def _union_length(intervals) -> np.ndarray:
    """Measure of a union of intervals by inclusion-exclusion; NaN = empty."""
    from itertools import combinations

    total = 0.0
    n = len(intervals)
    for r in range(1, n + 1):
        for combo in combinations(intervals, r):
            lo = np.max([c[0] for c in combo], axis=0)
            hi = np.min([c[1] for c in combo], axis=0)
            seg = np.nan_to_num(np.clip(hi - lo, 0.0, None), nan=0.0)
            total = total + (-1) ** (r + 1) * seg
    return total


def analytic_thyroid_volume(spec: PhantomSpec, samples: int = 1500) -> float:
    """Thyroid volume (ml) by exact chord lengths along y, integrated over x-z.

    Independent of the voxel grid: each (x, z) sample contributes the exact
    length of the union of the lobe and isthmus cross-sections along y.
    """
    solids_lo = []
    solids_hi = []
    for lobe in spec.lobes.values():
        h = lobe.half_extents()
        c = np.asarray(lobe.center)
        solids_lo.append(c - h)
        solids_hi.append(c + h)
    if spec.isthmus is not None:
        c = np.asarray(spec.isthmus.center)
        h = 0.5 * np.asarray(spec.isthmus.extents)
        solids_lo.append(c - h)
        solids_hi.append(c + h)
    if not solids_lo:
        return 0.0
    lo = np.min(solids_lo, axis=0)
    hi = np.max(solids_hi, axis=0)
    dx = (hi[0] - lo[0]) / samples
    dz = (hi[2] - lo[2]) / samples
    xs = lo[0] + (np.arange(samples) + 0.5) * dx
    zs = lo[2] + (np.arange(samples) + 0.5) * dz
    total = 0.0
    for chunk in np.array_split(xs, max(1, samples // 100)):
        x, z = np.meshgrid(chunk, zs, indexing="ij")
        ivs = [_ellipsoid_y_interval(lobe, x, z) for lobe in spec.lobes.values()]
        if spec.isthmus is not None:
            b = spec.isthmus
            hx, hy, hz = 0.5 * np.asarray(b.extents)
            inside = (np.abs(x - b.center[0]) <= hx) & (np.abs(z - b.center[2]) <= hz)
            ivs.append((np.where(inside, b.center[1] - hy, np.nan),
                        np.where(inside, b.center[1] + hy, np.nan)))
        total += float(_union_length(ivs).sum())
    return total * dx * dz / 1000.0


def lobe_mask(model: PhantomModel, lobe: str) -> np.ndarray:
    """Boolean grid of voxels whose centers lie inside the named lobe."""
    spec = model.spec.lobes[lobe]
    g = model.label_grid
    idx = np.argwhere(g == THYROID)
    inside = spec.contains(model.voxel_centers(idx))
    out = np.zeros(g.shape, dtype=bool)
    sel = idx[inside]
    out[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return out
