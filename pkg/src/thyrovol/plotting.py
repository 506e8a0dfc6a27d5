"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .phantom import THYROID, TRACHEA  # noqa: E402

_SAVE = {"dpi": 110, "metadata": {"Software": None}}


def _extent(origin, spacing, shape, axes):
    (a, b) = axes
    return [origin[a], origin[a] + shape[a] * spacing[a],
            origin[b], origin[b] + shape[b] * spacing[b]]


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_phantom(model, path: Path) -> Path:
    """Axial (y-z) slice through the lobe centers and a coronal (x-y) slice at lobe depth."""
    g = model.label_grid
    o, s = model.origin, model.spacing
    lobes = list(model.spec.lobes.values())
    x0 = lobes[0].center[0] if lobes else 0.0
    z0 = lobes[0].center[2] if lobes else -20.0
    ix = int(np.clip((x0 - o[0]) // s[0], 0, g.shape[0] - 1))
    iz = int(np.clip((z0 - o[2]) // s[2], 0, g.shape[2] - 1))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.imshow(g[ix].T, origin="lower", extent=_extent(o, s, g.shape, (1, 2)),
              cmap="viridis", vmin=0, vmax=TRACHEA, aspect="equal")
    a1.set_xlabel("y (mm)")
    a1.set_ylabel("z (mm)")
    a1.set_title(f"axial slice x = {x0:.1f} mm")
    a2.imshow(g[:, :, iz].T, origin="lower", extent=_extent(o, s, g.shape, (0, 1)),
              cmap="viridis", vmin=0, vmax=TRACHEA, aspect="equal")
    a2.set_xlabel("x (mm)")
    a2.set_ylabel("y (mm)")
    a2.set_title(f"coronal slice z = {z0:.1f} mm")
    fig.tight_layout()
    return _save(fig, path)


def plot_volumetry(labels, model, path: Path) -> Path:
    """Projections of the compounded labels over the phantom's thyroid outline."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    truth = model.label_grid == THYROID
    for ax, (a, b), proj in ((axes[0], (1, 2), 0), (axes[1], (0, 1), 2)):
        est = labels.occupancy.any(axis=proj)
        ax.imshow(est.T, origin="lower", cmap="Greys", alpha=0.8,
                  extent=_extent(labels.origin, labels.spacing, labels.occupancy.shape, (a, b)))
        gt = truth.any(axis=proj).astype(float)
        ext = _extent(model.origin, model.spacing, truth.shape, (a, b))
        xs = np.linspace(ext[0], ext[1], gt.shape[0])
        ys = np.linspace(ext[2], ext[3], gt.shape[1])
        ax.contour(xs, ys, gt.T, levels=[0.5], colors="tab:red", linewidths=1.0)
        ax.set_xlabel("xyz"[a] + " (mm)")
        ax.set_ylabel("xyz"[b] + " (mm)")
    axes[0].set_title("compounded labels (grey) vs ground truth (red), along x")
    axes[1].set_title("along z")
    fig.tight_layout()
    return _save(fig, path)


def plot_scan_trace(scans: dict, path: Path) -> Path:
    """Probe x over simulated time plus the correction history, one row per lobe."""
    n = max(1, len(scans))
    fig, axes = plt.subplots(n, 2, figsize=(10, 3 * n), squeeze=False)
    for row, (lobe, res) in zip(axes, sorted(scans.items())):
        h = res.history
        rec = h[:, 3] > 0
        row[0].plot(h[:, 0], h[:, 1], color="0.6", lw=1, label="probe x")
        row[0].scatter(h[rec, 0], h[rec, 1], s=2, c=np.where(h[rec, 2] > 0, "tab:green", "tab:red"),
                       label="recorded")
        row[0].set_xlabel("t (s)")
        row[0].set_ylabel("x (mm)")
        row[0].set_title(f"{lobe} lobe sweep")
        tr = res.trace
        row[1].step(np.arange(len(tr)), tr[:, 0], where="post", label="alpha_corr (deg)")
        row[1].step(np.arange(len(tr)), tr[:, 1], where="post", label="y_corr (mm)")
        row[1].set_xlabel("pose update")
        row[1].legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(result, path: Path) -> Path:
    """Per-configuration volumes with the ground truth as a reference line."""
    configs = [c for c in ("none", "shadow", "centering", "both") if c in result.summary]
    data = [[v for v in result.volumes(c) if v is not None] for c in configs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(data, showmeans=True)
    ax.set_xticks(range(1, len(configs) + 1), configs)
    for k, vals in enumerate(data, start=1):
        jitter = np.linspace(-0.12, 0.12, len(vals)) if len(vals) > 1 else [0.0]
        ax.scatter(k + np.asarray(jitter), vals, s=8, color="tab:blue", alpha=0.6)
    ax.axhline(result.ground_truth_ml, color="tab:red", ls="--", lw=1, label="ground truth")
    ax.set_ylabel("volume (ml)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_dose(activity: float, params, path: Path) -> Path:
    """Activity as a function of thyroid mass around the given operating point."""
    from dataclasses import replace

    from .analysis import marinelli_activity

    m = np.linspace(0.05, 2.0, 40) * params.m
    a = [marinelli_activity(replace(params, m=float(v))) for v in m]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(m, a)
    ax.scatter([params.m], [activity], color="tab:red", zorder=3)
    ax.set_xlabel("thyroid mass (g)")
    ax.set_ylabel("activity")
    fig.tight_layout()
    return _save(fig, path)
