"""Synthetic-data quality analytics: PCA + kmeans clustering and plotting.

Images are flattened to pixel vectors, reduced to three principal
components, and clustered with Lloyd's algorithm. Cluster quality against
the assigned classes is summarized as purity (fraction of points falling in
their cluster's majority class), the quantitative stand-in for "do images of
the same class land together in pixel space".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigurationError, ShapeError
from .netcore import BNStatSnapshot
from .recover import LossTrajectory


@dataclass
class PCAResult:
    points: np.ndarray  # (N, dims)
    components: np.ndarray  # (dims, D), rows are principal directions
    center: np.ndarray  # (D,)
    explained_variance: np.ndarray  # (dims,)

    def reconstruct(self) -> np.ndarray:
        return self.points @ self.components + self.center


def pca_reduce(data: np.ndarray, dims: int = 3) -> PCAResult:
    """Project mean-centered rows onto the top principal components.

    Component signs are fixed by making each component's largest-magnitude
    coordinate positive, so the projection is deterministic.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        data = data.reshape(len(data), -1)
    n, d = data.shape
    if n < dims:
        raise ShapeError(f"need at least {dims} rows, got {n}")
    center = data.mean(axis=0)
    centered = data - center
    # SVD of the data matrix: rows of vt are principal directions.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:dims]
    for i in range(len(components)):
        pivot = np.argmax(np.abs(components[i]))
        if components[i, pivot] < 0:
            components[i] = -components[i]
    points = centered @ components.T
    explained = (s[:dims] ** 2) / n
    return PCAResult(points, components, center, explained)


@dataclass
class KMeansResult:
    assignments: np.ndarray  # (N,) int
    centroids: np.ndarray  # (k, dims)
    inertia: float
    inertia_history: list[float]


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """kmeans++ seeding: spread initial centroids by squared-distance sampling."""
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_cluster(points: np.ndarray, k: int, seed: int = 0,
                   max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from kmeans++ seeding until the assignment fixpoint."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        points = points.reshape(len(points), -1)
    n = len(points)
    if k < 1 or k > n:
        raise ConfigurationError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(points, k, rng)
    assignments = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignments = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_assignments].sum()))
        if assignments is not None and np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = points[assignments == j]
            if len(members):  # empty clusters keep their previous centroid
                centroids[j] = members.mean(axis=0)
    return KMeansResult(assignments, centroids, history[-1], history)


def clustering_purity(assignments, true_classes) -> float:
    """Sum over clusters of the majority class count, divided by N."""
    assignments = np.asarray(assignments)
    true_classes = np.asarray(true_classes)
    if assignments.shape != true_classes.shape:
        raise ShapeError("assignments and classes must have equal length")
    total = 0
    for cluster in np.unique(assignments):
        labels = true_classes[assignments == cluster]
        _, counts = np.unique(labels, return_counts=True)
        total += counts.max()
    return total / len(assignments)


@dataclass
class ClusterReport:
    points: np.ndarray  # (N, 3)
    assignments: np.ndarray
    centroids: np.ndarray
    purity: float
    inertia: float
    classes: np.ndarray

    def to_dict(self) -> dict:
        return {
            "purity": self.purity,
            "inertia": self.inertia,
            "k": len(self.centroids),
            "n_points": len(self.points),
            "cluster_sizes": np.bincount(self.assignments,
                                         minlength=len(self.centroids)).tolist(),
        }


def cluster_images(images: np.ndarray, classes, k: int | None = None,
                   seed: int = 0) -> ClusterReport:
    """PCA pixels to 3D, kmeans with k = number of distinct classes by default."""
    classes = np.asarray(classes)
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    if k is None:
        k = len(np.unique(classes))
    pca = pca_reduce(flat, dims=3)
    km = kmeans_cluster(pca.points, k, seed=seed)
    purity = clustering_purity(km.assignments, classes)
    return ClusterReport(pca.points, km.assignments, km.centroids, purity,
                         km.inertia, classes)


def emit_plots(obj, out_dir) -> list[Path]:
    """Render an object to PNG files with deterministic names.

    LossTrajectory -> one two-curve plot; BNStatSnapshot -> one bar chart per
    layer (mean and variance panels); ClusterReport -> a 3D scatter colored
    by cluster assignment.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, LossTrajectory):
        return [_plot_trajectory(obj, out)]
    if isinstance(obj, BNStatSnapshot):
        return _plot_snapshot(obj, out)
    if isinstance(obj, ClusterReport):
        return [_plot_clusters(obj, out)]
    raise TypeError(f"no plot emitter for {type(obj).__name__}")


def _plot_trajectory(trajectory: LossTrajectory, out: Path) -> Path:
    iters = [p.iteration for p in trajectory.points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iters, [p.ce_loss for p in trajectory.points], label="ce")
    ax.plot(iters, [p.bn_loss for p in trajectory.points], label="bn")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    path = out / "loss_trajectory.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _plot_snapshot(snapshot: BNStatSnapshot, out: Path) -> list[Path]:
    paths = []
    for layer in snapshot.layers:
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        axes[0].bar(range(len(layer.mean)), layer.mean)
        axes[0].set_title(f"layer {layer.layer_index} running mean")
        axes[1].bar(range(len(layer.variance)), layer.variance, color="tab:orange")
        axes[1].set_title(f"layer {layer.layer_index} running variance")
        for ax in axes:
            ax.set_xlabel("channel")
        fig.tight_layout()
        path = out / f"bn_layer_{layer.layer_index:02d}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def _plot_clusters(report: ClusterReport, out: Path) -> Path:
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    ax.scatter(report.points[:, 0], report.points[:, 1], report.points[:, 2],
               c=report.assignments, cmap="tab10", s=12)
    ax.scatter(report.centroids[:, 0], report.centroids[:, 1], report.centroids[:, 2],
               marker="x", c="black", s=60)
    ax.set_title(f"purity={report.purity:.3f}")
    path = out / "clusters_3d.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
