"""PCA reduction, Lloyd clustering, purity, and plot emission."""

import numpy as np
import pytest

from scdd.analysis import (
    ClusterReport,
    cluster_images,
    clustering_purity,
    emit_plots,
    kmeans_cluster,
    pca_reduce,
)
from scdd.errors import ConfigurationError, ShapeError


class TestPCA:
    def test_exact_for_intrinsic_3d(self):
        rng = np.random.default_rng(0)
        basis = rng.normal(size=(3, 20))
        coeffs = rng.normal(size=(200, 3))
        offset = rng.normal(size=20)
        data = coeffs @ basis + offset
        result = pca_reduce(data, dims=3)
        err = np.abs(result.reconstruct() - data).max()
        assert err < 1e-6

    def test_preserves_pairwise_distances_for_3d_data(self):
        rng = np.random.default_rng(1)
        basis = np.linalg.qr(rng.normal(size=(20, 3)))[0].T  # orthonormal rows
        coeffs = rng.normal(size=(50, 3))
        data = coeffs @ basis
        points = pca_reduce(data, dims=3).points
        d_orig = np.linalg.norm(data[:, None] - data[None, :], axis=2)
        d_proj = np.linalg.norm(points[:, None] - points[None, :], axis=2)
        np.testing.assert_allclose(d_proj, d_orig, atol=1e-8)

    def test_isotropic_gaussian_equal_variance(self):
        data = np.random.default_rng(2).normal(size=(10_000, 3))
        result = pca_reduce(data, dims=3)
        ev = result.explained_variance
        assert ev.max() / ev.min() < 1.10

    def test_duplication_invariance(self):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(40, 10))
        single = pca_reduce(data, dims=3).points
        doubled = pca_reduce(np.vstack([data, data]), dims=3).points
        np.testing.assert_allclose(doubled[:40], single, atol=1e-8)

    def test_sign_convention_is_deterministic(self):
        rng = np.random.default_rng(4)
        data = rng.normal(size=(30, 8))
        a = pca_reduce(data)
        b = pca_reduce(data.copy())
        np.testing.assert_array_equal(a.points, b.points)
        for row in a.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_too_few_rows(self):
        with pytest.raises(ShapeError):
            pca_reduce(np.zeros((2, 5)), dims=3)


class TestKMeans:
    def test_single_cluster_centroid_is_mean(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(50, 3))
        result = kmeans_cluster(points, k=1, seed=0)
        np.testing.assert_allclose(result.centroids[0], points.mean(axis=0), atol=1e-9)
        assert set(result.assignments) == {0}

    def test_separated_blobs_pure(self):
        rng = np.random.default_rng(1)
        blob_a = rng.normal(size=(40, 3)) + np.array([0, 0, 0])
        blob_b = rng.normal(size=(40, 3)) + np.array([30, 30, 30])
        points = np.vstack([blob_a, blob_b])
        classes = np.array([0] * 40 + [1] * 40)
        for seed in range(5):
            result = kmeans_cluster(points, k=2, seed=seed)
            assert clustering_purity(result.assignments, classes) == 1.0

    def test_inertia_monotone_nonincreasing(self):
        rng = np.random.default_rng(2)
        points = rng.normal(size=(120, 4))
        result = kmeans_cluster(points, k=5, seed=3)
        hist = result.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        assert result.inertia <= hist[0]

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(60, 3))
        a = kmeans_cluster(points, k=4, seed=7)
        b = kmeans_cluster(points, k=4, seed=7)
        assert np.array_equal(a.assignments, b.assignments)

    def test_k_exceeds_n(self):
        with pytest.raises(ConfigurationError):
            kmeans_cluster(np.zeros((3, 2)), k=4, seed=0)


class TestPurity:
    def test_perfect(self):
        classes = np.array([0, 0, 1, 1, 2, 2])
        assert clustering_purity(classes, classes) == 1.0

    def test_single_cluster_balanced(self):
        classes = np.repeat(np.arange(4), 5)
        assignments = np.zeros(20, dtype=int)
        assert clustering_purity(assignments, classes) == 0.25

    def test_hand_case_two_thirds(self):
        assignments = np.array([0, 0, 0, 1, 1, 1])
        classes = np.array(["a", "a", "b", "b", "b", "a"])
        assert clustering_purity(assignments, classes) == pytest.approx(2 / 3)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        assignments = rng.integers(0, 4, size=60)
        classes = rng.integers(0, 3, size=60)
        base = clustering_purity(assignments, classes)
        permuted = (assignments + 2) % 4
        assert clustering_purity(permuted, classes) == base

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            clustering_purity(np.zeros(3), np.zeros(4))


class TestClusterImages:
    def test_report_fields(self, tiny_train):
        report = cluster_images(tiny_train.images, tiny_train.labels, seed=0)
        assert report.points.shape == (len(tiny_train), 3)
        assert len(report.centroids) == tiny_train.num_classes
        assert 1.0 / tiny_train.num_classes <= report.purity <= 1.0
        d = report.to_dict()
        assert set(d) >= {"purity", "inertia", "k", "n_points", "cluster_sizes"}


class TestEmitPlots:
    def test_trajectory_plot(self, micro_teacher, tmp_path):
        from scdd.recover import RecoveryConfig, recover_dataset

        _, trajectory = recover_dataset(
            micro_teacher, RecoveryConfig(ipc=2, iterations=3, batch_size=4, seed=0))
        paths = emit_plots(trajectory, tmp_path)
        assert len(paths) == 1 and paths[0].exists()

    def test_snapshot_plots_one_per_layer(self, micro_teacher, tmp_path):
        from scdd.netcore import extract_bn_statistics

        snapshot = extract_bn_statistics(micro_teacher)
        paths = emit_plots(snapshot, tmp_path)
        assert len(paths) == len(snapshot.layers)
        assert all(p.exists() for p in paths)

    def test_cluster_plot(self, tiny_train, tmp_path):
        report = cluster_images(tiny_train.images[:40], tiny_train.labels[:40], seed=0)
        paths = emit_plots(report, tmp_path)
        assert paths[0].name == "clusters_3d.png" and paths[0].exists()

    def test_unknown_type(self, tmp_path):
        with pytest.raises(TypeError):
            emit_plots(42, tmp_path)
