import numpy as np
import pytest

from utils.errors import MetricError
from utils.metrics import (FidelityMatrix, GaussianStats, feature_embed, fit_gaussian, frechet_distance, imf,
                           make_embedding, mf)


def gaussian(mean, cov):
    return GaussianStats(np.atleast_1d(np.asarray(mean, dtype=np.float64)),
                         np.atleast_2d(np.asarray(cov, dtype=np.float64)), 100)


def random_cov(rng, dim):
    m = rng.standard_normal((dim, dim))
    return m @ m.T + 0.5 * np.eye(dim)


def brute_force(rows):
    row_means = [sum(row) / len(row) for row in rows]
    return row_means[-1], sum(row_means) / len(row_means)


class TestEmbedding:
    def test_same_seed_same_projection(self):
        a, b = make_embedding(2, embed_seed=9), make_embedding(2, embed_seed=9)
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
        assert a.feature_dim == 16

    def test_identity_mode(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(feature_embed(x, 0, mode="identity"), x)

    def test_dimension_mismatch(self, rng):
        embedding = make_embedding(2, 0)
        with pytest.raises(MetricError):
            embedding(rng.standard_normal((4, 3)))

    def test_unknown_mode(self):
        with pytest.raises(MetricError):
            make_embedding(2, 0, mode="inception")

    def test_disjoint_clusters_stay_apart(self, rng):
        embedding = make_embedding(2, embed_seed=1)
        left = embedding(np.array([-3.0, 0.0]) + 0.1 * rng.standard_normal((500, 2)))
        right = embedding(np.array([3.0, 0.0]) + 0.1 * rng.standard_normal((500, 2)))
        between = np.linalg.norm(left.mean(axis=0) - right.mean(axis=0))
        within = np.sqrt(np.trace(fit_gaussian(left).cov))
        assert between > within


class TestFitGaussian:
    def test_constant_samples(self):
        stats = fit_gaussian(np.full((10, 2), 3.0))
        np.testing.assert_array_equal(stats.cov, np.zeros((2, 2)))
        np.testing.assert_array_equal(stats.mean, [3.0, 3.0])

    def test_two_points(self):
        stats = fit_gaussian(np.array([-1.0, 1.0]))
        np.testing.assert_allclose(stats.mean, [0.0])
        np.testing.assert_allclose(stats.cov, [[1.0]])

    def test_order_invariant(self, rng):
        x = rng.standard_normal((50, 3))
        a, b = fit_gaussian(x), fit_gaussian(x[rng.permutation(50)])
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)

    def test_symmetric(self, rng):
        cov = fit_gaussian(rng.standard_normal((40, 4))).cov
        np.testing.assert_array_equal(cov, cov.T)

    def test_needs_two_samples(self):
        with pytest.raises(MetricError):
            fit_gaussian(np.ones((1, 2)))


class TestFrechet:
    def test_identical(self, rng):
        a = gaussian(rng.standard_normal(3), random_cov(rng, 3))
        assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)

    def test_shared_covariance(self, rng):
        cov = random_cov(rng, 3)
        d = np.array([1.0, -2.0, 0.5])
        a, b = gaussian(np.zeros(3), cov), gaussian(d, cov)
        assert frechet_distance(a, b) == pytest.approx(float(d @ d), abs=1e-9)

    def test_one_dimensional_hand_value(self):
        assert frechet_distance(gaussian(0.0, 1.0), gaussian(1.0, 4.0)) == pytest.approx(2.0, abs=1e-9)

    def test_symmetric(self, rng):
        a = gaussian(rng.standard_normal(4), random_cov(rng, 4))
        b = gaussian(rng.standard_normal(4), random_cov(rng, 4))
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-9)

    def test_translation_invariant(self, rng):
        a = gaussian(rng.standard_normal(3), random_cov(rng, 3))
        b = gaussian(rng.standard_normal(3), random_cov(rng, 3))
        shift = np.array([5.0, -1.0, 2.0])
        moved = frechet_distance(gaussian(a.mean + shift, a.cov), gaussian(b.mean + shift, b.cov))
        assert moved == pytest.approx(frechet_distance(a, b), abs=1e-9)

    def test_singular_covariances(self):
        a = gaussian([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])
        b = gaussian([0.0, 0.0], [[0.0, 0.0], [0.0, 1.0]])
        assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(MetricError):
            frechet_distance(gaussian([0.0], [[1.0]]), gaussian([0.0, 0.0], np.eye(2)))


class TestFidelityMatrix:
    def test_lower_triangle_only(self):
        matrix = FidelityMatrix(3)
        with pytest.raises(MetricError):
            matrix.set(1, 2, 1.0)
        with pytest.raises(MetricError):
            matrix.set(4, 1, 1.0)

    @pytest.mark.parametrize("fd", [-0.5, float("nan"), float("inf")])
    def test_entries_finite_and_non_negative(self, fd):
        with pytest.raises(MetricError):
            FidelityMatrix(2).set(2, 1, fd)

    def test_rows_fill_up(self):
        matrix = FidelityMatrix(2)
        matrix.set(1, 1, 3.0)
        assert matrix.completed_rows == 1
        assert not matrix.row_complete(2)
        matrix.set(2, 1, 4.0)
        matrix.set(2, 2, 5.0)
        assert matrix.rows() == [[3.0], [4.0, 5.0]]

    def test_from_rows_checks_lengths(self):
        with pytest.raises(MetricError):
            FidelityMatrix.from_rows([[1.0], [2.0]])

    def test_csv(self, tmp_path):
        matrix = FidelityMatrix.from_rows([[0.1], [0.2, 1.0 / 3.0]])
        path = tmp_path / "fidelity_matrix.csv"
        matrix.write_csv(path)
        assert path.read_text(encoding="utf-8").splitlines()[0] == "k,i,fd"
        assert FidelityMatrix.read_csv(path).rows() == matrix.rows()

    def test_csv_of_partial_matrix(self, tmp_path):
        matrix = FidelityMatrix(3)
        matrix.set(1, 1, 2.0)
        path = tmp_path / "fidelity_matrix.csv"
        matrix.write_csv(path)
        restored = FidelityMatrix.read_csv(path, num_tasks=3)
        assert restored.num_tasks == 3 and restored.completed_rows == 1


class TestSummaries:
    def test_single_task(self):
        matrix = FidelityMatrix.from_rows([[7.0]])
        assert mf(matrix) == 7.0
        assert imf(matrix) == mf(matrix)

    def test_hand_values(self):
        matrix = FidelityMatrix.from_rows([[10.0], [10.0, 20.0]])
        assert mf(matrix) == 15.0
        assert imf(matrix) == 12.5

    def test_mf_reads_final_row_only(self):
        a = FidelityMatrix.from_rows([[1.0], [2.0, 3.0]])
        b = FidelityMatrix.from_rows([[100.0], [2.0, 3.0]])
        assert mf(a) == mf(b)

    def test_constant_matrix(self):
        matrix = FidelityMatrix.from_rows([[0.7] * k for k in range(1, 5)])
        assert imf(matrix) == pytest.approx(0.7)

    @pytest.mark.parametrize("num_tasks", [1, 4, 5])
    def test_match_brute_force(self, num_tasks):
        rng = np.random.default_rng(num_tasks)
        # entries of row k are multiples of k so every partial sum is exact in any order
        rows = [(k * rng.integers(0, 50, size=k)).astype(float).tolist() for k in range(1, num_tasks + 1)]
        expected_mf, expected_imf = brute_force(rows)
        matrix = FidelityMatrix.from_rows(rows)
        assert mf(matrix) == expected_mf
        assert imf(matrix) == expected_imf

    def test_incomplete(self):
        matrix = FidelityMatrix(2)
        matrix.set(1, 1, 1.0)
        matrix.set(2, 2, 1.0)
        with pytest.raises(MetricError):
            mf(matrix)
        with pytest.raises(MetricError):
            imf(matrix)
