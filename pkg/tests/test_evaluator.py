"""
Testes unitários para as métricas de reconstrução.
"""

import numpy as np
import pytest

from core.evaluator import (EmptyMeshError, MetricReport, compute_metrics, crop_to_bounds, evaluate_meshes,
                            nearest_distances, nearest_distances_brute, sample_surface)
from core.mesher import Mesh


def _plane_points(z=0.0, n=21):
    x, y = np.meshgrid(np.linspace(0.0, 2.0, n), np.linspace(0.0, 2.0, n), indexing="ij")
    return np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], axis=1)


def _square(z=0.0, size=2.0):
    vertices = np.array([[0.0, 0.0, z], [size, 0.0, z], [size, size, z], [0.0, size, z]])
    return Mesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


class TestNearestDistances:
    """Testes para as distâncias de vizinho mais próximo."""

    def test_kdtree_matches_brute_force(self, rng):
        query = rng.uniform(-1.0, 1.0, size=(500, 3))
        reference = rng.uniform(-1.0, 1.0, size=(300, 3))

        np.testing.assert_allclose(nearest_distances(query, reference),
                                   nearest_distances_brute(query, reference), atol=1e-12)

    @pytest.mark.slow
    def test_metrics_match_brute_force(self, rng):
        """Testa 100 pares aleatórios de até 1000 pontos."""
        for _ in range(100):
            pred = rng.uniform(0.0, 2.0, size=(int(rng.integers(1, 1000)), 3))
            gt = rng.uniform(0.0, 2.0, size=(int(rng.integers(1, 1000)), 3))

            fast = compute_metrics(pred, gt)
            slow = compute_metrics(pred, gt, brute_force=True)

            assert fast.acc_cm == pytest.approx(slow.acc_cm, rel=1e-12)
            assert fast.comp_cm == pytest.approx(slow.comp_cm, rel=1e-12)
            assert fast.f_score_pct == slow.f_score_pct

    def test_identical_sets(self, rng):
        points = rng.normal(size=(50, 3))

        assert np.all(nearest_distances(points, points) == 0.0)


class TestComputeMetrics:
    """Testes para acurácia, completude e F-score."""

    def test_identical(self):
        points = _plane_points()

        report = compute_metrics(points, points)

        assert report.acc_cm == 0.0
        assert report.comp_cm == 0.0
        assert report.f_score_pct == 100.0

    def test_offset_ten_cm(self):
        """Testa duas superfícies paralelas a 10 cm."""
        report = compute_metrics(_plane_points(0.1), _plane_points(0.0))

        assert report.acc_cm == pytest.approx(10.0)
        assert report.comp_cm == pytest.approx(10.0)
        assert report.chamfer_l1_cm == pytest.approx(10.0)
        assert report.f_score_pct == pytest.approx(100.0)
        assert compute_metrics(_plane_points(0.1), _plane_points(0.0), threshold_cm=5.0).f_score_pct == 0.0

    def test_chamfer_is_mean(self, rng):
        pred = rng.uniform(0.0, 1.0, size=(200, 3))
        gt = rng.uniform(0.0, 1.0, size=(150, 3))

        report = compute_metrics(pred, gt)

        assert report.chamfer_l1_cm == pytest.approx((report.acc_cm + report.comp_cm) / 2)
        assert report.n_pred == 200 and report.n_gt == 150

    def test_f_score_harmonic_mean(self):
        """Testa precisão 50% e revocação 100%: F = 2/3."""
        gt = np.zeros((1, 3))
        pred = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])

        report = compute_metrics(pred, gt, threshold_cm=20.0)

        assert report.precision_pct == pytest.approx(50.0)
        assert report.recall_pct == pytest.approx(100.0)
        assert report.f_score_pct == pytest.approx(200.0 / 3.0)

    def test_brute_force_flag(self, rng):
        pred = rng.uniform(0.0, 1.0, size=(100, 3))
        gt = rng.uniform(0.0, 1.0, size=(80, 3))

        fast = compute_metrics(pred, gt)
        slow = compute_metrics(pred, gt, brute_force=True)

        assert fast.acc_cm == pytest.approx(slow.acc_cm)
        assert fast.comp_cm == pytest.approx(slow.comp_cm)

    def test_empty_input(self):
        with pytest.raises(EmptyMeshError, match="pred"):
            compute_metrics(np.zeros((0, 3)), _plane_points())

    def test_invalid_threshold(self):
        with pytest.raises(ValueError, match="threshold_cm"):
            compute_metrics(_plane_points(), _plane_points(), threshold_cm=0.0)


class TestSurfaceSampling:
    """Testes para a amostragem uniforme sobre malhas."""

    def test_points_on_surface(self, rng):
        points = sample_surface(_square(z=0.5), 5000, rng)

        assert points.shape == (5000, 3)
        np.testing.assert_allclose(points[:, 2], 0.5)
        assert points[:, :2].min() >= 0.0 and points[:, :2].max() <= 2.0

    def test_area_weighting(self, rng):
        """Testa que cada metade do quadrado recebe metade das amostras."""
        points = sample_surface(_square(), 20_000, rng)

        # Triângulo [0, 1, 2] fica abaixo da diagonal y = x
        below = np.mean(points[:, 1] < points[:, 0])
        assert below == pytest.approx(0.5, abs=0.02)

    def test_empty_mesh(self, rng):
        with pytest.raises(EmptyMeshError):
            sample_surface(Mesh.empty(), 10, rng)

    def test_zero_area(self, rng):
        mesh = Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))

        with pytest.raises(EmptyMeshError, match="área"):
            sample_surface(mesh, 10, rng)


class TestEvaluateMeshes:
    """Testes para a avaliação malha contra malha."""

    def test_crop(self):
        points = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.5, 0.0, 0.0]])
        bounds = (np.zeros(3), np.full(3, 2.0))

        assert len(crop_to_bounds(points, bounds)) == 2
        assert len(crop_to_bounds(points, bounds, margin=0.6)) == 3

    def test_identical_meshes(self):
        mesh = _square()

        report = evaluate_meshes(mesh, mesh, n_samples=20_000, rng=np.random.default_rng(3))

        assert report.chamfer_l1_cm < 2.0
        assert report.f_score_pct == pytest.approx(100.0)

    def test_offset_meshes(self):
        report = evaluate_meshes(_square(z=0.1), _square(), n_samples=20_000, rng=np.random.default_rng(3))

        assert report.acc_cm == pytest.approx(10.0, abs=0.5)

    def test_crop_reference_to_prediction(self):
        """Testa que a referência maior é recortada pela caixa da predição."""
        pred = _square(size=1.0)
        gt = _square(size=4.0)

        cropped = evaluate_meshes(pred, gt, n_samples=5000, rng=np.random.default_rng(3), crop=True)
        full = evaluate_meshes(pred, gt, n_samples=5000, rng=np.random.default_rng(3))

        assert cropped.recall_pct > 95.0
        assert full.recall_pct < cropped.recall_pct

    def test_report_outputs(self, tmp_path):
        report = MetricReport(1.0, 2.0, 1.5, 90.0, 80.0, 84.7, 20.0)

        assert "F-score@20cm" in report.as_table()
        report.write_csv(tmp_path / "metrics.csv")
        header, row = (tmp_path / "metrics.csv").read_text().splitlines()
        assert header.startswith("acc_cm,comp_cm,chamfer_l1_cm")
        assert row.startswith("1.0,2.0,1.5")
