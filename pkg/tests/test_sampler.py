"""
Testes unitários para a amostragem na banda estreita.
"""

import numpy as np
import pytest

from core.sampler import SampleBatch, build_batch, dense_sample_count, sample_ray
from core.sparse_grid import SparseGrid, activate


class TestSampleRay:
    """Testes para as amostras de um raio."""

    @pytest.mark.parametrize("delta, position, gt", [
        (0.1, [10.1, 0.0, 0.0], -0.1),
        (0.0, [10.0, 0.0, 0.0], 0.0),
        (-0.2, [9.8, 0.0, 0.0], 0.2),
    ])
    def test_forced_delta(self, delta, position, gt):
        """Testa amostras atrás, sobre e à frente da superfície."""
        samples = sample_ray(np.zeros(3), np.array([10.0, 0.0, 0.0]), 0.25, 1, deltas=np.array([delta]))

        assert len(samples) == 1
        np.testing.assert_allclose(samples[0].position, position, atol=1e-12)
        assert samples[0].gt_sdf == pytest.approx(gt, abs=1e-12)

    def test_closed_form_on_ray(self, rng):
        """Testa gt = d - |p - o| e |gt| <= T_r para raios aleatórios."""
        for _ in range(20):
            origin = rng.uniform(-1.0, 1.0, size=3)
            endpoint = origin + rng.normal(size=3) * 3.0
            d = np.linalg.norm(endpoint - origin)
            if d <= 0.25:
                continue

            for sample in sample_ray(origin, endpoint, 0.25, 16, rng):
                assert sample.gt_sdf == pytest.approx(d - np.linalg.norm(sample.position - origin), abs=1e-9)
                assert abs(sample.gt_sdf) <= 0.25 + 1e-12
                # Sobre o raio
                cross = np.cross(sample.position - origin, endpoint - origin)
                assert np.linalg.norm(cross) <= 1e-9 * d * d

    def test_delta_distribution(self, rng):
        """Testa média e extremos de δ em 10⁴ amostras."""
        samples = sample_ray(np.zeros(3), np.array([5.0, 0.0, 0.0]), 0.25, 10_000, rng)
        deltas = -np.array([s.gt_sdf for s in samples])

        sigma = 0.25 / np.sqrt(3.0) / np.sqrt(len(deltas))
        assert abs(deltas.mean()) < 3 * sigma
        assert deltas.min() > -0.25
        assert deltas.max() < 0.25

    def test_short_ray_rejected(self):
        """Testa o raio não mais longo que T_r."""
        with pytest.raises(ValueError, match="T_r"):
            sample_ray(np.zeros(3), np.array([0.2, 0.0, 0.0]), 0.25, 4)


class TestBuildBatch:
    """Testes para o lote guiado pelos voxels ativos."""

    def test_all_voxels_active(self, small_config, wall_points, rng):
        """Testa que sem descarte o lote tem raios × amostras por raio."""
        points, origin = wall_points
        grid = SparseGrid(0.2, (20, 20, 10))
        grid.insert_active(np.stack(np.meshgrid(np.arange(20), np.arange(20), np.arange(10),
                                                indexing="ij"), axis=-1).reshape(-1, 3))

        batch = build_batch(points, origin, grid, small_config, rng)

        assert len(batch) == small_config.rays_per_batch * small_config.samples_per_ray
        assert len(np.unique(batch.ray_index)) == small_config.rays_per_batch

    def test_no_active_voxels(self, small_config, wall_points, rng):
        """Testa o sinal de lote vazio."""
        points, origin = wall_points

        batch = build_batch(points, origin, SparseGrid(0.2, (20, 20, 10)), small_config, rng)

        assert batch.is_empty
        assert batch.rng_state is not None

    def test_retention_on_wall(self, small_config, wall_points, rng):
        """Testa que quase todas as amostras caem na banda ativada pela mesma varredura."""
        points, origin = wall_points
        grid = SparseGrid(0.2, (20, 20, 10))
        activate(grid, points, small_config.truncation)

        batch = build_batch(points, origin, grid, small_config, rng)

        total = small_config.rays_per_batch * small_config.samples_per_ray
        assert len(batch) >= 0.95 * total
        assert np.all(np.abs(batch.gt_sdf) <= small_config.truncation + 1e-12)

    def test_fewer_rays_than_batch(self, small_config, rng):
        """Testa a varredura com menos raios que rays_per_batch."""
        points = np.array([[3.0, 2.0, 1.0], [3.0, 2.2, 1.0], [1.1, 2.0, 1.0]])
        grid = SparseGrid(0.2, (20, 20, 10))
        activate(grid, points, small_config.truncation)

        batch = build_batch(points, np.array([1.0, 2.0, 1.0]), grid, small_config, rng)

        # O terceiro raio é mais curto que T_r
        assert set(batch.ray_index.tolist()) <= {0, 1}

    def test_deterministic(self, small_config, wall_points):
        """Testa lotes idênticos com a mesma semente."""
        points, origin = wall_points
        grid = SparseGrid(0.2, (20, 20, 10))
        activate(grid, points, small_config.truncation)

        first = build_batch(points, origin, grid, small_config, np.random.default_rng(7))
        second = build_batch(points, origin, grid, small_config, np.random.default_rng(7))

        np.testing.assert_array_equal(first.positions, second.positions)
        np.testing.assert_array_equal(first.gt_sdf, second.gt_sdf)


class TestSampleBatch:
    """Testes para operações sobre lotes."""

    def test_subsample_and_concatenate(self, rng):
        batch = SampleBatch(rng.normal(size=(10, 3)), rng.normal(size=10), np.arange(10))

        small = batch.subsample(4, rng)
        merged = SampleBatch.concatenate([small, SampleBatch(), batch])

        assert len(small) == 4
        assert set(small.ray_index.tolist()) <= set(range(10))
        assert len(merged) == 14
        assert batch.subsample(20, rng) is batch

    def test_samples_view(self):
        batch = SampleBatch(np.array([[1.0, 2.0, 3.0]]), np.array([0.1]), np.array([7]))

        sample = batch.samples[0]

        assert sample.gt_sdf == 0.1
        assert sample.ray_index == 7


def test_dense_sample_count():
    """Testa a contagem do amostrador denso de referência."""
    endpoints = np.array([[1.0, 0.0, 0.0], [0.0, 2.5, 0.0]])

    assert dense_sample_count(np.zeros(3), endpoints, 0.25) == 14
