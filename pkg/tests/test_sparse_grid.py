"""
Testes unitários para a grade esparsa, a travessia de raios e a sobreposição.
"""

import math

import numpy as np
import pytest

from core.sparse_grid import (MisalignedLatticeError, SparseGrid, activate, activation_voxels, dump_active_xyz,
                              lattice_offset, overlap_voxels, pack_keys, traverse_ray, traverse_rays,
                              unpack_keys, voxel_of)
from core.submap_manager import create_submap
from utils.config import Config


def _ball_box_brute(point, truncation, voxel_size, reach=3):
    """Voxels cuja caixa está a no máximo T_r do ponto, por enumeração."""
    base = np.floor(point / voxel_size).astype(int)
    found = set()
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            for dk in range(-reach, reach + 1):
                v = base + np.array([di, dj, dk])
                lo = v * voxel_size
                nearest = np.clip(point, lo, lo + voxel_size)
                if np.linalg.norm(point - nearest) <= truncation:
                    found.add(tuple(int(x) for x in v))
    return found


def _chords(grid, origin, direction, t_max):
    """Comprimento e entrada do segmento em todos os voxels da grade (interseção de slabs)."""
    coords = np.stack(np.meshgrid(*[np.arange(n) for n in grid.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    lo = coords * grid.voxel_size
    hi = lo + grid.voxel_size
    t0 = np.zeros(len(coords))
    t1 = np.full(len(coords), t_max)
    for axis in range(3):
        o, d = origin[axis], direction[axis]
        if d == 0.0:
            outside = (o < lo[:, axis]) | (o >= hi[:, axis])
            t1[outside] = -np.inf
            continue
        ta, tb = (lo[:, axis] - o) / d, (hi[:, axis] - o) / d
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    return coords, t1 - t0, t0


class TestKeysAndVoxels:
    """Testes para a indexação de voxels."""

    def test_voxel_of_examples(self):
        """Testa o piso por componente, incluindo borda e negativos."""
        np.testing.assert_array_equal(voxel_of(np.array([0.05, 0.05, 0.05]), 0.2), [0, 0, 0])
        np.testing.assert_array_equal(voxel_of(np.array([0.2, 0.0, 0.0]), 0.2), [1, 0, 0])
        np.testing.assert_array_equal(voxel_of(np.array([-0.01, 0.0, 0.0]), 0.2), [-1, 0, 0])

    def test_pack_unpack(self, rng):
        """Testa que o empacotamento preserva as coordenadas."""
        coords = rng.integers(0, 2 ** 21, size=(100, 3))
        np.testing.assert_array_equal(unpack_keys(pack_keys(coords)), coords)

    def test_grid_dims_range(self):
        """Testa dimensões inválidas."""
        with pytest.raises(ValueError):
            SparseGrid(voxel_size=0.2, dims=(0, 10, 10))


class TestSparseGrid:
    """Testes para os conjuntos ativo e livre."""

    def test_insert_out_of_bounds_skipped(self):
        """Testa que coordenadas fora da caixa são ignoradas."""
        grid = SparseGrid(0.2, (5, 5, 5))

        added = grid.insert_active(np.array([[0, 0, 0], [5, 0, 0], [-1, 2, 2]]))

        assert added == 1
        assert grid.is_active(np.array([[5, 0, 0]])).tolist() == [False]

    def test_hits_count_distinct_frames(self):
        """Testa que a contagem só cresce em quadros diferentes."""
        grid = SparseGrid(0.2, (5, 5, 5))
        v = np.array([[1, 1, 1]])

        grid.insert_free(v, frame_index=0)
        grid.insert_free(v, frame_index=0)
        grid.insert_free(v, frame_index=3)

        assert grid.free.hits_of(pack_keys(v)).tolist() == [2]
        assert grid.is_free(v, min_hits=2).tolist() == [True]
        assert grid.is_free(v, min_hits=3).tolist() == [False]

    def test_resolve_active_wins(self):
        """Testa que ativo prevalece sobre livre no fim do quadro."""
        grid = SparseGrid(0.2, (5, 5, 5))
        grid.insert_free(np.array([[1, 1, 1], [2, 2, 2]]))
        grid.insert_active(np.array([[1, 1, 1]]))

        removed = grid.resolve()

        assert removed == 1
        assert grid.is_free(np.array([[1, 1, 1], [2, 2, 2]])).tolist() == [False, True]

    def test_active_bounds(self):
        """Testa os limites dos voxels ativos e a grade vazia."""
        grid = SparseGrid(0.2, (10, 10, 10))
        assert grid.active_bounds() is None

        grid.insert_active(np.array([[1, 5, 2], [4, 0, 3]]))
        lo, hi = grid.active_bounds()

        np.testing.assert_array_equal(lo, [1, 0, 2])
        np.testing.assert_array_equal(hi, [4, 5, 3])

    def test_copy_is_independent(self):
        """Testa que a cópia não compartilha os arrays."""
        grid = SparseGrid(0.2, (5, 5, 5))
        grid.insert_active(np.array([[1, 1, 1]]))

        clone = grid.copy()
        clone.insert_active(np.array([[2, 2, 2]]))

        assert grid.n_active == 1
        assert clone.n_active == 2

    def test_dump_active_xyz(self, tmp_path):
        """Testa a gravação dos centros dos voxels."""
        grid = SparseGrid(0.2, (5, 5, 5))
        grid.insert_active(np.array([[0, 0, 0], [1, 2, 3]]))
        path = tmp_path / "active.xyz"

        dump_active_xyz(grid, path, b_min=np.array([10.0, 0.0, 0.0]))

        np.testing.assert_allclose(np.loadtxt(path), [[10.1, 0.1, 0.1], [10.3, 0.5, 0.7]])


class TestActivation:
    """Testes para a ativação da banda truncada."""

    def test_single_point_at_center(self):
        """Testa a vizinhança de um ponto no centro de um voxel contra enumeração direta."""
        point = np.array([1.1, 1.1, 1.1])
        grid = SparseGrid(0.2, (20, 20, 20))

        activate(grid, point[None, :], truncation=0.25)

        expected = _ball_box_brute(point, 0.25, 0.2)
        assert {tuple(v) for v in grid.active_coords().tolist()} == expected
        assert len(expected) == 27

    def test_matches_brute_force_random(self, rng):
        """Testa pontos aleatórios com raio maior que um voxel."""
        points = rng.uniform(0.8, 3.2, size=(20, 3))

        found = {tuple(v) for v in activation_voxels(points, 0.35, 0.2).tolist()}

        expected = set()
        for p in points:
            expected |= _ball_box_brute(p, 0.35, 0.2)
        assert found == expected

    def test_band_distance(self, rng):
        """Testa que todo voxel ativo está a no máximo T_r + √3/2·s_v de um ponto."""
        points = rng.uniform(0.5, 3.5, size=(40, 3))
        grid = SparseGrid(0.2, (20, 20, 20))

        activate(grid, points, truncation=0.25)

        centers = (grid.active_coords() + 0.5) * 0.2
        dists = np.linalg.norm(centers[:, None, :] - points[None, :, :], axis=2).min(axis=1)
        assert np.all(dists <= 0.25 + math.sqrt(3) / 2 * 0.2 + 1e-12)

    def test_idempotent(self, rng):
        """Testa que ativar duas vezes produz a mesma grade."""
        points = rng.uniform(0.5, 3.5, size=(30, 3))
        grid = SparseGrid(0.2, (20, 20, 20))

        activate(grid, points, 0.25, frame_index=0)
        first = grid.active.keys.copy()
        activate(grid, points, 0.25, frame_index=0)

        np.testing.assert_array_equal(grid.active.keys, first)
        assert np.all(grid.active.hits == 1)

    def test_empty_points(self):
        """Testa a lista vazia."""
        grid = SparseGrid(0.2, (5, 5, 5))

        activate(grid, np.zeros((0, 3)), 0.25)

        assert grid.n_active == 0

    def test_clipped_to_box(self):
        """Testa que voxels fora da caixa não são armazenados."""
        grid = SparseGrid(0.2, (5, 5, 5))

        activate(grid, np.array([[0.05, 0.05, 0.05]]), 0.25)

        coords = grid.active_coords()
        assert len(coords) > 0
        assert np.all(grid.in_bounds(coords))


class TestTraversal:
    """Testes para a travessia DDA."""

    def test_hand_trace(self):
        """Testa o raio ao longo de x a partir de (0.1, 0.1, 0.1)."""
        grid = SparseGrid(0.2, (10, 10, 10))

        visited = traverse_ray(grid, np.array([0.1, 0.1, 0.1]), np.array([1.0, 0.0, 0.0]), 0.5)

        assert [v for v, _ in visited] == [(0, 0, 0), (1, 0, 0), (2, 0, 0)]
        np.testing.assert_allclose([t for _, t in visited], [0.0, 0.1, 0.3], atol=1e-12)

    def test_ray_outside_box(self):
        """Testa o raio que nunca entra na caixa."""
        grid = SparseGrid(0.2, (10, 10, 10))

        assert traverse_ray(grid, np.array([-1.0, -1.0, 0.5]), np.array([0.0, 0.0, 1.0]), 5.0) == []

    def test_ray_entering_from_outside(self):
        """Testa a entrada na caixa com t_enter positivo."""
        grid = SparseGrid(0.2, (10, 10, 10))

        visited = traverse_ray(grid, np.array([-0.5, 0.1, 0.1]), np.array([1.0, 0.0, 0.0]), 0.8)

        assert visited[0][0] == (0, 0, 0)
        assert visited[0][1] == pytest.approx(0.5)
        assert [v[0] for v, _ in visited] == [0, 1]

    def test_diagonal_through_corner(self):
        """Testa o raio diagonal por 2³ voxels sem pular cantos."""
        grid = SparseGrid(0.2, (2, 2, 2))
        direction = np.ones(3) / math.sqrt(3.0)

        visited = [v for v, _ in traverse_ray(grid, np.zeros(3), direction, 0.4 * math.sqrt(3.0))]

        assert len(visited) <= 4
        assert visited[0] == (0, 0, 0)
        assert visited[-1] == (1, 1, 1)
        # Desempate avança x primeiro
        assert visited[1] == (1, 0, 0)

    def test_invalid_direction(self):
        """Testa direção nula e não unitária."""
        grid = SparseGrid(0.2, (5, 5, 5))

        with pytest.raises(ValueError, match="nulo"):
            traverse_ray(grid, np.zeros(3), np.zeros(3), 1.0)
        with pytest.raises(ValueError, match="unitária"):
            traverse_ray(grid, np.zeros(3), np.array([2.0, 0.0, 0.0]), 1.0)
        with pytest.raises(ValueError):
            traverse_ray(grid, np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.0)

    def test_matches_slab_oracle(self, rng):
        """Testa raios aleatórios contra a interseção exata com cada voxel."""
        grid = SparseGrid(0.2, (10, 10, 10))

        for _ in range(30):
            origin = rng.uniform(0.05, 1.95, size=3)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            t_max = float(rng.uniform(0.3, 2.5))

            visited = traverse_ray(grid, origin, direction, t_max)
            coords, chord, t_in = _chords(grid, origin, direction, t_max)

            found = {v for v, _ in visited}
            strict = {tuple(c) for c in coords[chord > 1e-9].tolist()}
            loose = {tuple(c) for c in coords[chord >= -1e-9].tolist()}
            assert strict <= found <= loose

            entry = {tuple(c): t for c, t in zip(coords.tolist(), t_in)}
            for v, t in visited:
                assert t == pytest.approx(entry[v], abs=1e-9)
            times = [t for _, t in visited]
            assert times == sorted(times)

    @pytest.mark.slow
    def test_slab_oracle_thousand_rays(self, rng):
        grid = SparseGrid(0.2, (10, 10, 10))

        for _ in range(1000):
            origin = rng.uniform(-0.5, 2.5, size=3)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            t_max = float(rng.uniform(0.1, 3.0))

            found = {v for v, _ in traverse_ray(grid, origin, direction, t_max)}
            coords, chord, _ = _chords(grid, origin, direction, t_max)

            assert {tuple(c) for c in coords[chord > 1e-9].tolist()} <= found
            assert found <= {tuple(c) for c in coords[chord >= -1e-9].tolist()}

    def test_sampled_segment_subset(self, rng):
        """Testa que amostras a cada s_v/100 caem apenas em voxels visitados."""
        grid = SparseGrid(0.2, (10, 10, 10))
        origin = np.array([0.33, 0.71, 0.52])
        direction = np.array([0.6, 0.48, 0.64])

        visited = {v for v, _ in traverse_ray(grid, origin, direction, 1.5)}

        ts = np.arange(0.0, 1.5, 0.002)
        samples = voxel_of(origin + ts[:, None] * direction, 0.2)
        samples = samples[grid.in_bounds(samples)]
        assert {tuple(v) for v in samples.tolist()} <= visited

    def test_batched_matches_single(self, rng):
        """Testa que o lote devolve por raio o mesmo que a chamada isolada."""
        grid = SparseGrid(0.2, (10, 10, 10))
        origins = rng.uniform(0.1, 1.9, size=(8, 3))
        directions = rng.normal(size=(8, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)

        batch = traverse_rays(grid, origins, directions, np.full(8, 1.0))

        for i in range(8):
            assert batch.for_ray(i) == traverse_ray(grid, origins[i], directions[i], 1.0)


class TestOverlap:
    """Testes para a extração de voxels em sobreposição."""

    @pytest.fixture
    def config(self):
        return Config(submap_extent=(4.0, 4.0, 2.0))

    def _submap(self, config, center, anchor=None, submap_id=0):
        return create_submap(np.asarray(center, dtype=float), np.array(config.submap_extent), config,
                             anchor=anchor, submap_id=submap_id, with_field=False)

    def test_disjoint_boxes(self, config):
        """Testa caixas disjuntas."""
        prev = self._submap(config, [0.0, 0.0, 0.0])
        nxt = self._submap(config, [10.0, 0.0, 0.0], anchor=prev.anchor, submap_id=1)
        prev.sparse_grid.insert_active(np.array([[1, 1, 1], [19, 19, 9]]))

        overlap = overlap_voxels(prev, nxt)

        assert overlap.is_empty
        assert nxt.sparse_grid.n_active == 0

    def test_same_box_identity(self, config, rng):
        """Testa que a mesma caixa preserva os índices."""
        prev = self._submap(config, [0.0, 0.0, 0.0])
        nxt = self._submap(config, [0.0, 0.0, 0.0], anchor=prev.anchor, submap_id=1)
        prev.sparse_grid.insert_active(rng.integers(0, 10, size=(50, 3)))

        overlap = overlap_voxels(prev, nxt)

        np.testing.assert_array_equal(overlap.voxels, prev.sparse_grid.active_coords())
        np.testing.assert_array_equal(overlap.offset, [0, 0, 0])

    def test_shifted_reindexing(self, config, rng):
        """Testa (i, j, k)_anterior → (i, j, k) - Δ no novo submapa."""
        prev = self._submap(config, [0.0, 0.0, 0.0])
        nxt = self._submap(config, [0.6, -0.4, 0.2], anchor=prev.anchor, submap_id=1)
        coords = np.unique(rng.integers(0, 20, size=(200, 3)) % [20, 20, 10], axis=0)
        prev.sparse_grid.insert_active(coords)

        overlap = overlap_voxels(prev, nxt)

        np.testing.assert_array_equal(overlap.offset, [3, -2, 1])
        expected = coords - overlap.offset
        expected = expected[nxt.sparse_grid.in_bounds(expected)]
        assert {tuple(v) for v in overlap.voxels.tolist()} == {tuple(v) for v in expected.tolist()}
        assert np.all(nxt.sparse_grid.is_active(overlap.voxels))
        np.testing.assert_array_equal(nxt.vertex_world(overlap.voxels),
                                      prev.vertex_world(overlap.voxels + overlap.offset))

    def test_misaligned(self, config):
        """Testa submapas fora da mesma rede."""
        prev = self._submap(config, [0.0, 0.0, 0.0])
        nxt = self._submap(config, [0.05, 0.0, 0.0], submap_id=1)

        with pytest.raises(MisalignedLatticeError):
            lattice_offset(prev, nxt)
