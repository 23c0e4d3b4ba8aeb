"""
Remoção de pontos dinâmicos por escavação de espaço livre.

Cada raio marca como livres os voxels atravessados antes de d_i - T_r. Um
ponto que cai num voxel já observado livre vira semente dinâmica, e o rótulo
cresce pelos pontos vizinhos da varredura até estabilizar.
"""

import logging
from enum import IntEnum
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from core.sparse_grid import NEIGHBOR_OFFSETS, SparseGrid, traverse_rays, voxel_of
from utils.performance import performance_monitor

logger = logging.getLogger("voxfield-dynamic")


class PointLabel(IntEnum):
    STATIC = 0
    DYNAMIC = 1


def carve_free_space(grid: SparseGrid, origin_local: np.ndarray, endpoints_local: np.ndarray,
                     truncation: float, frame_index: Optional[int] = None) -> SparseGrid:
    """
    Marca como livres os voxels atravessados com t < d_i - T_r.

    Voxels já ativos nunca são marcados livres.
    """
    endpoints = np.asarray(endpoints_local, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(origin_local, dtype=np.float64).reshape(3)
    if len(endpoints) == 0:
        return grid
    rays = endpoints - origin
    dist = np.linalg.norm(rays, axis=1)
    usable = dist - truncation > 0
    if not usable.any():
        return grid
    directions = rays[usable] / dist[usable, None]
    traversal = traverse_rays(grid, origin, directions, dist[usable] - truncation)
    performance_monitor.increment("traversal_visits", len(traversal))
    if len(traversal) == 0:
        return grid

    voxels = np.unique(traversal.voxels, axis=0)
    voxels = voxels[~grid.is_active(voxels)]
    added = grid.insert_free(voxels, frame_index)
    logger.debug(f"Escavação: {usable.sum()} raios, {len(traversal)} visitas, {added} voxels livres novos")
    return grid


def _known_neighbors(grid: SparseGrid, voxels: np.ndarray) -> np.ndarray:
    """Quantos dos 26 vizinhos de cada voxel já foram observados (livres ou ativos)."""
    neighbors = (voxels[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]).reshape(-1, 3)
    known = grid.is_free(neighbors) | grid.is_active(neighbors)
    return known.reshape(len(voxels), len(NEIGHBOR_OFFSETS)).sum(axis=1)


def classify_points(grid: SparseGrid, points_local: np.ndarray, min_free_hits: int = 1,
                    seed_min_known_neighbors: int = 0,
                    grow_stable_hits: Optional[int] = None) -> np.ndarray:
    """
    Rotula cada ponto como estático ou dinâmico.

    Args:
        grid: Grade com o espaço livre dos quadros anteriores
        points_local: (N, 3) pontos no referencial do submapa
        min_free_hits: Quadros distintos que precisam ter visto o voxel livre
        seed_min_known_neighbors: Vizinhos observados exigidos de uma semente
        grow_stable_hits: O crescimento não entra em voxels ativados em pelo
            menos este número de quadros (None desliga o bloqueio)

    Returns:
        Array (N,) com valores de PointLabel
    """
    points = np.asarray(points_local, dtype=np.float64).reshape(-1, 3)
    labels = np.full(len(points), PointLabel.STATIC, dtype=np.int8)
    if len(points) == 0 or grid.n_free == 0:
        return labels

    s = grid.voxel_size
    voxels = voxel_of(points, s)
    seeds = grid.is_free(voxels, min_hits=min_free_hits)
    if seed_min_known_neighbors > 0 and seeds.any():
        idx = np.flatnonzero(seeds)
        seeds[idx] = _known_neighbors(grid, voxels[idx]) >= seed_min_known_neighbors
    if not seeds.any():
        return labels

    blocked = np.zeros(len(points), dtype=bool)
    if grow_stable_hits is not None:
        blocked = grid.activation_hits(voxels) >= grow_stable_hits

    dynamic = seeds.copy()
    frontier = np.flatnonzero(seeds)
    tree = cKDTree(points)
    radius = np.sqrt(3.0) * s + 1e-9
    rounds = 0
    while len(frontier):
        neighbor_lists = tree.query_ball_point(points[frontier], radius, return_sorted=False)
        candidates = np.unique(np.concatenate([np.asarray(n, dtype=np.int64) for n in neighbor_lists]))
        candidates = candidates[~dynamic[candidates] & ~blocked[candidates]]
        dynamic[candidates] = True
        frontier = candidates
        rounds += 1

    labels[dynamic] = PointLabel.DYNAMIC
    logger.debug(f"Classificação: {int(seeds.sum())} sementes, {int(dynamic.sum())} dinâmicos após {rounds} rodadas")
    return labels


def filter_static(scan_local: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """
    Pontos rotulados estáticos, na ordem original.

    Raises:
        ValueError: Número de rótulos diferente do número de pontos
    """
    points = np.asarray(scan_local, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels)
    if len(points) != len(labels):
        raise ValueError(f"{len(points)} pontos e {len(labels)} rótulos")
    return points[labels == PointLabel.STATIC]


def dump_labels(labels: np.ndarray, path: Union[str, Path]) -> None:
    """Grava ``índice rótulo`` por linha (static/dynamic)."""
    names = {int(PointLabel.STATIC): "static", int(PointLabel.DYNAMIC): "dynamic"}
    with open(path, "w", encoding="utf-8") as f:
        for i, label in enumerate(np.asarray(labels).tolist()):
            f.write(f"{i} {names[int(label)]}\n")


def load_labels(path: Union[str, Path]) -> np.ndarray:
    """Lê um arquivo gravado por ``dump_labels``."""
    values = {"static": PointLabel.STATIC, "dynamic": PointLabel.DYNAMIC}
    labels = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[1] not in values:
                raise ValueError(f"{path}:{line_no}: linha de rótulo inválida {line.strip()!r}")
            labels.append(values[parts[1]])
    return np.asarray(labels, dtype=np.int8)
