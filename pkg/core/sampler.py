"""
Amostragem na banda estreita ao redor dos pontos estáticos.

As amostras ficam sobre o raio, a até T_r do ponto final, e só são mantidas
se caem num voxel ativo da grade esparsa.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from core.sparse_grid import SparseGrid, voxel_of
from utils.config import Config

logger = logging.getLogger("voxfield-sampler")

# Abaixo disso o lote é registrado como degradado
LOW_RETENTION = 0.5


@dataclass(frozen=True)
class RaySample:
    position: np.ndarray
    gt_sdf: float
    ray_index: int


@dataclass
class SampleBatch:
    """
    Conjunto de amostras de um passo de treino.

    Atributos:
        positions: (N, 3) posições locais
        gt_sdf: (N,) distância sinalizada ao longo do raio
        ray_index: (N,) índice do raio de origem
        rng_state: Estado do gerador antes da amostragem
    """

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    gt_sdf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ray_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rng_state: Optional[Dict[str, Any]] = None

    def __len__(self) -> int:
        return len(self.gt_sdf)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    @property
    def samples(self) -> List[RaySample]:
        return [RaySample(p, float(s), int(r)) for p, s, r in zip(self.positions, self.gt_sdf, self.ray_index)]

    def select(self, idx: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.positions[idx], self.gt_sdf[idx], self.ray_index[idx], self.rng_state)

    def subsample(self, n: int, rng: np.random.Generator) -> "SampleBatch":
        """Até ``n`` amostras sem reposição."""
        if len(self) <= n:
            return self
        return self.select(np.sort(rng.choice(len(self), size=n, replace=False)))

    @classmethod
    def concatenate(cls, batches: List["SampleBatch"]) -> "SampleBatch":
        batches = [b for b in batches if not b.is_empty]
        if not batches:
            return cls()
        return cls(
            np.concatenate([b.positions for b in batches]),
            np.concatenate([b.gt_sdf for b in batches]),
            np.concatenate([b.ray_index for b in batches])
        )


def _sample_rays(origin: np.ndarray, endpoints: np.ndarray, deltas: np.ndarray):
    rays = endpoints - origin
    dist = np.linalg.norm(rays, axis=1)
    unit = rays / dist[:, None]
    positions = origin + (dist[:, None, None] + deltas[..., None]) * unit[:, None, :]
    gt = dist[:, None] - np.linalg.norm(positions - origin, axis=2)
    return positions, gt


def sample_ray(origin: np.ndarray, endpoint: np.ndarray, truncation: float, n: int,
               rng: Optional[np.random.Generator] = None,
               deltas: Optional[np.ndarray] = None) -> List[RaySample]:
    """
    Amostras p = o + (d + δ)·u com δ ~ U(-T_r, T_r).

    Args:
        deltas: Deslocamentos fixos (substituem o sorteio)

    Raises:
        ValueError: Raio não mais longo que T_r ou n < 1
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    endpoint = np.asarray(endpoint, dtype=np.float64).reshape(1, 3)
    d = float(np.linalg.norm(endpoint - origin))
    if d <= truncation:
        raise ValueError(f"Raio de {d:.4f} m não é mais longo que T_r={truncation}")
    if deltas is None:
        if n < 1:
            raise ValueError("n deve ser >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        deltas = rng.uniform(-truncation, truncation, size=n)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(1, -1)
    positions, gt = _sample_rays(origin, endpoint, deltas)
    return [RaySample(p, float(s), 0) for p, s in zip(positions[0], gt[0])]


def build_batch(scan_static_local: np.ndarray, origin_local: np.ndarray, grid: SparseGrid,
                config: Config, rng: np.random.Generator) -> SampleBatch:
    """
    Lote de treino guiado pelos voxels ativos.

    Sorteia até ``rays_per_batch`` raios, gera ``samples_per_ray`` amostras por
    raio e descarta as que caem fora de voxels ativos. Retorna um lote vazio
    quando nada sobra.
    """
    state = rng.bit_generator.state
    points = np.asarray(scan_static_local, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(origin_local, dtype=np.float64).reshape(3)
    t_r = config.truncation
    dist = np.linalg.norm(points - origin, axis=1)
    usable = np.flatnonzero(dist > t_r)
    if len(usable) == 0 or grid.n_active == 0:
        logger.warning("Lote vazio: nenhum raio utilizável ou grade sem voxels ativos")
        return SampleBatch(rng_state=state)

    n_rays = min(config.rays_per_batch, len(usable))
    chosen = np.sort(rng.choice(usable, size=n_rays, replace=False))
    deltas = rng.uniform(-t_r, t_r, size=(n_rays, config.samples_per_ray))
    positions, gt = _sample_rays(origin, points[chosen], deltas)
    positions = positions.reshape(-1, 3)
    gt = gt.reshape(-1)
    ray_index = np.repeat(chosen, config.samples_per_ray)

    keep = grid.is_active(voxel_of(positions, grid.voxel_size))
    retained = float(keep.mean())
    if not keep.any():
        logger.warning("Lote vazio: nenhuma amostra caiu em voxel ativo")
        return SampleBatch(rng_state=state)
    if retained < LOW_RETENTION:
        logger.warning(f"Apenas {retained:.1%} das amostras caíram em voxels ativos")
    logger.debug(f"Lote: {n_rays} raios, {int(keep.sum())} amostras ({retained:.1%} mantidas)")
    return SampleBatch(positions[keep], gt[keep], ray_index[keep], state)


def dense_sample_count(origin_local: np.ndarray, endpoints_local: np.ndarray, step: float) -> int:
    """Amostras que um amostrador denso ao longo do raio inteiro geraria."""
    endpoints = np.asarray(endpoints_local, dtype=np.float64).reshape(-1, 3)
    dist = np.linalg.norm(endpoints - np.asarray(origin_local, dtype=np.float64), axis=1)
    return int(np.ceil(dist / step).sum())
