"""
Grade esparsa explícita de um submapa.

Os voxels ativos (banda da superfície) e os voxels livres (observados vazios)
são guardados como conjuntos de chaves inteiras de 64 bits, mantidos como
arrays ordenados para inserção e consulta vetorizadas. Cada chave empacota as
três coordenadas com 21 bits por eixo.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger("voxfield-grid")

KEY_BITS = 21
KEY_MASK = (1 << KEY_BITS) - 1
MAX_DIM = 1 << KEY_BITS

# Vizinhança de 26 voxels
NEIGHBOR_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)],
    dtype=np.int64
)


class MisalignedLatticeError(ValueError):
    """Submapas cujas grades não compartilham a mesma rede de voxels."""


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Empacota coordenadas (N, 3) não negativas em chaves int64."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (c[:, 0] << (2 * KEY_BITS)) | (c[:, 1] << KEY_BITS) | c[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> (2 * KEY_BITS)) & KEY_MASK, (keys >> KEY_BITS) & KEY_MASK, keys & KEY_MASK], axis=1)


def voxel_of(p: np.ndarray, s_v: float) -> np.ndarray:
    """Índice do voxel que contém cada ponto: floor(p / s_v)."""
    return np.floor(np.asarray(p, dtype=np.float64) / s_v).astype(np.int64)


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Posição e máscara de presença de ``query`` em ``sorted_keys``."""
    if len(sorted_keys) == 0:
        return np.zeros(len(query), dtype=np.int64), np.zeros(len(query), dtype=bool)
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, len(sorted_keys) - 1)
    return pos_c, sorted_keys[pos_c] == query


@dataclass
class CountedKeySet:
    """
    Conjunto ordenado de chaves com contagem de quadros distintos.

    ``hits[i]`` conta em quantos quadros diferentes a chave foi inserida;
    inserções repetidas no mesmo quadro (ou sem quadro) não incrementam.
    """

    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    hits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    last_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.keys)

    def insert(self, new_keys: np.ndarray, frame_index: Optional[int] = None) -> int:
        """Insere chaves; retorna quantas eram novas."""
        new_keys = np.unique(np.asarray(new_keys, dtype=np.int64))
        if len(new_keys) == 0:
            return 0
        pos, exists = _lookup(self.keys, new_keys)

        if frame_index is not None and exists.any():
            idx = pos[exists]
            changed = idx[self.last_frame[idx] != frame_index]
            self.hits[changed] += 1
            self.last_frame[changed] = frame_index

        added = new_keys[~exists]
        if len(added):
            frame = -1 if frame_index is None else frame_index
            keys = np.concatenate([self.keys, added])
            order = np.argsort(keys, kind="stable")
            self.keys = keys[order]
            self.hits = np.concatenate([self.hits, np.ones(len(added), dtype=np.int64)])[order]
            self.last_frame = np.concatenate(
                [self.last_frame, np.full(len(added), frame, dtype=np.int64)]
            )[order]
        return len(added)

    def contains(self, query: np.ndarray, min_hits: int = 1) -> np.ndarray:
        pos, found = _lookup(self.keys, np.asarray(query, dtype=np.int64))
        if min_hits > 1:
            found &= self.hits[pos] >= min_hits
        return found

    def hits_of(self, query: np.ndarray) -> np.ndarray:
        pos, found = _lookup(self.keys, np.asarray(query, dtype=np.int64))
        return np.where(found, self.hits[pos] if len(self.keys) else 0, 0)

    def remove(self, drop: np.ndarray) -> int:
        if len(self.keys) == 0 or len(drop) == 0:
            return 0
        keep = ~np.isin(self.keys, drop, assume_unique=False)
        removed = int(len(self.keys) - keep.sum())
        self.keys, self.hits, self.last_frame = self.keys[keep], self.hits[keep], self.last_frame[keep]
        return removed

    def copy(self) -> "CountedKeySet":
        return CountedKeySet(self.keys.copy(), self.hits.copy(), self.last_frame.copy())


@dataclass
class SparseGrid:
    """
    Conjuntos de voxels ativos e livres sobre a caixa local [0, dims·s_v).

    Atributos:
        voxel_size: Aresta do voxel (m)
        dims: Número de voxels por eixo
        active: Voxels da banda da superfície
        free: Voxels observados livres (remoção dinâmica)
    """

    voxel_size: float
    dims: np.ndarray
    active: CountedKeySet = field(default_factory=CountedKeySet)
    free: CountedKeySet = field(default_factory=CountedKeySet)

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.int64).reshape(3)
        if self.voxel_size <= 0:
            raise ValueError("voxel_size deve ser positivo")
        if np.any(self.dims < 1) or np.any(self.dims >= MAX_DIM):
            raise ValueError(f"Dimensões da grade fora do intervalo: {self.dims.tolist()}")

    @classmethod
    def for_extent(cls, extent: np.ndarray, voxel_size: float) -> "SparseGrid":
        dims = np.round(np.asarray(extent, dtype=np.float64) / voxel_size).astype(np.int64)
        return cls(voxel_size=voxel_size, dims=dims)

    @property
    def extent(self) -> np.ndarray:
        return self.dims * self.voxel_size

    @property
    def n_active(self) -> int:
        return len(self.active)

    @property
    def n_free(self) -> int:
        return len(self.free)

    def in_bounds(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return np.all((c >= 0) & (c < self.dims), axis=1)

    def active_coords(self) -> np.ndarray:
        """Coordenadas ativas em ordem lexicográfica (i, j, k)."""
        return unpack_keys(self.active.keys)

    def free_coords(self, min_hits: int = 1) -> np.ndarray:
        keys = self.free.keys if min_hits <= 1 else self.free.keys[self.free.hits >= min_hits]
        return unpack_keys(keys)

    def _keys_in_bounds(self, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        inside = self.in_bounds(c)
        keys = np.full(len(c), -1, dtype=np.int64)
        keys[inside] = pack_keys(c[inside])
        return keys, inside

    def is_active(self, coords: np.ndarray) -> np.ndarray:
        keys, inside = self._keys_in_bounds(coords)
        result = np.zeros(len(keys), dtype=bool)
        result[inside] = self.active.contains(keys[inside])
        return result

    def is_free(self, coords: np.ndarray, min_hits: int = 1) -> np.ndarray:
        keys, inside = self._keys_in_bounds(coords)
        result = np.zeros(len(keys), dtype=bool)
        result[inside] = self.free.contains(keys[inside], min_hits=min_hits)
        return result

    def activation_hits(self, coords: np.ndarray) -> np.ndarray:
        """Número de quadros que ativaram cada voxel (0 se inativo)."""
        keys, inside = self._keys_in_bounds(coords)
        result = np.zeros(len(keys), dtype=np.int64)
        result[inside] = self.active.hits_of(keys[inside])
        return result

    def insert_active(self, coords: np.ndarray, frame_index: Optional[int] = None) -> int:
        keys, inside = self._keys_in_bounds(coords)
        return self.active.insert(keys[inside], frame_index)

    def insert_free(self, coords: np.ndarray, frame_index: Optional[int] = None) -> int:
        keys, inside = self._keys_in_bounds(coords)
        return self.free.insert(keys[inside], frame_index)

    def resolve(self) -> int:
        """Remove do conjunto livre os voxels ativos (ativo prevalece)."""
        return self.free.remove(self.active.keys)

    def active_bounds(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Menor e maior índice ativo por eixo, ou None se vazia."""
        if self.n_active == 0:
            return None
        coords = self.active_coords()
        return coords.min(axis=0), coords.max(axis=0)

    def copy(self) -> "SparseGrid":
        return SparseGrid(self.voxel_size, self.dims.copy(), self.active.copy(), self.free.copy())


# ---------------------------------------------------------------------------
# Ativação
# ---------------------------------------------------------------------------

def ball_offsets(truncation: float, voxel_size: float) -> np.ndarray:
    """Deslocamentos candidatos na vizinhança de Chebyshev ceil(T_r / s_v)."""
    r = int(math.ceil(truncation / voxel_size))
    rng = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)


def activation_voxels(points: np.ndarray, truncation: float, voxel_size: float,
                      chunk: int = 4096) -> np.ndarray:
    """
    Voxels cuja caixa intersecta a bola de raio T_r de algum ponto.

    Returns:
        Coordenadas (M, 3) únicas, sem recorte pela caixa da grade
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    offsets = ball_offsets(truncation, voxel_size)
    r2 = truncation * truncation
    found: List[np.ndarray] = []
    for start in range(0, len(pts), chunk):
        p = pts[start:start + chunk]
        cand = voxel_of(p, voxel_size)[:, None, :] + offsets[None, :, :]
        lo = cand * voxel_size
        gap = np.maximum(np.maximum(lo - p[:, None, :], 0.0), p[:, None, :] - (lo + voxel_size))
        hit = np.einsum("nkd,nkd->nk", gap, gap) <= r2
        found.append(cand[hit])
    return np.unique(np.concatenate(found), axis=0)


def activate(grid: SparseGrid, static_points_local: np.ndarray, truncation: float,
             frame_index: Optional[int] = None) -> SparseGrid:
    """
    Ativa os voxels da banda truncada ao redor dos pontos estáticos.

    Voxels fora da caixa são ignorados; a operação é idempotente para o
    mesmo quadro.
    """
    coords = activation_voxels(static_points_local, truncation, grid.voxel_size)
    added = grid.insert_active(coords, frame_index)
    logger.debug(f"Ativação: {added} voxels novos, {grid.n_active} ativos")
    return grid


# ---------------------------------------------------------------------------
# Travessia DDA
# ---------------------------------------------------------------------------

@dataclass
class RayTraversal:
    """Voxels visitados por um lote de raios, agrupados por raio em ordem de t."""

    ray_index: np.ndarray
    voxels: np.ndarray
    t_enter: np.ndarray

    def __len__(self) -> int:
        return len(self.ray_index)

    def for_ray(self, i: int) -> List[Tuple[Tuple[int, int, int], float]]:
        sel = self.ray_index == i
        return [(tuple(int(v) for v in vox), float(t)) for vox, t in zip(self.voxels[sel], self.t_enter[sel])]


def traverse_rays(grid: SparseGrid, origins: np.ndarray, directions: np.ndarray,
                  t_max: np.ndarray) -> RayTraversal:
    """
    Percorre vários raios pela caixa da grade (Amanatides-Woo vetorizado).

    Empates entre eixos avançam primeiro x, depois y, depois z.

    Args:
        origins: (R, 3) ou (3,) origens locais
        directions: (R, 3) direções unitárias
        t_max: (R,) ou escalar, comprimento de cada segmento
    """
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n_rays = len(d)
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64).reshape(-1, 3), (n_rays, 3)).copy()
    t_limit = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n_rays,)).copy()
    empty = RayTraversal(np.zeros(0, np.int64), np.zeros((0, 3), np.int64), np.zeros(0))
    if n_rays == 0:
        return empty

    s = grid.voxel_size
    box_hi = grid.dims * s
    moving = d != 0
    inside_slab = (o >= 0) & (o < box_hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = -o / d
        t2 = (box_hi - o) / d
    t_lo = np.where(moving, np.minimum(t1, t2), np.where(inside_slab, -np.inf, np.inf))
    t_hi = np.where(moving, np.maximum(t1, t2), np.where(inside_slab, np.inf, -np.inf))
    t_start = np.maximum(t_lo.max(axis=1), 0.0)
    t_end = np.minimum(t_hi.min(axis=1), t_limit)
    alive = t_start < t_end
    if not alive.any():
        return empty

    idx = np.clip(voxel_of(o + t_start[:, None] * d, s), 0, grid.dims - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = (idx + (step > 0)) * s
        t_next = np.where(moving, (boundary - o) / d, np.inf)
        t_delta = np.where(moving, s / np.abs(d), np.inf)

    t_cur = t_start.copy()
    rays, voxels, times = [], [], []
    while True:
        a = np.flatnonzero(alive)
        if len(a) == 0:
            break
        rays.append(a)
        voxels.append(idx[a].copy())
        times.append(t_cur[a].copy())

        tn = t_next[a]
        axis = np.argmin(tn, axis=1)
        rows = np.arange(len(a))
        crossing = tn[rows, axis]
        idx[a, axis] += step[a, axis]
        t_next[a, axis] += t_delta[a, axis]
        t_cur[a] = np.maximum(crossing, t_cur[a])
        in_box = np.all((idx[a] >= 0) & (idx[a] < grid.dims), axis=1)
        alive[a] = in_box & (t_cur[a] < t_end[a])

    ray_index = np.concatenate(rays)
    order = np.argsort(ray_index, kind="stable")
    return RayTraversal(ray_index[order], np.concatenate(voxels)[order], np.concatenate(times)[order])


def traverse_ray(grid: SparseGrid, origin: np.ndarray, direction: np.ndarray,
                 t_max: float) -> List[Tuple[Tuple[int, int, int], float]]:
    """
    Voxels intersectados pelo segmento [origin, origin + t_max·dir], em ordem de t.

    Raises:
        ValueError: Direção nula ou não unitária, ou t_max <= 0
    """
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        raise ValueError("Direção degenerada (vetor nulo)")
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"Direção deve ser unitária (|dir|={norm})")
    if not t_max > 0:
        raise ValueError(f"t_max deve ser positivo (recebido {t_max})")
    return traverse_rays(grid, origin, direction[None, :], np.array([t_max])).for_ray(0)


# ---------------------------------------------------------------------------
# Sobreposição entre submapas
# ---------------------------------------------------------------------------

@dataclass
class OverlapSet:
    """
    Voxels ativos do submapa anterior dentro da caixa do novo.

    Atributos:
        voxels: (M, 3) coordenadas na rede do NOVO submapa, ordem lexicográfica
        offset: Deslocamento inteiro tal que índice_anterior = índice_novo + offset
    """

    voxels: np.ndarray
    offset: np.ndarray

    def __len__(self) -> int:
        return len(self.voxels)

    @property
    def is_empty(self) -> bool:
        return len(self.voxels) == 0


def lattice_offset(prev, next_) -> np.ndarray:
    """
    Δ = (b_min_next - b_min_prev) / s_v como inteiros.

    Raises:
        MisalignedLatticeError: Tamanhos de voxel diferentes ou Δ não inteiro
    """
    s_prev, s_next = prev.sparse_grid.voxel_size, next_.sparse_grid.voxel_size
    if s_prev != s_next:
        raise MisalignedLatticeError(f"Tamanhos de voxel diferentes: {s_prev} e {s_next}")
    if np.array_equal(prev.anchor, next_.anchor):
        return np.asarray(next_.lattice_index, dtype=np.int64) - np.asarray(prev.lattice_index, dtype=np.int64)
    delta = (np.asarray(next_.b_min) - np.asarray(prev.b_min)) / s_prev
    rounded = np.round(delta)
    if np.max(np.abs(delta - rounded)) > 1e-6:
        raise MisalignedLatticeError(f"Submapas fora da mesma rede: Δ={delta.tolist()}")
    return rounded.astype(np.int64)


def overlap_voxels(prev, next_) -> OverlapSet:
    """
    Extrai os voxels ativos de ``prev`` que caem na caixa de ``next_``.

    Os voxels são reindexados na rede do novo submapa e inseridos em
    ``next_.sparse_grid``.
    """
    delta = lattice_offset(prev, next_)
    coords = prev.sparse_grid.active_coords() - delta
    coords = coords[next_.sparse_grid.in_bounds(coords)]
    next_.sparse_grid.insert_active(coords)
    logger.info(f"Sobreposição {prev.id} → {next_.id}: {len(coords)} voxels (Δ={delta.tolist()})")
    return OverlapSet(voxels=coords, offset=delta)


def dump_active_xyz(grid: SparseGrid, path: Union[str, Path], b_min: Optional[np.ndarray] = None) -> None:
    """Grava os centros dos voxels ativos como lista ascii XYZ."""
    origin = np.zeros(3) if b_min is None else np.asarray(b_min, dtype=np.float64)
    centers = (grid.active_coords() + 0.5) * grid.voxel_size + origin
    np.savetxt(path, centers, fmt="%.6f")
