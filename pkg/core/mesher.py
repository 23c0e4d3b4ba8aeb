"""
Extração de malhas por marching cubes sobre a banda ativa de cada submapa.

A SDF é avaliada apenas nos vértices dos voxels ativos (mais uma dilatação
de um voxel); as células com os 8 cantos avaliados entram no marching cubes
do scikit-image. Em regiões de sobreposição o submapa mais novo é o dono.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence

import numpy as np
from skimage import measure

from core.sparse_grid import NEIGHBOR_OFFSETS, lattice_offset
from utils.performance import measure as timed

if TYPE_CHECKING:
    from core.neural_field import FeatureField
    from core.submap_manager import Submap
    from utils.config import Config

logger = logging.getLogger("voxfield-mesher")

SdfFunction = Callable[[np.ndarray], np.ndarray]

# Faces sondadas na verificação de orientação
ORIENTATION_PROBES = 256
EVAL_CHUNK = 65536


class MeshError(ValueError):
    """Malha inválida (índices fora do intervalo ou vértices não finitos)."""


@dataclass
class Mesh:
    """
    Malha triangular no referencial do mundo.

    Atributos:
        vertices: (N, 3) posições em metros
        triangles: (M, 3) índices de vértices
    """

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "Mesh":
        return cls()

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def validate(self) -> None:
        """
        Raises:
            MeshError: Índice fora do intervalo ou vértice não finito
        """
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("Malha com vértices não finitos")
        if self.n_triangles and (self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices):
            raise MeshError(
                f"Índice de face fora do intervalo [0, {self.n_vertices}): "
                f"min={self.triangles.min()}, max={self.triangles.max()}"
            )

    def face_normals(self) -> np.ndarray:
        """Normais não normalizadas (regra da mão direita)."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def flipped(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.triangles[:, [0, 2, 1]].copy())

    def subset(self, keep: np.ndarray) -> "Mesh":
        """Mantém os triângulos selecionados e descarta vértices órfãos."""
        triangles = self.triangles[np.asarray(keep, dtype=bool)]
        used, inverse = np.unique(triangles.ravel(), return_inverse=True)
        return Mesh(self.vertices[used], inverse.reshape(-1, 3))


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------

def marching_cubes_grid(volume: np.ndarray, origin: np.ndarray, spacing: float,
                        mask: Optional[np.ndarray] = None) -> Mesh:
    """
    Isosuperfície de nível zero de uma grade densa.

    Args:
        volume: Valores de SDF nos vértices (nx, ny, nz)
        origin: Posição do vértice (0, 0, 0) no mundo
        spacing: Espaçamento da grade (m)
        mask: Células processadas, indexadas pelo canto mínimo

    Returns:
        Malha no mundo; vazia se não houver cruzamento de zero
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3 or min(volume.shape) < 2:
        return Mesh.empty()
    if (mask is not None and not mask.any()) or volume.min() > 0 or volume.max() < 0:
        return Mesh.empty()
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume, level=0.0, spacing=(spacing,) * 3, mask=mask, allow_degenerate=False
        )
    except (ValueError, RuntimeError) as e:
        logger.debug(f"Marching cubes sem superfície: {e}")
        return Mesh.empty()
    return Mesh(np.asarray(verts, dtype=np.float64) + np.asarray(origin, dtype=np.float64), faces)


def orient_outward(mesh: Mesh, sdf_fn: SdfFunction, eps: float) -> Mesh:
    """
    Garante normais apontando para SDF crescente.

    Sonda a SDF em ±eps ao longo da normal de algumas faces e inverte a
    malha inteira se a maioria estiver invertida.
    """
    if mesh.is_empty:
        return mesh
    normals = mesh.face_normals()
    lengths = np.linalg.norm(normals, axis=1)
    good = np.flatnonzero(lengths > 0)
    if len(good) == 0:
        return mesh
    pick = good[np.linspace(0, len(good) - 1, min(ORIENTATION_PROBES, len(good))).astype(np.int64)]
    unit = normals[pick] / lengths[pick, None]
    centers = mesh.centroids()[pick]
    outside = np.asarray(sdf_fn(centers + eps * unit), dtype=np.float64)
    inside = np.asarray(sdf_fn(centers - eps * unit), dtype=np.float64)
    votes = np.sign(outside - inside)
    if votes.sum() < 0:
        logger.debug(f"Orientação invertida em {int((votes < 0).sum())}/{len(pick)} faces sondadas")
        return mesh.flipped()
    return mesh


def dense_sdf_mesh(sdf_fn: SdfFunction, bounds_min: np.ndarray, bounds_max: np.ndarray,
                   resolution: float) -> Mesh:
    """Malha de uma SDF analítica amostrada densamente numa caixa do mundo."""
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    counts = np.maximum(np.ceil((hi - lo) / resolution).astype(np.int64) + 1, 2)
    axes = [lo[d] + resolution * np.arange(counts[d]) for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.concatenate([
        np.asarray(sdf_fn(grid[i:i + EVAL_CHUNK]), dtype=np.float64)
        for i in range(0, len(grid), EVAL_CHUNK)
    ]).reshape(*counts)
    mesh = marching_cubes_grid(values, lo, resolution)
    return orient_outward(mesh, sdf_fn, 0.25 * resolution)


# ---------------------------------------------------------------------------
# Posse das células em sobreposições
# ---------------------------------------------------------------------------

@dataclass
class OwnerMap:
    """
    Caixas dos submapas na rede global (índices relativos à âncora comum).

    A consulta devolve o submapa mais novo cuja caixa contém o voxel, o que
    torna a posse uma partição.
    """

    voxel_size: float
    anchor: np.ndarray
    ids: List[int] = field(default_factory=list)
    lows: List[np.ndarray] = field(default_factory=list)
    highs: List[np.ndarray] = field(default_factory=list)

    def add(self, submap: "Submap") -> None:
        """Registra um submapa; submapas adicionados depois têm prioridade."""
        if not np.array_equal(submap.anchor, self.anchor):
            raise ValueError(f"Submapa {submap.id} com âncora diferente da rede de posse")
        lo = np.asarray(submap.lattice_index, dtype=np.int64)
        self.ids.append(submap.id)
        self.lows.append(lo)
        self.highs.append(lo + submap.sparse_grid.dims)

    def owner_of(self, global_coords: np.ndarray) -> np.ndarray:
        """Id do dono de cada voxel global, -1 fora de todas as caixas."""
        c = np.asarray(global_coords, dtype=np.int64).reshape(-1, 3)
        owners = np.full(len(c), -1, dtype=np.int64)
        for sid, lo, hi in zip(self.ids, self.lows, self.highs):
            inside = np.all((c >= lo) & (c < hi), axis=1)
            owners[inside] = sid
        return owners

    def global_voxel(self, points_world: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points_world) - self.anchor) / self.voxel_size).astype(np.int64)

    def voxel_owners(self, submap: "Submap") -> np.ndarray:
        """Dono de cada voxel ativo de ``submap`` (mesma ordem de active_coords)."""
        coords = submap.sparse_grid.active_coords() + np.asarray(submap.lattice_index, dtype=np.int64)
        return self.owner_of(coords)


def assign_ownership(prev: "Submap", next_: "Submap") -> OwnerMap:
    """
    Mapa de posse para dois submapas alinhados: o mais novo vence.

    Raises:
        MisalignedLatticeError: Submapas fora da mesma rede
    """
    lattice_offset(prev, next_)
    owners = OwnerMap(voxel_size=prev.sparse_grid.voxel_size, anchor=np.asarray(prev.anchor, dtype=np.float64))
    owners.add(prev)
    owners.add(next_)
    return owners


def filter_owned(mesh: Mesh, owners: OwnerMap, submap_id: int) -> Mesh:
    """Remove triângulos cujas células pertencem a outro submapa."""
    if mesh.is_empty:
        return mesh
    keep = owners.owner_of(owners.global_voxel(mesh.centroids())) == submap_id
    if keep.all():
        return mesh
    logger.debug(f"Submapa {submap_id}: {int((~keep).sum())} triângulos cedidos a submapas mais novos")
    return mesh.subset(keep)


# ---------------------------------------------------------------------------
# Extração por submapa
# ---------------------------------------------------------------------------

def _field_sdf(submap: "Submap", field: "FeatureField") -> SdfFunction:
    b_min = np.asarray(submap.b_min, dtype=np.float64)
    extent = field.extent

    def sdf(points_world: np.ndarray) -> np.ndarray:
        local = np.clip(np.asarray(points_world, dtype=np.float64) - b_min, 0.0, extent)
        return np.concatenate([
            field.predict(local[i:i + EVAL_CHUNK]).astype(np.float64)
            for i in range(0, len(local), EVAL_CHUNK)
        ]) if len(local) else np.zeros(0)

    return sdf


@timed("extract_mesh")
def extract_mesh(submap: "Submap", field: Optional["FeatureField"] = None,
                 config: Optional["Config"] = None, sdf_fn: Optional[SdfFunction] = None,
                 owners: Optional[OwnerMap] = None, subdivision: Optional[int] = None) -> Mesh:
    """
    Malha da superfície de nível zero de um submapa.

    Args:
        submap: Submapa com grade esparsa ativada
        field: Campo treinado (padrão: o do próprio submapa)
        config: Usada para a subdivisão da grade de extração
        sdf_fn: SDF analítica no mundo usada no lugar do campo
        owners: Mapa de posse; células de outros submapas são puladas
        subdivision: Subdivisões inteiras do voxel (sobrepõe a config)

    Returns:
        Malha no mundo, vazia se a grade não tiver voxels ativos
    """
    grid = submap.sparse_grid
    if grid.n_active == 0:
        logger.warning(f"Submapa {submap.id}: grade sem voxels ativos, malha vazia")
        return Mesh.empty()
    if sdf_fn is None:
        field = field if field is not None else submap.feature_field
        if field is None:
            raise ValueError(f"Submapa {submap.id} sem campo para extrair a malha")
        sdf_fn = _field_sdf(submap, field)
    k = subdivision or (config.mesh_subdivision if config is not None else 1)
    s = grid.voxel_size
    h = s / k

    active = grid.active_coords()
    dilated = (active[:, None, :] + np.vstack([np.zeros((1, 3), np.int64), NEIGHBOR_OFFSETS])[None]).reshape(-1, 3)
    dilated = np.unique(dilated[grid.in_bounds(dilated)], axis=0)
    lo = dilated.min(axis=0)
    span = dilated.max(axis=0) + 1 - lo

    voxel_mask = np.zeros(span, dtype=bool)
    rel = dilated - lo
    voxel_mask[rel[:, 0], rel[:, 1], rel[:, 2]] = True
    cell_mask = voxel_mask
    for axis in range(3):
        cell_mask = np.repeat(cell_mask, k, axis=axis)

    shape = np.array(cell_mask.shape) + 1
    vertex_mask = np.zeros(shape, dtype=bool)
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                vertex_mask[ox:ox + cell_mask.shape[0], oy:oy + cell_mask.shape[1],
                            oz:oz + cell_mask.shape[2]] |= cell_mask

    origin = submap.vertex_world(lo)
    idx = np.argwhere(vertex_mask)
    values = np.ones(shape, dtype=np.float64)
    sdf_values = np.concatenate([
        np.asarray(sdf_fn(origin + idx[i:i + EVAL_CHUNK] * h), dtype=np.float64)
        for i in range(0, len(idx), EVAL_CHUNK)
    ])
    values[idx[:, 0], idx[:, 1], idx[:, 2]] = sdf_values

    # Célula válida se os 8 cantos foram avaliados; índice pelo canto mínimo
    mc_mask = np.zeros(shape, dtype=bool)
    inner = np.ones(shape - 1, dtype=bool)
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                inner &= vertex_mask[ox:ox + shape[0] - 1, oy:oy + shape[1] - 1, oz:oz + shape[2] - 1]
    mc_mask[:-1, :-1, :-1] = inner

    if owners is not None:
        cells = np.argwhere(mc_mask)
        global_voxel = np.asarray(submap.lattice_index, dtype=np.int64) + lo + cells // k
        foreign = owners.owner_of(global_voxel) != submap.id
        mc_mask[tuple(cells[foreign].T)] = False

    mesh = marching_cubes_grid(values, origin, h, mask=mc_mask)
    mesh = orient_outward(mesh, sdf_fn, 0.25 * h)
    logger.info(f"Submapa {submap.id}: malha com {mesh.n_vertices} vértices e {mesh.n_triangles} triângulos")
    return mesh


def merge_meshes(meshes: Sequence[Mesh], dedup_tol: Optional[float] = None) -> Mesh:
    """
    Concatena malhas deslocando os índices.

    Args:
        meshes: Malhas a unir
        dedup_tol: Se informado, funde vértices mais próximos que a tolerância
    """
    parts = [m for m in meshes if m.n_vertices]
    if not parts:
        return Mesh.empty()
    offsets = np.cumsum([0] + [m.n_vertices for m in parts[:-1]])
    vertices = np.concatenate([m.vertices for m in parts])
    triangles = np.concatenate([m.triangles + off for m, off in zip(parts, offsets)])
    if dedup_tol is None:
        return Mesh(vertices, triangles)

    keys = np.round(vertices / dedup_tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    merged = Mesh(vertices[first], inverse[triangles])
    logger.debug(f"Fusão: {len(vertices) - len(first)} vértices duplicados removidos")
    return merged
