"""
Gerenciamento de submapas alinhados à rede de voxels.

Todos os submapas de uma execução compartilham uma âncora (o canto mínimo do
primeiro submapa) e guardam o índice inteiro do próprio canto nessa rede, de
modo que vértices de voxels em sobreposição têm exatamente as mesmas
coordenadas de mundo nos dois submapas.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from core.neural_field import MLP, FeatureField
from core.scan_io import Pose, Scan
from core.sparse_grid import MisalignedLatticeError, SparseGrid
from utils.config import Config

logger = logging.getLogger("voxfield-submap")

LATTICE_TOL = 1e-6


class SubmapError(ValueError):
    """Extensão inválida ou conjunto de pontos vazio."""


@dataclass(frozen=True)
class EntryRate:
    """Fração dos pontos da varredura dentro do submapa atual."""

    r: float

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise SubmapError(f"Taxa de entrada fora de [0, 1]: {self.r}")

    def __float__(self) -> float:
        return self.r


@dataclass
class Submap:
    """
    Região limitada com grade esparsa explícita e campo implícito próprios.

    Atributos:
        id: Identificador sequencial
        center: Centro alinhado (mundo, m)
        b_min: Canto mínimo = âncora + lattice_index·s_v
        extent: Dimensões da caixa (m)
        anchor: Canto mínimo do primeiro submapa da cadeia
        lattice_index: Canto mínimo em voxels relativos à âncora
        sparse_grid: Voxels ativos e livres
        feature_field: Tabelas de hash (None depois de liberado)
        keyscans: Quadros retidos para o replay
    """

    id: int
    center: np.ndarray
    b_min: np.ndarray
    extent: np.ndarray
    anchor: np.ndarray
    lattice_index: np.ndarray
    sparse_grid: SparseGrid
    feature_field: Optional[FeatureField] = None
    keyscans: List[Tuple[int, Pose]] = field(default_factory=list)
    created_frame: int = 0
    frozen: bool = False

    @property
    def voxel_size(self) -> float:
        return self.sparse_grid.voxel_size

    @property
    def b_max(self) -> np.ndarray:
        return self.b_min + self.extent

    def contains(self, points_world: np.ndarray) -> np.ndarray:
        """Máscara dos pontos em [b_min, b_min + l) por componente."""
        p = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.b_min) & (p < self.b_max), axis=1)

    def vertex_world(self, ijk: np.ndarray) -> np.ndarray:
        """Posição no mundo de vértices locais, exata entre submapas da cadeia."""
        ijk = np.asarray(ijk, dtype=np.int64)
        return self.anchor + (self.lattice_index + ijk) * self.voxel_size

    def box(self) -> Tuple[List[float], List[float]]:
        return self.b_min.tolist(), self.b_max.tolist()


def transform_to_world(scan: Scan, pose: Pose) -> np.ndarray:
    """Pontos da varredura no mundo: R·p + t."""
    return pose.apply(scan.points)


def to_local(points_world: np.ndarray, b_min: np.ndarray) -> np.ndarray:
    """Coordenadas locais do submapa; pontos fora da caixa não são filtrados."""
    return np.asarray(points_world, dtype=np.float64) - np.asarray(b_min, dtype=np.float64)


def entry_rate(points_world: np.ndarray, submap: Submap) -> EntryRate:
    """
    Raises:
        SubmapError: Lista de pontos vazia
    """
    p = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise SubmapError("Taxa de entrada indefinida para varredura vazia")
    return EntryRate(float(submap.contains(p).sum()) / len(p))


def should_create(r: EntryRate, r_min: float) -> bool:
    return float(r) < r_min


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def align_center(c_prev: np.ndarray, c_raw: np.ndarray, voxel_size: float) -> np.ndarray:
    """Centro mais próximo de c_raw cuja diferença para c_prev é múltipla de s_v."""
    if voxel_size <= 0:
        raise SubmapError("voxel_size deve ser positivo")
    c_prev = np.asarray(c_prev, dtype=np.float64)
    steps = round_half_away((np.asarray(c_raw, dtype=np.float64) - c_prev) / voxel_size)
    return c_prev + steps * voxel_size


def raw_center(points_world: np.ndarray) -> np.ndarray:
    """Centróide dos pontos da varredura no mundo."""
    p = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise SubmapError("Centro indefinido para varredura vazia")
    return p.mean(axis=0)


def _check_extent(extent: np.ndarray, voxel_size: float) -> np.ndarray:
    l = np.asarray(extent, dtype=np.float64).reshape(3)
    if np.any(l <= 0):
        raise SubmapError(f"Extensão do submapa deve ser positiva: {l.tolist()}")
    ratio = l / voxel_size
    if np.any(np.abs(ratio - np.round(ratio)) > LATTICE_TOL * np.maximum(1.0, ratio)):
        raise SubmapError(f"Extensão {l.tolist()} não é múltipla de s_v={voxel_size}")
    return l


def create_submap(c_aligned: np.ndarray, extent: np.ndarray, config: Config, *,
                  submap_id: int = 0, anchor: Optional[np.ndarray] = None,
                  mlp: Optional[MLP] = None, rng: Optional[np.random.Generator] = None,
                  with_field: bool = True, frame_index: int = 0) -> Submap:
    """
    Cria um submapa vazio centrado em ``c_aligned``.

    Sem âncora, o submapa inicia uma cadeia nova (âncora = seu b_min).

    Raises:
        SubmapError: Extensão não positiva ou não múltipla de s_v
        MisalignedLatticeError: Centro fora da rede da âncora
    """
    s = config.voxel_size
    l = _check_extent(extent, s)
    center = np.asarray(c_aligned, dtype=np.float64).reshape(3)
    b_raw = center - l / 2.0
    if anchor is None:
        anchor = b_raw
        lattice = np.zeros(3, dtype=np.int64)
    else:
        anchor = np.asarray(anchor, dtype=np.float64)
        steps = (b_raw - anchor) / s
        lattice = np.round(steps).astype(np.int64)
        if np.max(np.abs(steps - lattice)) > LATTICE_TOL:
            raise MisalignedLatticeError(f"Centro {center.tolist()} fora da rede da âncora")
    b_min = anchor + lattice * s

    grid = SparseGrid.for_extent(l, s)
    feature_field = FeatureField.from_config(l, config, mlp=mlp, rng=rng) if with_field else None
    logger.info(
        f"Submapa {submap_id} criado no quadro {frame_index}: centro={np.round(center, 3).tolist()}, "
        f"b_min={np.round(b_min, 3).tolist()}, voxels={grid.dims.tolist()}"
    )
    return Submap(
        id=submap_id, center=center, b_min=b_min, extent=l, anchor=anchor,
        lattice_index=lattice, sparse_grid=grid, feature_field=feature_field,
        created_frame=frame_index
    )


@dataclass
class SubmapTransition:
    """Resultado de ``SubmapManager.update`` para um quadro."""

    current: Submap
    created: bool
    previous: Optional[Submap] = None
    entry_rate: Optional[EntryRate] = None


class SubmapManager:
    """
    Mantém o submapa atual e o anterior (no máximo dois campos vivos).

    Atributos:
        config: Configuração da execução
        mlp: MLP compartilhada por todos os submapas
        submaps: Todos os submapas criados, em ordem
        monolithic_box: (b_min, extent) fixos; desativa a criação de submapas
    """

    def __init__(self, config: Config, mlp: MLP, rng: np.random.Generator,
                 monolithic_box: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        self.config = config
        self.mlp = mlp
        self.rng = rng
        self.monolithic_box = monolithic_box
        self.submaps: List[Submap] = []
        self.current: Optional[Submap] = None
        self.previous: Optional[Submap] = None

    def _center_of(self, points_world: np.ndarray, sensor_world: np.ndarray) -> np.ndarray:
        if self.config.center_mode == "sensor":
            return np.asarray(sensor_world, dtype=np.float64)
        return raw_center(points_world)

    def _new(self, center: np.ndarray, extent: np.ndarray, frame_index: int,
             anchor: Optional[np.ndarray]) -> Submap:
        submap = create_submap(
            center, extent, self.config, submap_id=len(self.submaps), anchor=anchor,
            mlp=self.mlp, rng=self.rng, frame_index=frame_index
        )
        self.submaps.append(submap)
        return submap

    def update(self, points_world: np.ndarray, sensor_world: np.ndarray, frame_index: int) -> SubmapTransition:
        """
        Decide se o quadro inicia um submapa novo.

        O submapa anterior a ``previous`` tem o campo liberado, de modo que
        nunca há mais de dois campos vivos.
        """
        if self.current is None:
            if self.monolithic_box is not None:
                b_min, extent = self.monolithic_box
                center = np.asarray(b_min, dtype=np.float64) + np.asarray(extent, dtype=np.float64) / 2.0
                self.current = self._new(center, extent, frame_index, anchor=None)
            else:
                center = self._center_of(points_world, sensor_world)
                self.current = self._new(center, self.config.submap_extent, frame_index, anchor=None)
            return SubmapTransition(self.current, created=True)

        rate = entry_rate(points_world, self.current)
        if self.monolithic_box is not None or not should_create(rate, self.config.entry_threshold):
            return SubmapTransition(self.current, created=False, entry_rate=rate)

        c_raw = self._center_of(points_world, sensor_world)
        c_aligned = align_center(self.current.center, c_raw, self.config.voxel_size)
        logger.info(f"Quadro {frame_index}: taxa de entrada {rate.r:.3f} < {self.config.entry_threshold}, novo submapa")
        if self.previous is not None:
            self.release(self.previous)
        self.previous = self.current
        self.current = self._new(c_aligned, self.config.submap_extent, frame_index, anchor=self.current.anchor)
        return SubmapTransition(self.current, created=True, previous=self.previous, entry_rate=rate)

    def release(self, submap: Submap) -> None:
        """Descarta o campo e as key-scans de um submapa aposentado."""
        submap.feature_field = None
        submap.keyscans.clear()
        submap.frozen = True
        logger.debug(f"Submapa {submap.id} liberado")
