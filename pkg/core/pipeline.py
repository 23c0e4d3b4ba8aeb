"""
Orquestração do mapeamento incremental.

Ordem por quadro: transformação para o mundo → atualização de submapas
(aposentadoria do anterior com replay e malha) → sobreposição e
alinhamento (só na criação) → remoção dinâmica → ativação → escavação do
espaço livre → amostragem → treino do quadro → key-scan.

Pontos fora da caixa do submapa atual ficam fora do quadro.

As funções ``cmd_*`` são o corpo dos subcomandos de ``main.py``.
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from core.dynamic_removal import PointLabel, carve_free_space, classify_points, dump_labels
from core.evaluator import DEFAULT_THRESHOLD_CM, MetricReport, evaluate_meshes
from core.mesher import Mesh, OwnerMap, extract_mesh, filter_owned, merge_meshes
from core.neural_field import MLP
from core.sampler import build_batch, dense_sample_count
from core.scan_io import Pose, Scan, infer_format, load_mesh, load_poses, load_scan, write_mesh, write_poses, write_scan_ply
from core.sparse_grid import activate, overlap_voxels
from core.submap_manager import Submap, SubmapManager, to_local, transform_to_world
from core.synth_world import LidarSpec, gt_mesh, load_scene, simulate_sequence, write_scene
from core.trainer import (AdamOptimizer, LossReport, maybe_add_keyscan, replay_submap,
                          train_frame, train_overlap, write_loss_csv)
from utils.cache import KeyScanCache
from utils.config import Config, write_config
from utils.performance import measure, performance_monitor

logger = logging.getLogger("voxfield-pipeline")

PathLike = Union[str, Path]

SCAN_SUFFIXES = (".bin", ".ply", ".pcd")
KEYSCAN_CACHE_SIZE = 100_000

STAGE_ORDER = (
    "transform", "submap_update", "overlap_alignment", "dynamic_removal", "activation", "carve",
    "sampling", "train_frame", "keyscan"
)

BENCH_COLUMNS = [
    "frame", "submap_id", "wall_ms", "traversal_visits", "structure_visits", "visited_voxels",
    "active_voxels", "free_voxels", "n_samples", "dense_samples"
]


class PipelineError(RuntimeError):
    """Falha do mapeamento com o contexto do quadro."""


@dataclass
class FrameRecord:
    frame: int
    submap_id: int
    n_points: int
    n_static: int
    n_dynamic: int
    n_samples: int
    created_submap: bool
    stages: List[str]
    wall_ms: float = 0.0
    traversal_visits: int = 0
    structure_visits: int = 0
    active_voxels: int = 0
    free_voxels: int = 0
    dense_samples: int = 0

    @property
    def visited_voxels(self) -> int:
        return self.traversal_visits + self.structure_visits


@dataclass
class RunManifest:
    """
    Registro reprodutível de uma execução.

    Reexecutar com a configuração e a semente gravadas reproduz as malhas
    (bit a bit em precisão dupla).
    """

    config: Dict[str, Any]
    inputs: Dict[str, str]
    stage_order: List[str] = field(default_factory=lambda: list(STAGE_ORDER))
    frames: List[Dict[str, Any]] = field(default_factory=list)
    submaps: List[Dict[str, Any]] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    mode: str = "submap"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, ensure_ascii=False)

    def write(self, path: PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Entradas
# ---------------------------------------------------------------------------

def list_scans(scans_dir: PathLike) -> List[Path]:
    """Arquivos de varredura do diretório em ordem lexicográfica."""
    scans_dir = Path(scans_dir)
    if not scans_dir.is_dir():
        raise PipelineError(f"Diretório de varreduras não encontrado: {scans_dir}")
    files = sorted(p for p in scans_dir.iterdir() if p.suffix.lower() in SCAN_SUFFIXES)
    if not files:
        raise PipelineError(f"Nenhuma varredura (.bin/.ply/.pcd) em {scans_dir}")
    return files


def validate_inputs(scans_dir: PathLike, poses_path: PathLike) -> Tuple[List[Path], List[Pose]]:
    """
    Confere as entradas antes de qualquer arquivo de saída ser criado.

    Raises:
        PipelineError: Diretório vazio, poses ausentes ou em número insuficiente
    """
    files = list_scans(scans_dir)
    for path in files:
        infer_format(path)
    if not Path(poses_path).is_file():
        raise PipelineError(f"Arquivo de poses não encontrado: {poses_path}")
    try:
        poses = load_poses(poses_path)
    except ValueError as e:
        raise PipelineError(str(e)) from e
    if len(poses) < len(files):
        raise PipelineError(f"{len(files)} varreduras mas apenas {len(poses)} poses em {poses_path}")
    return files, poses[:len(files)]


def monolithic_box(scans: Sequence[Scan], poses: Sequence[Pose], config: Config) -> Tuple[np.ndarray, np.ndarray]:
    """Caixa fixa, alinhada a s_v, que cobre todos os pontos da sequência."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for scan, pose in zip(scans, poses):
        world = np.vstack([transform_to_world(scan, pose), pose.apply(scan.origin)])
        lo = np.minimum(lo, world.min(axis=0))
        hi = np.maximum(hi, world.max(axis=0))
    s = config.voxel_size
    margin = config.truncation + s
    b_min = np.floor((lo - margin) / s) * s
    n = np.ceil((hi + margin - b_min) / s).astype(np.int64)
    return b_min, n * s


# ---------------------------------------------------------------------------
# Mapeamento
# ---------------------------------------------------------------------------

class MappingPipeline:
    """
    Processa quadros em sequência e mantém submapas, otimizador e malhas.

    Atributos:
        config: Configuração efetiva (já com os overrides da linha de comando)
        manager: Submapas atual e anterior
        optimizer: Adam com estado por submapa e MLP compartilhada
        meshes: Malha de cada submapa aposentado, por id
        losses: Todas as perdas registradas
        records: Um FrameRecord por quadro processado
        frame_labels: (máscara dentro da caixa, rótulos) por quadro, se ``keep_labels``
    """

    def __init__(self, config: Config, monolithic: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                 keep_labels: bool = False):
        self.config = config
        self.rng = np.random.default_rng(config.rng_seed)
        self.mlp = MLP(
            config.hash_levels * config.features_per_level, config.mlp_hidden, config.mlp_layers,
            rng=self.rng, dtype=config.dtype
        )
        self.manager = SubmapManager(config, self.mlp, self.rng, monolithic_box=monolithic)
        self.optimizer = AdamOptimizer.from_config(config)
        self.keyscans = KeyScanCache(max_size=KEYSCAN_CACHE_SIZE)
        self.meshes: Dict[int, Mesh] = {}
        self.losses: List[LossReport] = []
        self.records: List[FrameRecord] = []
        self.keep_labels = keep_labels
        self.frame_labels: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def submaps(self) -> List[Submap]:
        return self.manager.submaps

    def _keyscan_inputs(self, submap: Submap) -> List[Tuple[np.ndarray, np.ndarray]]:
        scans = []
        for frame_index, _ in submap.keyscans:
            entry = self.keyscans.get_scan(submap.id, frame_index)
            if entry is None:
                logger.warning(f"Key-scan {frame_index} do submapa {submap.id} fora do cache")
                continue
            points_world, sensor_world = entry
            scans.append((to_local(points_world, submap.b_min), to_local(sensor_world, submap.b_min)))
        return scans

    def _align_overlap(self, previous: Submap, submap: Submap, points_local: np.ndarray,
                       origin_local: np.ndarray, frame_index: int) -> None:
        """
        Transfere os voxels da sobreposição e, se habilitado, roda o alinhamento.

        A transferência acontece sempre, para que a posse final (o mais novo
        vence) não deixe buracos na faixa sobreposta. O lote do alinhamento usa
        os pontos do quadro que caem nos voxels transferidos.
        """
        config = self.config
        overlap = overlap_voxels(previous, submap)
        if config.overlap_alignment and previous.feature_field is not None:
            batch = build_batch(points_local, origin_local, submap.sparse_grid, config, self.rng)
            if batch.is_empty:
                logger.warning(f"Quadro {frame_index}: alinhamento sem amostras, ignorado")
            else:
                self.losses.extend(train_overlap(previous, submap, batch, self.optimizer, config,
                                                 overlap, frame=frame_index))
        self.optimizer.drop(previous.id)

    def retire(self, submap: Submap) -> Mesh:
        """Replay das key-scans e extração da malha de um submapa que sai de cena."""
        if self.config.keyscan_replay and submap.keyscans:
            self.losses.extend(replay_submap(submap, self._keyscan_inputs(submap), self.optimizer,
                                             self.config, self.rng))
        self.keyscans.release_submap(submap.id)
        mesh = extract_mesh(submap, config=self.config)
        self.meshes[submap.id] = mesh
        return mesh

    @measure("process_frame")
    def process_frame(self, scan: Scan, pose: Pose, frame_index: int) -> FrameRecord:
        """
        Integra um quadro ao mapa.

        Raises:
            PipelineError: Qualquer falha de módulo, com o índice do quadro
        """
        try:
            return self._process(scan, pose, frame_index)
        except PipelineError:
            raise
        except (ValueError, ArithmeticError) as e:
            raise PipelineError(f"Quadro {frame_index}: {e}") from e

    def _process(self, scan: Scan, pose: Pose, frame_index: int) -> FrameRecord:
        config = self.config
        start = time.perf_counter()
        visits_before = performance_monitor.get_counter("traversal_visits")
        stages = ["transform"]
        points_world = transform_to_world(scan, pose)
        sensor_world = pose.apply(scan.origin)[0]

        stages.append("submap_update")
        transition = self.manager.update(points_world, sensor_world, frame_index)
        submap = transition.current
        previous = transition.previous if transition.created else None
        if previous is not None:
            self.retire(previous)

        grid = submap.sparse_grid
        inside = submap.contains(points_world)
        points_world = points_world[inside]
        points_local = to_local(points_world, submap.b_min)
        origin_local = to_local(sensor_world, submap.b_min)
        if not inside.all():
            logger.debug(f"Quadro {frame_index}: {int((~inside).sum())} pontos fora da caixa do submapa {submap.id}")

        if previous is not None:
            stages.append("overlap_alignment")
            self._align_overlap(previous, submap, points_local, origin_local, frame_index)

        labels = np.full(len(points_local), PointLabel.STATIC, dtype=np.int8)
        if config.dynamic_removal:
            stages.append("dynamic_removal")
            labels = classify_points(grid, points_local, config.min_free_hits,
                                     config.seed_min_known_neighbors, config.grow_stable_hits)
        static_mask = labels == PointLabel.STATIC
        static_local = points_local[static_mask]
        if self.keep_labels:
            self.frame_labels[frame_index] = (inside, labels)

        stages.append("activation")
        activate(grid, static_local, config.truncation, frame_index)
        if config.dynamic_removal:
            stages.append("carve")
            carve_free_space(grid, origin_local, points_local, config.truncation, frame_index)
            grid.resolve()
        structure_visits = grid.n_active + grid.n_free
        performance_monitor.increment("structure_visits", structure_visits)

        stages.append("sampling")
        batch = build_batch(static_local, origin_local, grid, config, self.rng)

        if batch.is_empty:
            logger.warning(f"Quadro {frame_index}: lote vazio, treino ignorado")
        else:
            stages.append("train_frame")
            self.losses.extend(train_frame(submap, batch, self.optimizer, config, frame=frame_index))

        if config.keyscan_replay and maybe_add_keyscan(submap, frame_index, pose, config.keyscan_distance):
            stages.append("keyscan")
            self.keyscans.put_scan(submap.id, frame_index, points_world[static_mask], sensor_world)

        record = FrameRecord(
            frame=frame_index, submap_id=submap.id, n_points=len(points_local),
            n_static=int(static_mask.sum()), n_dynamic=int((~static_mask).sum()), n_samples=len(batch),
            created_submap=transition.created, stages=stages,
            wall_ms=(time.perf_counter() - start) * 1000.0,
            traversal_visits=performance_monitor.get_counter("traversal_visits") - visits_before,
            structure_visits=structure_visits, active_voxels=grid.n_active, free_voxels=grid.n_free,
            dense_samples=dense_sample_count(origin_local, points_local, config.voxel_size / config.samples_per_ray)
        )
        self.records.append(record)
        logger.debug(
            f"Quadro {frame_index}: submapa {submap.id}, {record.n_static} estáticos, "
            f"{record.n_dynamic} dinâmicos, {record.n_samples} amostras, {record.wall_ms:.1f} ms"
        )
        return record

    def finish(self) -> Mesh:
        """Aposenta o submapa atual e une as malhas com a posse final."""
        current = self.manager.current
        if current is not None and current.id not in self.meshes:
            try:
                self.retire(current)
            except (ValueError, ArithmeticError) as e:
                raise PipelineError(f"Finalização do submapa {current.id}: {e}") from e
        if not self.submaps:
            return Mesh.empty()
        owners = OwnerMap(voxel_size=self.config.voxel_size, anchor=np.asarray(self.submaps[0].anchor))
        for submap in self.submaps:
            owners.add(submap)
        parts = [filter_owned(self.meshes.get(s.id, Mesh.empty()), owners, s.id) for s in self.submaps]
        merged = merge_meshes(parts)
        logger.info(f"Malha global: {merged.n_vertices} vértices, {merged.n_triangles} triângulos, "
                    f"{len(self.submaps)} submapas")
        return merged


def _load_frame(path: Path, index: int) -> Scan:
    try:
        return load_scan(path, frame_index=index)
    except ValueError as e:
        raise PipelineError(f"Quadro {index} ({path.name}): {e}") from e


def run_mapping(files: Sequence[Path], poses: Sequence[Pose], config: Config, mode: str = "submap",
                quiet: bool = False) -> MappingPipeline:
    """Executa o mapeamento completo sobre a sequência."""
    if mode not in ("submap", "monolithic"):
        raise PipelineError(f"Modo desconhecido: {mode}")
    box = None
    if mode == "monolithic":
        box = monolithic_box([_load_frame(p, i) for i, p in enumerate(files)], poses, config)
        logger.info(f"Modo monolítico: caixa {np.round(box[0], 3).tolist()} + {np.round(box[1], 3).tolist()}")
    pipeline = MappingPipeline(config, monolithic=box)
    for i, (path, pose) in enumerate(tqdm(list(zip(files, poses)), desc="Mapeamento", unit="quadro",
                                          disable=quiet)):
        pipeline.process_frame(_load_frame(path, i), pose, i)
    return pipeline


def _manifest(config: Config, inputs: Dict[str, str], pipeline: MappingPipeline, mode: str) -> RunManifest:
    manifest = RunManifest(config=config.model_dump(mode="json"), inputs=inputs, mode=mode)
    for record in pipeline.records:
        entry = asdict(record)
        entry["visited_voxels"] = record.visited_voxels
        manifest.frames.append(entry)
    for submap in pipeline.submaps:
        b_min, b_max = submap.box()
        manifest.submaps.append({"id": submap.id, "b_min": b_min, "b_max": b_max,
                                 "created_frame": submap.created_frame})
    return manifest


def cmd_map(scans_dir: PathLike, poses_path: PathLike, config: Config, out_dir: PathLike,
            mode: str = "submap", quiet: bool = False) -> RunManifest:
    """
    Mapeia a sequência e grava malha global, perdas, configuração e manifesto.

    Raises:
        PipelineError: Entradas inválidas (antes de criar saídas) ou falha num quadro
    """
    files, poses = validate_inputs(scans_dir, poses_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Mapeamento de {len(files)} quadros ({mode}) → {out}")

    pipeline = run_mapping(files, poses, config, mode, quiet)
    mesh = pipeline.finish()

    outputs = {"mesh": str(out / "mesh.ply"), "losses": str(out / "losses.csv"),
               "config": str(out / "config.txt"), "manifest": str(out / "manifest.json")}
    write_mesh(mesh, outputs["mesh"])
    write_loss_csv(pipeline.losses, outputs["losses"])
    write_config(config, outputs["config"])
    manifest = _manifest(config, {"scans": str(scans_dir), "poses": str(poses_path)}, pipeline, mode)
    manifest.outputs = outputs
    manifest.write(outputs["manifest"])
    return manifest


def cmd_eval(pred_path: PathLike, gt_path: PathLike, threshold_cm: float = DEFAULT_THRESHOLD_CM,
             n_samples: int = 1_000_000, seed: int = 0, crop: bool = False,
             out_path: Optional[PathLike] = None) -> MetricReport:
    """Compara duas malhas PLY e imprime o relatório."""
    pred = load_mesh(pred_path)
    gt = load_mesh(gt_path)
    report = evaluate_meshes(pred, gt, threshold_cm, n_samples, np.random.default_rng(seed), crop)
    print(report.as_table())
    if out_path is not None:
        report.write_csv(out_path)
    return report


def cmd_simulate(scene_path: PathLike, trajectory_path: PathLike, out_dir: PathLike,
                 lidar: Optional[LidarSpec] = None, seed: int = 0, frame_dt: float = 0.1,
                 gt_resolution: float = 0.1) -> List[Path]:
    """
    Simula varreduras sobre a trajetória e grava scans, poses, rótulos e malha de referência.

    Returns:
        Caminhos das varreduras gravadas
    """
    spec = load_scene(scene_path)
    poses = load_poses(trajectory_path)
    if not poses:
        raise PipelineError(f"Trajetória vazia: {trajectory_path}")
    lidar = lidar or LidarSpec()
    sims = simulate_sequence(spec, lidar, poses, frame_dt, seed)

    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    if spec.has_dynamic:
        (out / "labels").mkdir(exist_ok=True)
    paths = []
    for i, sim in enumerate(sims):
        path = out / "scans" / f"{i:06d}.ply"
        write_scan_ply(sim.scan, path)
        paths.append(path)
        if spec.has_dynamic:
            dump_labels(sim.dynamic.astype(np.int8), out / "labels" / f"{i:06d}.txt")
    write_poses(poses, out / "poses.txt")
    write_scene(spec, out / "scene.txt")
    write_mesh(gt_mesh(spec, gt_resolution), out / "gt_mesh.ply")
    logger.info(f"{len(paths)} varreduras simuladas em {out}")
    return paths


def write_bench_csv(records: Sequence[FrameRecord], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for r in records:
            row = asdict(r)
            row["visited_voxels"] = r.visited_voxels
            writer.writerow({key: row[key] for key in BENCH_COLUMNS})


def cmd_bench(scans_dir: PathLike, poses_path: PathLike, config: Config, out_dir: PathLike,
              mode: str = "submap", quiet: bool = False) -> List[FrameRecord]:
    """Mapeia a sequência e grava o custo por quadro em ``bench_<modo>.csv``."""
    files, poses = validate_inputs(scans_dir, poses_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline = run_mapping(files, poses, config, mode, quiet)
    mesh = pipeline.finish()
    write_mesh(mesh, out / f"mesh_{mode}.ply")
    write_bench_csv(pipeline.records, out / f"bench_{mode}.csv")
    walls = np.array([r.wall_ms for r in pipeline.records])
    logger.info(f"Bench {mode}: {len(walls)} quadros, média {walls.mean():.1f} ms, p95 {np.percentile(walls, 95):.1f} ms")
    return pipeline.records
