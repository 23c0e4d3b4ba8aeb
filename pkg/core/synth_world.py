"""
Mundos sintéticos analíticos e simulador de LiDAR.

A cena é a união (mínimo) de SDFs exatas de caixas, esferas e planos.
Primitivas invertidas descrevem interiores (salas, corredores, cascas
esféricas). Primitivas dinâmicas se deslocam com velocidade constante.
O simulador faz sphere tracing vetorizado a partir da pose do sensor.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from core.mesher import Mesh, dense_sdf_mesh
from core.scan_io import Pose, Scan
from utils.performance import measure

logger = logging.getLogger("voxfield-synth")

HIT_EPS = 1e-5
MAX_TRACE_STEPS = 512
DEFAULT_FRAME_DT = 0.1

PrimitiveKind = Literal["box", "sphere", "plane"]


class SceneError(ValueError):
    """Cena inválida, texto de cena malformado ou sensor dentro da geometria."""


@dataclass
class Primitive:
    """
    Sólido analítico.

    Atributos:
        kind: box, sphere ou plane
        center: Centro (caixa/esfera) ou ponto do plano
        half_size: Meias dimensões da caixa
        radius: Raio da esfera
        normal: Normal do plano (lado positivo livre)
        inverted: Troca interior e exterior
        velocity: Velocidade (m/s) de primitivas dinâmicas
        dynamic: Se a primitiva é um ator em movimento
    """

    kind: PrimitiveKind
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_size: np.ndarray = field(default_factory=lambda: np.ones(3))
    radius: float = 1.0
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    inverted: bool = False
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dynamic: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_size = np.asarray(self.half_size, dtype=np.float64).reshape(3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        if self.kind not in ("box", "sphere", "plane"):
            raise SceneError(f"Primitiva desconhecida: {self.kind}")
        if self.kind == "box" and np.any(self.half_size <= 0):
            raise SceneError("Caixa com dimensão não positiva")
        if self.kind == "sphere" and self.radius <= 0:
            raise SceneError("Esfera com raio não positivo")
        if self.kind == "plane":
            norm = np.linalg.norm(self.normal)
            if norm == 0:
                raise SceneError("Plano com normal nula")
            self.normal = self.normal / norm
        if np.any(self.velocity != 0):
            self.dynamic = True

    def center_at(self, time: float) -> np.ndarray:
        return self.center + self.velocity * time

    def sdf(self, points: np.ndarray, time: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center_at(time)
        if self.kind == "sphere":
            d = np.linalg.norm(p, axis=1) - self.radius
        elif self.kind == "plane":
            d = p @ self.normal
        else:
            q = np.abs(p) - self.half_size
            d = np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
        return -d if self.inverted else d


@dataclass
class SceneSpec:
    """
    Cena sintética.

    Atributos:
        primitives: Sólidos estáticos e dinâmicos
        bounds: (mínimo, máximo) da caixa do mundo
        duration: Intervalo de tempo em que os atores devem ficar na caixa
    """

    primitives: List[Primitive]
    bounds: Tuple[np.ndarray, np.ndarray] = field(default_factory=lambda: (np.full(3, -10.0), np.full(3, 10.0)))
    duration: float = 0.0

    def __post_init__(self):
        self.bounds = (np.asarray(self.bounds[0], dtype=np.float64), np.asarray(self.bounds[1], dtype=np.float64))
        if not self.primitives:
            raise SceneError("Cena sem primitivas")
        if all(p.dynamic for p in self.primitives):
            raise SceneError("Cena precisa de ao menos uma primitiva estática")
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise SceneError("Limites da cena vazios")
        lo, hi = self.bounds
        for i, prim in enumerate(self.primitives):
            if not prim.dynamic:
                continue
            for t in (0.0, self.duration):
                c = prim.center_at(t)
                if np.any(c < lo) or np.any(c > hi):
                    raise SceneError(f"Ator {i} sai dos limites da cena em t={t}")

    @property
    def static_primitives(self) -> List[Primitive]:
        return [p for p in self.primitives if not p.dynamic]

    @property
    def has_dynamic(self) -> bool:
        return any(p.dynamic for p in self.primitives)


class LidarSpec(BaseModel):
    """Geometria do sensor: canais em elevação e passos em azimute."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: int = 32
    horizontal: int = 720
    fov_down: float = -15.0
    fov_up: float = 15.0
    max_range: float = 50.0
    noise_sigma: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "LidarSpec":
        if self.channels < 1 or self.horizontal < 1:
            raise ValueError("channels e horizontal devem ser positivos")
        if self.max_range <= 0:
            raise ValueError("max_range deve ser positivo")
        if self.fov_up < self.fov_down:
            raise ValueError("fov_up deve ser >= fov_down")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma deve ser >= 0")
        return self

    def directions(self) -> np.ndarray:
        """(channels·horizontal, 3) direções unitárias no referencial do sensor."""
        if self.channels == 1:
            elevation = np.array([np.radians(self.fov_down)])
        else:
            elevation = np.radians(np.linspace(self.fov_down, self.fov_up, self.channels))
        azimuth = 2.0 * np.pi * np.arange(self.horizontal) / self.horizontal
        el, az = np.meshgrid(elevation, azimuth, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class SimulatedScan:
    """Varredura simulada com o índice da primitiva atingida por cada ponto."""

    scan: Scan
    primitive_index: np.ndarray
    dynamic: np.ndarray
    time: float = 0.0


def primitive_sdfs(spec: SceneSpec, points: np.ndarray, time: float = 0.0,
                   include_dynamic: bool = True) -> np.ndarray:
    """(K, N) SDF de cada primitiva; dinâmicas ausentes ficam em +inf."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rows = []
    for prim in spec.primitives:
        if prim.dynamic and not include_dynamic:
            rows.append(np.full(len(p), np.inf))
        else:
            rows.append(prim.sdf(p, time))
    return np.stack(rows)


def scene_sdf(spec: SceneSpec, p: np.ndarray, time: float = 0.0,
              include_dynamic: bool = True) -> Union[float, np.ndarray]:
    """Mínimo das SDFs das primitivas (negativo dentro dos sólidos)."""
    single = np.asarray(p).ndim == 1
    d = primitive_sdfs(spec, p, time, include_dynamic).min(axis=0)
    return float(d[0]) if single else d


@measure("simulate_scan")
def simulate_scan(spec: SceneSpec, lidar: LidarSpec, pose: Pose, time: float = 0.0,
                  frame_index: int = 0, rng: Optional[np.random.Generator] = None) -> SimulatedScan:
    """
    Lança um raio por (canal, azimute) e guarda o primeiro impacto.

    Raios sem impacto dentro do alcance são descartados.

    Raises:
        SceneError: Sensor dentro da geometria ou nenhum raio atingiu a cena
    """
    origin = pose.translation
    if scene_sdf(spec, origin, time) <= 0:
        raise SceneError(f"Sensor dentro da geometria na posição {origin.tolist()} (t={time})")
    dirs_sensor = lidar.directions()
    dirs = dirs_sensor @ pose.rotation.T
    n = len(dirs)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    for _ in range(MAX_TRACE_STEPS):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        d = scene_sdf(spec, origin + t[idx, None] * dirs[idx], time)
        converged = d < HIT_EPS
        hit[idx[converged]] = True
        t[idx[~converged]] += d[~converged]
        escaped = t[idx] > lidar.max_range
        alive[idx[converged | escaped]] = False
    stalled = int(alive.sum())
    if stalled:
        logger.debug(f"{stalled} raios sem convergência descartados")
    hit &= t <= lidar.max_range
    if not hit.any():
        raise SceneError(f"Nenhum raio atingiu a cena no quadro {frame_index}")

    ranges = t[hit]
    world_hits = origin + ranges[:, None] * dirs[hit]
    labels = primitive_sdfs(spec, world_hits, time).argmin(axis=0)
    if lidar.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        ranges = ranges + rng.normal(0.0, lidar.noise_sigma, size=len(ranges))
    points = ranges[:, None] * dirs_sensor[hit]
    dynamic = np.array([spec.primitives[i].dynamic for i in labels], dtype=bool)
    logger.debug(f"Quadro {frame_index}: {len(points)}/{n} raios com impacto, {int(dynamic.sum())} no ator")
    return SimulatedScan(Scan(points=points, origin=np.zeros(3), frame_index=frame_index),
                         labels.astype(np.int64), dynamic, time)


def simulate_sequence(spec: SceneSpec, lidar: LidarSpec, poses: Sequence[Pose],
                      frame_dt: float = DEFAULT_FRAME_DT, seed: int = 0) -> List[SimulatedScan]:
    rng = np.random.default_rng(seed)
    return [simulate_scan(spec, lidar, pose, i * frame_dt, i, rng) for i, pose in enumerate(poses)]


def gt_mesh(spec: SceneSpec, resolution: float,
            bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Mesh:
    """Malha de referência das primitivas estáticas."""
    if resolution <= 0:
        raise SceneError("Resolução deve ser positiva")
    lo, hi = bounds if bounds is not None else spec.bounds
    return dense_sdf_mesh(lambda p: scene_sdf(spec, p, 0.0, include_dynamic=False), lo, hi, resolution)


# ---------------------------------------------------------------------------
# Formato texto da cena
# ---------------------------------------------------------------------------

def _vector(text: str, where: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as e:
        raise SceneError(f"{where}: vetor inválido {text!r}") from e
    if len(values) != 3:
        raise SceneError(f"{where}: esperado vetor com 3 componentes, recebido {text!r}")
    return np.array(values)


def parse_scene(text: str, source: str = "<cena>") -> SceneSpec:
    """
    Interpreta uma cena, uma primitiva por linha::

        bounds min=-10,-10,-1 max=10,10,5
        duration 12
        box center=0,0,2 size=20,10,4 inverted
        sphere center=3,0,1 radius=0.5
        plane point=0,0,0 normal=0,0,1
        box center=-6,1.5,1.55 size=1,1,2 velocity=1,0,0
    """
    primitives: List[Primitive] = []
    bounds = None
    duration = 0.0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{line_no}"
        head, *rest = line.split()
        if head == "duration":
            try:
                duration = float(rest[0])
            except (IndexError, ValueError) as e:
                raise SceneError(f"{where}: duração inválida") from e
            continue
        flags = {token for token in rest if "=" not in token}
        args: Dict[str, str] = dict(token.split("=", 1) for token in rest if "=" in token)
        unknown_flags = flags - {"inverted", "dynamic"}
        if unknown_flags:
            raise SceneError(f"{where}: opção desconhecida {sorted(unknown_flags)}")
        try:
            if head == "bounds":
                bounds = (_vector(args["min"], where), _vector(args["max"], where))
            elif head == "box":
                primitives.append(Primitive(
                    "box", center=_vector(args["center"], where), half_size=_vector(args["size"], where) / 2.0,
                    inverted="inverted" in flags, dynamic="dynamic" in flags,
                    velocity=_vector(args.get("velocity", "0,0,0"), where)))
            elif head == "sphere":
                primitives.append(Primitive(
                    "sphere", center=_vector(args["center"], where), radius=float(args["radius"]),
                    inverted="inverted" in flags, dynamic="dynamic" in flags,
                    velocity=_vector(args.get("velocity", "0,0,0"), where)))
            elif head == "plane":
                primitives.append(Primitive(
                    "plane", center=_vector(args["point"], where), normal=_vector(args["normal"], where),
                    inverted="inverted" in flags))
            else:
                raise SceneError(f"{where}: primitiva desconhecida '{head}'")
        except KeyError as e:
            raise SceneError(f"{where}: parâmetro ausente {e}") from e
        except ValueError as e:
            if isinstance(e, SceneError):
                raise
            raise SceneError(f"{where}: {e}") from e
    if bounds is None:
        raise SceneError(f"{source}: linha 'bounds' ausente")
    return SceneSpec(primitives, bounds, duration)


def load_scene(path: Union[str, Path]) -> SceneSpec:
    path = Path(path)
    if not path.is_file():
        raise SceneError(f"Arquivo de cena não encontrado: {path}")
    return parse_scene(path.read_text(encoding="utf-8"), str(path))


def _fmt(v: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in v)


def format_scene(spec: SceneSpec) -> str:
    lines = [f"bounds min={_fmt(spec.bounds[0])} max={_fmt(spec.bounds[1])}", f"duration {spec.duration!r}"]
    for prim in spec.primitives:
        flags = (" inverted" if prim.inverted else "") + (" dynamic" if prim.dynamic and not prim.velocity.any() else "")
        motion = f" velocity={_fmt(prim.velocity)}" if prim.velocity.any() else ""
        if prim.kind == "box":
            lines.append(f"box center={_fmt(prim.center)} size={_fmt(prim.half_size * 2.0)}{motion}{flags}")
        elif prim.kind == "sphere":
            lines.append(f"sphere center={_fmt(prim.center)} radius={prim.radius!r}{motion}{flags}")
        else:
            lines.append(f"plane point={_fmt(prim.center)} normal={_fmt(prim.normal)}{flags}")
    return "\n".join(lines) + "\n"


def write_scene(spec: SceneSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(format_scene(spec), encoding="utf-8")


# ---------------------------------------------------------------------------
# Cenários e trajetórias
# ---------------------------------------------------------------------------

def corridor_scene(length: float = 40.0, width: float = 6.0, height: float = 3.0,
                   n_pillars: int = 6) -> SceneSpec:
    """Corredor fechado ao longo de x com pilares alternados nas paredes."""
    prims = [Primitive("box", center=[0.0, 0.0, height / 2.0],
                       half_size=[length / 2.0, width / 2.0, height / 2.0], inverted=True)]
    xs = np.linspace(-length / 2.0 + 4.0, length / 2.0 - 4.0, n_pillars) if n_pillars else []
    for i, x in enumerate(xs):
        side = 1.0 if i % 2 == 0 else -1.0
        prims.append(Primitive("box", center=[x, side * (width / 2.0 - 0.4), height / 2.0],
                               half_size=[0.4, 0.4, height / 2.0]))
    margin = 1.0
    bounds = (np.array([-length / 2 - margin, -width / 2 - margin, -margin]),
              np.array([length / 2 + margin, width / 2 + margin, height + margin]))
    return SceneSpec(prims, bounds)


def moving_box_scene(speed: float = 1.0, duration: float = 12.0, clearance: float = 0.55) -> SceneSpec:
    """
    Sala 20 x 10 x 4 m com uma caixa de 1 x 1 x 2 m cruzando em x.

    O ator flutua ``clearance`` metros acima do piso.
    """
    room = Primitive("box", center=[0.0, 0.0, 2.0], half_size=[10.0, 5.0, 2.0], inverted=True)
    pillar = Primitive("box", center=[4.0, -3.5, 2.0], half_size=[0.5, 0.5, 2.0])
    start_x = -speed * duration / 2.0
    actor = Primitive("box", center=[start_x, 1.5, clearance + 1.0], half_size=[0.5, 0.5, 1.0],
                      velocity=[speed, 0.0, 0.0])
    bounds = (np.array([-11.0, -6.0, -1.0]), np.array([11.0, 6.0, 5.0]))
    return SceneSpec([room, pillar, actor], bounds, duration)


def loop_scene(half_side: float = 62.5, corridor_width: float = 15.0, height: float = 5.0) -> SceneSpec:
    """Corredor em anel quadrado ao redor de um bloco central."""
    outer = half_side + corridor_width / 2.0
    inner = half_side - corridor_width / 2.0
    prims = [
        Primitive("box", center=[0.0, 0.0, height / 2.0], half_size=[outer, outer, height / 2.0], inverted=True),
        Primitive("box", center=[0.0, 0.0, height / 2.0], half_size=[inner, inner, height]),
    ]
    bounds = (np.array([-outer - 1.0, -outer - 1.0, -1.0]), np.array([outer + 1.0, outer + 1.0, height + 1.0]))
    return SceneSpec(prims, bounds)


def yaw_pose(position: Sequence[float], yaw: float) -> Pose:
    c, s = np.cos(yaw), np.sin(yaw)
    return Pose(rotation=np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation=position)


def straight_trajectory(start: Sequence[float], end: Sequence[float], n_frames: int) -> List[Pose]:
    """Poses igualmente espaçadas de ``start`` a ``end``, olhando na direção do movimento."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    delta = end - start
    yaw = float(np.arctan2(delta[1], delta[0])) if np.any(delta[:2]) else 0.0
    return [yaw_pose(start + delta * (i / max(n_frames - 1, 1)), yaw) for i in range(n_frames)]


def loop_trajectory(half_side: float, n_frames: int, height: float = 1.5) -> List[Pose]:
    """Volta fechada sobre o quadrado de meio lado ``half_side``."""
    corners = np.array([[half_side, -half_side], [half_side, half_side],
                        [-half_side, half_side], [-half_side, -half_side], [half_side, -half_side]])
    perimeter = 8.0 * half_side
    poses = []
    for i in range(n_frames):
        dist = perimeter * i / n_frames
        edge = min(int(dist // (2.0 * half_side)), 3)
        frac = (dist - edge * 2.0 * half_side) / (2.0 * half_side)
        a, b = corners[edge], corners[edge + 1]
        xy = a + (b - a) * frac
        yaw = float(np.arctan2(*(b - a)[::-1]))
        poses.append(yaw_pose([xy[0], xy[1], height], yaw))
    return poses
