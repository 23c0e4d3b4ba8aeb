"""
Leitura e escrita de varreduras, poses e malhas.

Formatos suportados:
    - kitti_bin: quádruplas float32 little-endian (x, y, z, intensidade)
    - ply: ascii ou binário little-endian (elemento ``vertex`` com x, y, z)
    - pcd_ascii: cabeçalho PCD com ``DATA ascii``
    - poses: convenção KITTI, 12 números por linha (matriz 3x4 por linhas)
    - malhas: PLY binário little-endian, vértices float32 e faces int32
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import polar

from core.mesher import Mesh, MeshError

logger = logging.getLogger("voxfield-scan-io")

PathLike = Union[str, Path]

ORTHONORMAL_TOL = 1e-6
REORTHONORMALIZE_TOL = 1e-3

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class ScanParseError(ValueError):
    """Arquivo de varredura ou malha malformado."""


class EmptyScanError(ValueError):
    """Varredura sem pontos."""


class PoseError(ValueError):
    """Arquivo de poses malformado ou rotação inválida."""


class ScanFormat(str, Enum):
    KITTI_BIN = "kitti_bin"
    PLY = "ply"
    PCD_ASCII = "pcd_ascii"


_EXTENSIONS = {".bin": ScanFormat.KITTI_BIN, ".ply": ScanFormat.PLY, ".pcd": ScanFormat.PCD_ASCII}


@dataclass
class Scan:
    """Uma varredura LiDAR no referencial do sensor."""

    points: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if not np.isfinite(self.points).all():
            raise ValueError(f"Quadro {self.frame_index}: coordenadas não finitas")
        if not np.isfinite(self.origin).all():
            raise ValueError(f"Quadro {self.frame_index}: origem não finita")

    def __len__(self) -> int:
        return len(self.points)


def orthonormality_error(rotation: np.ndarray) -> Tuple[float, float]:
    """Desvio máximo de R·Rᵀ em relação a I e desvio do determinante em relação a 1."""
    deviation = float(np.max(np.abs(rotation @ rotation.T - np.eye(3))))
    return deviation, float(abs(np.linalg.det(rotation) - 1.0))


@dataclass
class Pose:
    """Transformação rígida sensor → mundo."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise PoseError("Pose com valores não finitos")
        deviation, det_error = orthonormality_error(self.rotation)
        if deviation > ORTHONORMAL_TOL or det_error > ORTHONORMAL_TOL:
            raise PoseError(
                f"Rotação não ortonormal (|RRᵀ-I|={deviation:.2e}, |det-1|={det_error:.2e})"
            )

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        """Cria a pose a partir de uma matriz 3x4 ou 4x4."""
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(rotation=matrix[:3, :3], translation=matrix[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        """Matriz 3x4 [R | t]."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """R·p + t para cada ponto."""
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        """Rᵀ·(p - t): do mundo para o referencial do sensor."""
        return (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.translation) @ self.rotation


def infer_format(path: PathLike) -> ScanFormat:
    suffix = Path(path).suffix.lower()
    if suffix not in _EXTENSIONS:
        raise ScanParseError(f"Extensão de varredura não reconhecida: {path}")
    return _EXTENSIONS[suffix]


def load_scan(
    path: PathLike,
    fmt: Optional[Union[ScanFormat, str]] = None,
    frame_index: int = 0
) -> Scan:
    """
    Lê uma varredura do disco.

    Args:
        path: Caminho do arquivo
        fmt: Formato; inferido pela extensão se None
        frame_index: Índice do quadro atribuído à varredura

    Returns:
        Scan com todos os pontos finitos

    Raises:
        ScanParseError: Arquivo malformado (a mensagem indica byte ou linha)
        EmptyScanError: Arquivo sem pontos
    """
    path = Path(path)
    fmt = ScanFormat(fmt) if fmt is not None else infer_format(path)

    if fmt is ScanFormat.KITTI_BIN:
        points = _read_kitti_bin(path)
    elif fmt is ScanFormat.PLY:
        elements, _ = _read_ply(path)
        points = _vertex_xyz(elements, path)
    else:
        points = _read_pcd_ascii(path)

    if len(points) == 0:
        raise EmptyScanError(f"{path}: varredura sem pontos")
    logger.debug(f"Varredura {path.name} carregada: {len(points)} pontos")
    return Scan(points=points, frame_index=frame_index)


def _read_kitti_bin(path: Path) -> np.ndarray:
    data = path.read_bytes()
    remainder = len(data) % 16
    if remainder:
        raise ScanParseError(
            f"{path}: tamanho {len(data)} não é múltiplo de 16; registro incompleto no byte {len(data) - remainder}"
        )
    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    xyz = records[:, :3].astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
    if len(bad):
        raise ScanParseError(f"{path}: valor não finito no registro {bad[0]} (byte {bad[0] * 16})")
    return xyz


def _read_pcd_ascii(path: Path) -> np.ndarray:
    lines = path.read_text(encoding="ascii", errors="replace").splitlines()
    fields: List[str] = []
    data_start = None
    for line_no, raw in enumerate(lines, start=1):
        tokens = raw.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        key = tokens[0].upper()
        if key == "FIELDS":
            fields = [t.lower() for t in tokens[1:]]
        elif key == "DATA":
            if len(tokens) < 2 or tokens[1].lower() != "ascii":
                raise ScanParseError(f"{path}:{line_no}: apenas 'DATA ascii' é suportado")
            data_start = line_no
            break
    if data_start is None:
        raise ScanParseError(f"{path}: cabeçalho PCD sem linha DATA")
    try:
        columns = [fields.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ScanParseError(f"{path}: FIELDS precisa conter x, y e z")

    points = []
    for line_no in range(data_start + 1, len(lines) + 1):
        tokens = lines[line_no - 1].split()
        if not tokens:
            continue
        if len(tokens) != len(fields):
            raise ScanParseError(
                f"{path}:{line_no}: esperados {len(fields)} valores, encontrados {len(tokens)}"
            )
        try:
            row = [float(tokens[c]) for c in columns]
        except ValueError:
            raise ScanParseError(f"{path}:{line_no}: valor numérico inválido")
        if not np.isfinite(row).all():
            raise ScanParseError(f"{path}:{line_no}: valor não finito")
        points.append(row)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

@dataclass
class _PlyElement:
    name: str
    count: int
    properties: List[Tuple[str, str, Optional[str]]]  # (nome, tipo, tipo do contador de lista)


def _parse_ply_header(data: bytes, path: Path) -> Tuple[str, List[_PlyElement], int]:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ScanParseError(f"{path}: cabeçalho PLY ausente ou sem end_header")
    body_start = data.index(b"\n", end) + 1
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: List[_PlyElement] = []
    for line_no, line in enumerate(header_lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            fmt = tokens[1] if len(tokens) > 1 else ""
            if fmt not in ("ascii", "binary_little_endian"):
                raise ScanParseError(f"{path}:{line_no}: formato PLY não suportado '{fmt}'")
        elif tokens[0] == "element":
            try:
                elements.append(_PlyElement(tokens[1], int(tokens[2]), []))
            except (IndexError, ValueError):
                raise ScanParseError(f"{path}:{line_no}: declaração de elemento inválida")
        elif tokens[0] == "property":
            if not elements:
                raise ScanParseError(f"{path}:{line_no}: propriedade antes de qualquer elemento")
            try:
                if tokens[1] == "list":
                    elements[-1].properties.append(
                        (tokens[4], _PLY_TYPES[tokens[3]], _PLY_TYPES[tokens[2]])
                    )
                else:
                    elements[-1].properties.append((tokens[2], _PLY_TYPES[tokens[1]], None))
            except (IndexError, KeyError):
                raise ScanParseError(f"{path}:{line_no}: propriedade inválida {line!r}")
        else:
            raise ScanParseError(f"{path}:{line_no}: linha de cabeçalho desconhecida {line!r}")
    if fmt is None:
        raise ScanParseError(f"{path}: linha 'format' ausente")
    return fmt, elements, body_start


def _read_ply(path: Path) -> Tuple[Dict[str, Dict[str, np.ndarray]], str]:
    """Retorna {elemento: {propriedade: array}} e o formato do arquivo."""
    data = path.read_bytes()
    fmt, elements, offset = _parse_ply_header(data, path)
    result: Dict[str, Dict[str, np.ndarray]] = {}

    if fmt == "ascii":
        lines = data[offset:].decode("ascii", errors="replace").splitlines()
        cursor = 0
        for element in elements:
            columns: Dict[str, list] = {name: [] for name, _, _ in element.properties}
            for _ in range(element.count):
                while cursor < len(lines) and not lines[cursor].strip():
                    cursor += 1
                if cursor >= len(lines):
                    raise ScanParseError(f"{path}: fim de arquivo no elemento '{element.name}'")
                tokens = lines[cursor].split()
                line_no = cursor + 1
                cursor += 1
                pos = 0
                try:
                    for name, dtype, count_type in element.properties:
                        if count_type is None:
                            columns[name].append(float(tokens[pos]))
                            pos += 1
                        else:
                            n = int(tokens[pos])
                            columns[name].append([int(t) for t in tokens[pos + 1:pos + 1 + n]])
                            pos += 1 + n
                except (IndexError, ValueError):
                    raise ScanParseError(f"{path}: linha {line_no} do corpo malformada")
            result[element.name] = {
                name: np.asarray(values, dtype=dtype if count_type is None else np.int64)
                for (name, dtype, count_type), values in zip(element.properties, columns.values())
            }
        return result, fmt

    for element in elements:
        if element.count == 0:
            result[element.name] = {
                name: np.zeros((0, 3) if count_type else 0, dtype=np.int64 if count_type else t)
                for name, t, count_type in element.properties
            }
            continue
        if all(count_type is None for _, _, count_type in element.properties):
            dtype = np.dtype([(name, "<" + t) for name, t, _ in element.properties])
            nbytes = dtype.itemsize * element.count
            if offset + nbytes > len(data):
                raise ScanParseError(f"{path}: elemento '{element.name}' truncado no byte {offset}")
            table = np.frombuffer(data, dtype=dtype, count=element.count, offset=offset)
            offset += nbytes
            result[element.name] = {name: table[name].copy() for name, _, _ in element.properties}
            continue

        # Listas: apenas elementos com uma única lista de tamanho uniforme
        if len(element.properties) != 1:
            raise ScanParseError(f"{path}: elemento '{element.name}' com listas mistas não suportado")
        name, item_type, count_type = element.properties[0]
        first = np.frombuffer(data, dtype="<" + count_type, count=1, offset=offset)[0]
        dtype = np.dtype([("n", "<" + count_type), ("v", "<" + item_type, (int(first),))])
        nbytes = dtype.itemsize * element.count
        if offset + nbytes > len(data):
            raise ScanParseError(f"{path}: elemento '{element.name}' truncado no byte {offset}")
        table = np.frombuffer(data, dtype=dtype, count=element.count, offset=offset)
        if np.any(table["n"] != first):
            raise ScanParseError(f"{path}: listas de tamanho variável em '{element.name}'")
        offset += nbytes
        result[element.name] = {name: table["v"].astype(np.int64)}
    return result, fmt


def _vertex_xyz(elements: Dict[str, Dict[str, np.ndarray]], path: Path) -> np.ndarray:
    vertex = elements.get("vertex")
    if vertex is None or not all(axis in vertex for axis in ("x", "y", "z")):
        raise ScanParseError(f"{path}: elemento 'vertex' com x, y, z ausente")
    xyz = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
    if len(bad):
        raise ScanParseError(f"{path}: vértice {bad[0]} não finito")
    return xyz


def load_mesh(path: PathLike) -> Mesh:
    """Lê uma malha PLY (ascii ou binária) com faces triangulares."""
    path = Path(path)
    elements, _ = _read_ply(path)
    vertices = _vertex_xyz(elements, path) if elements.get("vertex") else np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in elements:
        face_data = next(iter(elements["face"].values()))
        faces = np.asarray(face_data, dtype=np.int64).reshape(-1, 3) if len(face_data) else faces
    return Mesh(vertices=vertices, triangles=faces)


def write_mesh(mesh: Mesh, path: PathLike) -> None:
    """
    Grava a malha como PLY binário little-endian (float32 / int32).

    Raises:
        MeshError: Índice de face fora do intervalo
        OSError: Caminho não gravável
    """
    path = Path(path)
    n_vertices, n_faces = len(mesh.vertices), len(mesh.triangles)
    if n_faces and (mesh.triangles.min() < 0 or mesh.triangles.max() >= n_vertices):
        raise MeshError(
            f"Índice de face fora do intervalo [0, {n_vertices}): "
            f"min={mesh.triangles.min()}, max={mesh.triangles.max()}"
        )

    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    faces = np.empty(n_faces, dtype=[("n", "u1"), ("v", "<i4", (3,))])
    faces["n"] = 3
    faces["v"] = mesh.triangles
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f4").tobytes())
        f.write(faces.tobytes())
    logger.debug(f"Malha gravada em {path}: {n_vertices} vértices, {n_faces} faces")


def write_scan_ply(scan: Scan, path: PathLike) -> None:
    """Grava a varredura como PLY ascii em dupla precisão."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment frame {scan.frame_index}",
        f"element vertex {len(scan.points)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in scan.points)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_xyz(points: np.ndarray, path: PathLike) -> None:
    """Lista ascii de pontos, um por linha."""
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.6f")


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

def load_poses(path: PathLike) -> List[Pose]:
    """
    Lê poses no formato KITTI (12 números por linha, matriz 3x4 por linhas).

    Rotações com desvio de ortonormalidade até 1e-3 são re-ortonormalizadas
    por decomposição polar; acima disso a leitura falha.

    Raises:
        PoseError: Número de colunas errado, valor inválido ou rotação não ortonormal
    """
    path = Path(path)
    if not path.is_file():
        raise PoseError(f"Arquivo de poses não encontrado: {path}")
    poses = []
    for line_no, raw in enumerate(path.read_text(encoding="ascii").splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise PoseError(f"{path}:{line_no}: esperados 12 números, encontrados {len(tokens)}")
        try:
            matrix = np.array([float(t) for t in tokens], dtype=np.float64).reshape(3, 4)
        except ValueError:
            raise PoseError(f"{path}:{line_no}: valor numérico inválido")
        rotation = matrix[:, :3]
        deviation, det_error = orthonormality_error(rotation)
        if deviation > ORTHONORMAL_TOL or det_error > ORTHONORMAL_TOL:
            if deviation > REORTHONORMALIZE_TOL or det_error > REORTHONORMALIZE_TOL:
                raise PoseError(
                    f"{path}:{line_no}: rotação não ortonormal (desvio {deviation:.2e}, "
                    f"|det-1|={det_error:.2e})"
                )
            rotation, _ = polar(rotation)
            logger.debug(f"{path}:{line_no}: rotação re-ortonormalizada (desvio {deviation:.2e})")
        try:
            poses.append(Pose(rotation=rotation, translation=matrix[:, 3]))
        except PoseError as e:
            raise PoseError(f"{path}:{line_no}: {e}") from e
    return poses


def write_poses(poses: Sequence[Pose], path: PathLike) -> None:
    """Grava as poses no formato KITTI com precisão de ida e volta."""
    lines = [" ".join(f"{v:.17g}" for v in pose.matrix.ravel()) for pose in poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")
