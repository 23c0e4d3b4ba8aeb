"""
Métricas de reconstrução: acurácia, completude, Chamfer-L1 e F-score.

As distâncias de vizinho mais próximo usam cKDTree; a versão força bruta
fica disponível para validação.
"""

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from core.mesher import Mesh

logger = logging.getLogger("voxfield-eval")

DEFAULT_THRESHOLD_CM = 20.0
BRUTE_FORCE_CHUNK = 1024


class EmptyMeshError(ValueError):
    """Malha ou conjunto de pontos vazio na avaliação."""


@dataclass(frozen=True)
class MetricReport:
    """
    Métricas em centímetros e F-score em porcentagem.

    Atributos:
        acc_cm: Média das distâncias predição → referência
        comp_cm: Média das distâncias referência → predição
        chamfer_l1_cm: (acc + comp) / 2
        precision_pct, recall_pct: Frações dentro do limiar (%)
        f_score_pct: Média harmônica de precisão e revocação (%)
        threshold_cm: Limiar do F-score
    """

    acc_cm: float
    comp_cm: float
    chamfer_l1_cm: float
    precision_pct: float
    recall_pct: float
    f_score_pct: float
    threshold_cm: float
    n_pred: int = 0
    n_gt: int = 0

    def as_table(self) -> str:
        rows = [
            ("Acc. (cm)", f"{self.acc_cm:.3f}"),
            ("Comp. (cm)", f"{self.comp_cm:.3f}"),
            ("C-L1 (cm)", f"{self.chamfer_l1_cm:.3f}"),
            ("Precisão (%)", f"{self.precision_pct:.2f}"),
            ("Revocação (%)", f"{self.recall_pct:.2f}"),
            (f"F-score@{self.threshold_cm:g}cm (%)", f"{self.f_score_pct:.2f}"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:>10}" for name, value in rows)

    def write_csv(self, path: Union[str, Path]) -> None:
        data = asdict(self)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(data))
            writer.writeheader()
            writer.writerow(data)


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Distância de cada ponto de ``query`` ao mais próximo de ``reference``."""
    distances, _ = cKDTree(reference).query(query, k=1)
    return np.asarray(distances, dtype=np.float64)


def nearest_distances_brute(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """O(n·m) para conjuntos pequenos."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(query))
    for i in range(0, len(query), BRUTE_FORCE_CHUNK):
        diff = query[i:i + BRUTE_FORCE_CHUNK, None, :] - reference[None, :, :]
        out[i:i + BRUTE_FORCE_CHUNK] = np.sqrt(np.einsum("nmd,nmd->nm", diff, diff).min(axis=1))
    return out


def _as_points(points: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyMeshError(f"Conjunto de pontos '{name}' vazio")
    return p


def compute_metrics(pred_pts: np.ndarray, gt_pts: np.ndarray, threshold_cm: float = DEFAULT_THRESHOLD_CM,
                    brute_force: bool = False) -> MetricReport:
    """
    Compara dois conjuntos de pontos em metros.

    Raises:
        EmptyMeshError: Algum conjunto vazio
    """
    if threshold_cm <= 0:
        raise ValueError("threshold_cm deve ser positivo")
    pred = _as_points(pred_pts, "pred")
    gt = _as_points(gt_pts, "gt")
    nn = nearest_distances_brute if brute_force else nearest_distances
    d_pred = nn(pred, gt) * 100.0
    d_gt = nn(gt, pred) * 100.0
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    precision = float(np.mean(d_pred <= threshold_cm))
    recall = float(np.mean(d_gt <= threshold_cm))
    f_score = 2 * precision * recall / (precision + recall) * 100.0 if precision + recall > 0 else 0.0
    report = MetricReport(
        acc_cm=acc, comp_cm=comp, chamfer_l1_cm=(acc + comp) / 2.0,
        precision_pct=precision * 100.0, recall_pct=recall * 100.0, f_score_pct=f_score,
        threshold_cm=threshold_cm, n_pred=len(pred), n_gt=len(gt)
    )
    logger.info(f"Métricas: C-L1={report.chamfer_l1_cm:.3f} cm, F@{threshold_cm:g}cm={f_score:.2f}%")
    return report


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    ``n`` pontos uniformes sobre a superfície (triângulo sorteado pela área).

    Raises:
        EmptyMeshError: Malha sem triângulos ou de área total nula
    """
    if mesh.is_empty:
        raise EmptyMeshError("Não é possível amostrar uma malha vazia")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMeshError("Malha com área total nula")
    faces = rng.choice(len(areas), size=n, p=areas / total)
    u = np.sqrt(rng.random(n))
    v = rng.random(n)
    tri = mesh.vertices[mesh.triangles[faces]]
    return (1 - u)[:, None] * tri[:, 0] + (u * (1 - v))[:, None] * tri[:, 1] + (u * v)[:, None] * tri[:, 2]


def crop_to_bounds(points: np.ndarray, bounds: Tuple[np.ndarray, np.ndarray], margin: float = 0.0) -> np.ndarray:
    """Pontos dentro da caixa (com margem)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return p[np.all((p >= lo - margin) & (p <= hi + margin), axis=1)]


def evaluate_meshes(pred: Mesh, gt: Mesh, threshold_cm: float = DEFAULT_THRESHOLD_CM,
                    n_samples: int = 1_000_000, rng: Optional[np.random.Generator] = None,
                    crop: bool = False) -> MetricReport:
    """Amostra as duas superfícies e calcula as métricas."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pred_pts = sample_surface(pred, n_samples, rng)
    gt_pts = sample_surface(gt, n_samples, rng)
    if crop:
        gt_pts = _as_points(crop_to_bounds(gt_pts, (pred_pts.min(axis=0), pred_pts.max(axis=0))), "gt recortado")
    return compute_metrics(pred_pts, gt_pts, threshold_cm)
