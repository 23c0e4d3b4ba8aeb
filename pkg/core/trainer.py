"""
Otimização do campo implícito.

Perda por quadro: λ_bce·BCE + λ_eik·Eikonal. Na criação de um submapa a
perda de alinhamento destila as features do submapa anterior (congelado)
para o novo nos voxels em sobreposição. Ao aposentar um submapa, suas
key-scans são reapresentadas num passe de replay.

O Adam é preguiçoso nas tabelas: só as linhas tocadas pelo lote são
atualizadas. O estado da MLP é único porque a MLP é compartilhada.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from core.neural_field import CORNER_OFFSETS, FeatureField, FieldError, sdf_spatial_gradient
from core.sampler import SampleBatch, build_batch
from core.scan_io import Pose
from core.sparse_grid import OverlapSet
from utils.config import Config
from utils.performance import measure

logger = logging.getLogger("voxfield-trainer")

LOG_CLAMP = 1e-12
ALIGN_CHUNK = 32768


class TrainingDivergedError(ArithmeticError):
    """Perda ou parâmetros não finitos durante o treino."""


@dataclass
class LossReport:
    l_bce: float
    l_eik: float
    l_align: float
    l_total: float
    iteration: int
    frame: int = -1
    phase: str = "frame"
    wall_ms: float = 0.0


@dataclass
class OptimizerState:
    """
    Momentos do Adam de um array de parâmetros.

    Atributos:
        m, v: Primeiro e segundo momentos (mesma forma do parâmetro)
        step: Passos já aplicados
        lr: Taxa de aprendizado
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3

    @classmethod
    def zeros_like(cls, param: np.ndarray, lr: float) -> "OptimizerState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0, lr)


class AdamOptimizer:
    """
    Adam com estado denso para a MLP e estado preguiçoso por submapa para as tabelas.
    """

    def __init__(self, lr_features: float = 1e-2, lr_mlp: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.99), eps: float = 1e-15):
        self.lr_features = lr_features
        self.lr_mlp = lr_mlp
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.mlp_states: Optional[List[OptimizerState]] = None
        self.table_states: Dict[int, OptimizerState] = {}

    @classmethod
    def from_config(cls, config: Config) -> "AdamOptimizer":
        return cls(config.lr_features, config.lr_mlp, (config.adam_beta1, config.adam_beta2), config.adam_eps)

    def _update(self, state: OptimizerState, grad: np.ndarray) -> np.ndarray:
        state.m *= self.beta1
        state.m += (1.0 - self.beta1) * grad
        state.v *= self.beta2
        state.v += (1.0 - self.beta2) * grad * grad
        m_hat = state.m / (1.0 - self.beta1 ** state.step)
        v_hat = state.v / (1.0 - self.beta2 ** state.step)
        return state.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step_mlp(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        if self.mlp_states is None:
            self.mlp_states = [OptimizerState.zeros_like(p, self.lr_mlp) for p in params]
        for param, grad, state in zip(params, grads, self.mlp_states):
            state.step += 1
            param -= self._update(state, np.asarray(grad, dtype=param.dtype)).astype(param.dtype)

    def step_table(self, key: int, tables: np.ndarray, rows: np.ndarray, grads: np.ndarray) -> None:
        """Atualiza apenas ``rows``; o contador de passos é da tabela inteira."""
        state = self.table_states.get(key)
        if state is None:
            state = self.table_states[key] = OptimizerState.zeros_like(tables, self.lr_features)
        state.step += 1
        sub = OptimizerState(state.m[rows], state.v[rows], state.step, state.lr)
        tables[rows] -= self._update(sub, np.asarray(grads, dtype=tables.dtype)).astype(tables.dtype)
        state.m[rows] = sub.m
        state.v[rows] = sub.v

    def drop(self, key: int) -> None:
        """Libera o estado das tabelas de um submapa congelado."""
        self.table_states.pop(key, None)


# ---------------------------------------------------------------------------
# Termos de perda
# ---------------------------------------------------------------------------

def occupancy(s: Union[float, np.ndarray], sigma_t: float) -> Union[float, np.ndarray]:
    """o(s) = 1 / (1 + exp(s/σ_t)), decrescente em s."""
    if sigma_t <= 0:
        raise ValueError(f"sigma_t deve ser positivo (recebido {sigma_t})")
    return expit(-np.asarray(s, dtype=np.float64) / sigma_t)


def binary_entropy(o: np.ndarray) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    return -(o * np.log(np.maximum(o, LOG_CLAMP)) + (1 - o) * np.log(np.maximum(1 - o, LOG_CLAMP)))


def bce_terms(pred: np.ndarray, gt: np.ndarray, sigma_t: float) -> Tuple[float, np.ndarray]:
    """Média da entropia cruzada e seu gradiente em relação a ŝ."""
    pred = np.asarray(pred, dtype=np.float64)
    target = occupancy(gt, sigma_t)
    q = expit(-pred / sigma_t)
    r = expit(pred / sigma_t)
    q_c = np.maximum(q, LOG_CLAMP)
    r_c = np.maximum(r, LOG_CLAMP)
    n = len(pred)
    loss = float(np.mean(-(target * np.log(q_c) + (1 - target) * np.log(r_c))))
    d_q = (-target / q_c * (q >= LOG_CLAMP) + (1 - target) / r_c * (r >= LOG_CLAMP)) / n
    return loss, d_q * (-q * r / sigma_t)


def eikonal_terms(s0: np.ndarray, s_axes: np.ndarray, h: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    (|∇ŝ| - 1)² médio com ∇ŝ por diferenças progressivas.

    Args:
        s0: (M,) ŝ(p)
        s_axes: (3, M) ŝ(p + h·e_i)

    Returns:
        (perda, dL/ds0 (M,), dL/ds_axes (3, M))
    """
    m = len(s0)
    if m == 0:
        return 0.0, np.zeros(0), np.zeros((3, 0))
    grad = (np.asarray(s_axes, dtype=np.float64) - s0[None, :]) / h
    norm = np.linalg.norm(grad, axis=0)
    loss = float(np.mean((norm - 1.0) ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(norm > 0, 2.0 * (norm - 1.0) / norm, 0.0) / m
    d_axes = coef[None, :] * grad / h
    return loss, -d_axes.sum(axis=0), d_axes


def _require_samples(batch: SampleBatch) -> None:
    if batch.is_empty:
        raise ValueError("Lote vazio")


def _eikonal_indices(positions: np.ndarray, field: FeatureField, h: float) -> np.ndarray:
    return np.flatnonzero(np.all(positions + h <= field.extent, axis=1))


def bce_loss(batch: SampleBatch, field: FeatureField, sigma_t: float) -> float:
    _require_samples(batch)
    return bce_terms(field.predict(batch.positions), batch.gt_sdf, sigma_t)[0]


def eikonal_loss(batch: SampleBatch, field: FeatureField, h: Optional[float] = None,
                 scheme: str = "forward") -> float:
    """
    Média de (|∇ŝ| - 1)² sobre as amostras longe da borda.

    ``forward`` usa o mesmo estêncil de 4 avaliações do treino; ``central``
    usa ``sdf_spatial_gradient``.
    """
    _require_samples(batch)
    h = field.voxel_size / 4.0 if h is None else h
    p = batch.positions
    if scheme == "central":
        valid = np.all((p - h >= 0) & (p + h <= field.extent), axis=1)
        if not valid.any():
            return 0.0
        grad = sdf_spatial_gradient(field, p[valid], h)
        return float(np.mean((np.linalg.norm(grad, axis=1) - 1.0) ** 2))
    idx = _eikonal_indices(p, field, h)
    if len(idx) == 0:
        return 0.0
    q = p[idx]
    values = field.predict(np.concatenate([q] + [q + h * np.eye(3)[a] for a in range(3)])).astype(np.float64)
    values = values.reshape(4, len(idx))
    return eikonal_terms(values[0], values[1:], h)[0]


def overlap_vertices(overlap: OverlapSet) -> Tuple[np.ndarray, np.ndarray]:
    """Vértices únicos dos voxels em sobreposição e quantos voxels usam cada um."""
    if overlap.is_empty:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    corners = (np.asarray(overlap.voxels, dtype=np.int64)[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
    return np.unique(corners, axis=0, return_counts=True)


class AlignmentTarget:
    """
    Features congeladas do submapa anterior nos vértices da sobreposição.

    As features do anterior são calculadas uma vez; só o novo campo recebe
    gradiente.
    """

    def __init__(self, overlap: OverlapSet, prev_field: FeatureField):
        self.overlap = overlap
        self.vertices, self.counts = overlap_vertices(overlap)
        s = prev_field.voxel_size
        prev_pos = (self.vertices + np.asarray(overlap.offset, dtype=np.int64)) * s
        self.prev_features = np.concatenate([
            prev_field.vertex_features(prev_pos[i:i + ALIGN_CHUNK])[0].astype(np.float64)
            for i in range(0, len(prev_pos), ALIGN_CHUNK)
        ]) if len(prev_pos) else np.zeros((0, prev_field.feature_dim))

    def __len__(self) -> int:
        return len(self.vertices)

    def terms(self, next_field: FeatureField, with_grad: bool = True
              ) -> Tuple[float, np.ndarray, np.ndarray]:
        """
        Returns:
            (Σ count·|h_prev - h_next|₁, linhas tocadas, gradientes das linhas)
        """
        n_f = next_field.n_features
        if len(self.vertices) == 0:
            return 0.0, np.zeros(0, dtype=np.int64), np.zeros((0, n_f))
        s = next_field.voxel_size
        total = 0.0
        rows_parts, grad_parts = [], []
        for i in range(0, len(self.vertices), ALIGN_CHUNK):
            sl = slice(i, i + ALIGN_CHUNK)
            feats, vcache = next_field.vertex_features(self.vertices[sl] * s)
            diff = feats.astype(np.float64) - self.prev_features[sl]
            counts = self.counts[sl].astype(np.float64)
            total += float(np.sum(counts[:, None] * np.abs(diff)))
            if with_grad:
                rows, grads = next_field.table_gradients(vcache, counts[:, None] * np.sign(diff))
                rows_parts.append(rows)
                grad_parts.append(grads)
        if not with_grad:
            return total, np.zeros(0, dtype=np.int64), np.zeros((0, n_f))
        return (total,) + merge_row_grads(rows_parts, grad_parts, n_f)


def align_loss(overlap: OverlapSet, prev_field: FeatureField, next_field: FeatureField) -> float:
    """Soma L1 das diferenças de features nos vértices da sobreposição; 0 se vazia."""
    if overlap.is_empty:
        return 0.0
    return AlignmentTarget(overlap, prev_field).terms(next_field, with_grad=False)[0]


def merge_row_grads(rows_parts: Sequence[np.ndarray], grad_parts: Sequence[np.ndarray],
                    n_features: int) -> Tuple[np.ndarray, np.ndarray]:
    """Soma gradientes de linhas repetidas entre várias fontes."""
    rows_parts = [r for r in rows_parts if len(r)]
    grad_parts = [g for g in grad_parts if len(g)]
    if not rows_parts:
        return np.zeros(0, dtype=np.int64), np.zeros((0, n_features))
    rows = np.concatenate(rows_parts)
    grads = np.concatenate(grad_parts)
    unique, inverse = np.unique(rows, return_inverse=True)
    merged = np.zeros((len(unique), n_features))
    np.add.at(merged, inverse.reshape(-1), grads)
    return unique, merged


# ---------------------------------------------------------------------------
# Passos de otimização
# ---------------------------------------------------------------------------

def optimization_step(field: FeatureField, batch: SampleBatch, optimizer: AdamOptimizer,
                      config: Config, table_key: int, iteration: int = 0,
                      alignment: Optional[AlignmentTarget] = None, lambda_align: float = 0.0,
                      frame: int = -1, phase: str = "frame") -> LossReport:
    """
    Um passo de Adam sobre λ_bce·BCE + λ_eik·Eikonal (+ λ_align·alinhamento).

    Raises:
        TrainingDivergedError: Perda ou SDF não finita
    """
    start = time.perf_counter()
    h = config.fd_step
    pos = batch.positions
    n = len(pos)
    eik_idx = _eikonal_indices(pos, field, h)
    m = len(eik_idx)
    queries = np.concatenate([pos] + [pos[eik_idx] + h * np.eye(3)[a] for a in range(3)])
    try:
        sdf, cache = field.forward(queries)
    except FieldError as e:
        raise TrainingDivergedError(f"{phase} quadro {frame}, iteração {iteration}: {e}") from e
    sdf = sdf.astype(np.float64)

    l_bce, d_pred = bce_terms(sdf[:n], batch.gt_sdf, config.sigma_t)
    l_eik, d_s0, d_axes = eikonal_terms(sdf[eik_idx], sdf[n:].reshape(3, m), h)
    grad = np.zeros(len(queries))
    grad[:n] = config.lambda_bce * d_pred
    grad[eik_idx] += config.lambda_eik * d_s0
    grad[n:] = config.lambda_eik * d_axes.ravel()

    l_align = 0.0
    align_rows = np.zeros(0, dtype=np.int64)
    align_grads = np.zeros((0, field.n_features))
    if alignment is not None:
        l_align, align_rows, align_grads = alignment.terms(field, with_grad=lambda_align > 0)

    l_total = config.lambda_bce * l_bce + config.lambda_eik * l_eik + lambda_align * l_align
    if not np.isfinite(l_total):
        raise TrainingDivergedError(
            f"Perda não finita em {phase} quadro {frame}, iteração {iteration}: "
            f"bce={l_bce}, eik={l_eik}, align={l_align}"
        )

    grads = field.backward(cache, grad)
    rows, table_grads = merge_row_grads(
        [grads.table_rows, align_rows], [grads.table_grads, lambda_align * align_grads], field.n_features
    )
    optimizer.step_table(table_key, field.tables, rows, table_grads)
    optimizer.step_mlp(field.mlp.params, grads.mlp_grads)
    return LossReport(l_bce, l_eik, l_align, l_total, iteration, frame, phase,
                      (time.perf_counter() - start) * 1000.0)


def _field_of(submap) -> FeatureField:
    if submap.feature_field is None:
        raise ValueError(f"Submapa {submap.id} sem campo treinável")
    return submap.feature_field


@measure("train_frame")
def train_frame(submap, batch: SampleBatch, optimizer: AdamOptimizer, config: Config,
                frame: int = -1) -> List[LossReport]:
    """``iters_per_frame`` passos sobre o lote do quadro."""
    _require_samples(batch)
    field = _field_of(submap)
    reports = [
        optimization_step(field, batch, optimizer, config, submap.id, it, frame=frame)
        for it in range(config.iters_per_frame)
    ]
    if reports:
        logger.debug(f"Quadro {frame}: perda {reports[0].l_total:.5f} → {reports[-1].l_total:.5f}")
    return reports


@measure("train_overlap")
def train_overlap(prev_submap, next_submap, batch: SampleBatch, optimizer: AdamOptimizer,
                  config: Config, overlap: OverlapSet, frame: int = -1) -> List[LossReport]:
    """
    ``overlap_iters`` passos com o termo de alinhamento.

    Só o campo novo e a MLP são atualizados; o anterior serve de alvo fixo.
    """
    _require_samples(batch)
    field = _field_of(next_submap)
    prev_field = _field_of(prev_submap)
    alignment = AlignmentTarget(overlap, prev_field) if not overlap.is_empty else None
    reports = [
        optimization_step(field, batch, optimizer, config, next_submap.id, it,
                          alignment=alignment, lambda_align=config.lambda_align,
                          frame=frame, phase="overlap")
        for it in range(config.overlap_iters)
    ]
    if reports:
        logger.info(
            f"Alinhamento {prev_submap.id} → {next_submap.id}: L_align {reports[0].l_align:.5f} → "
            f"{reports[-1].l_align:.5f} em {len(reports)} iterações ({len(overlap)} voxels)"
        )
    return reports


def maybe_add_keyscan(submap, frame_index: int, pose: Pose, keyscan_distance: float) -> bool:
    """Adiciona o quadro às key-scans se andou mais que D_min desde a última."""
    if submap.keyscans:
        _, last = submap.keyscans[-1]
        if np.linalg.norm(pose.translation - last.translation) <= keyscan_distance:
            return False
    submap.keyscans.append((frame_index, pose))
    logger.debug(f"Submapa {submap.id}: quadro {frame_index} retido como key-scan ({len(submap.keyscans)})")
    return True


@measure("replay_submap")
def replay_submap(submap, scans: Sequence[Tuple[np.ndarray, np.ndarray]], optimizer: AdamOptimizer,
                  config: Config, rng: np.random.Generator) -> List[LossReport]:
    """
    Replay do submapa com a união das key-scans; libera a lista ao final.

    Args:
        scans: (pontos estáticos locais, origem local) de cada key-scan
    """
    batches = [build_batch(points, origin, submap.sparse_grid, config, rng) for points, origin in scans]
    union = SampleBatch.concatenate(batches)
    reports: List[LossReport] = []
    if union.is_empty:
        logger.warning(f"Submapa {submap.id}: replay sem amostras")
    else:
        field = _field_of(submap)
        per_step = config.rays_per_batch * config.samples_per_ray
        for it in range(config.replay_iters):
            batch = union.subsample(per_step, rng)
            reports.append(optimization_step(field, batch, optimizer, config, submap.id, it, phase="replay"))
        if reports:
            logger.info(
                f"Replay do submapa {submap.id}: {len(scans)} key-scans, "
                f"perda {reports[0].l_total:.5f} → {reports[-1].l_total:.5f}"
            )
    submap.keyscans.clear()
    return reports


LOSS_COLUMNS = [f.name for f in fields(LossReport)]


def write_loss_csv(reports: Sequence[LossReport], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(asdict(report))
