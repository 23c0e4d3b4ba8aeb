"""
Campo implícito denso: tabelas de hash multirresolução + MLP rasa.

A consulta de uma amostra é guiada pelos vértices da rede de voxels:
    1. cada vértice da rede recebe, por nível, a interpolação trilinear das
       entradas hash dos cantos da célula daquele nível (feature do vértice);
    2. a feature da amostra é a interpolação trilinear das features dos 8
       vértices do voxel de tamanho s_v que a contém;
    3. a MLP compartilhada converte a feature em SDF.

Forward e backward são escritos à mão em numpy. As tabelas são por submapa;
a MLP é compartilhada por todos os submapas de uma execução.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

logger = logging.getLogger("voxfield-field")

PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)

# Ordem dos 8 cantos: bit 2 → x, bit 1 → y, bit 0 → z
CORNER_OFFSETS = np.array(
    [((c >> 2) & 1, (c >> 1) & 1, c & 1) for c in range(8)], dtype=np.int64
)

CHECKPOINT_MAGIC = b"VXFD"
CHECKPOINT_VERSION = 1

INIT_SCALE = 1e-4
BOX_TOL = 1e-9


class FieldError(ValueError):
    """Consulta fora da caixa, parâmetros não finitos ou checkpoint inválido."""


def hash_index(cell: np.ndarray, log2_table_size: int) -> Union[int, np.ndarray]:
    """
    Índice na tabela de um nível para células inteiras (..., 3).

    XOR dos produtos pelas constantes primas, mascarado para [0, 2^T).
    """
    c = np.asarray(cell, dtype=np.int64)
    single = c.ndim == 1
    if single:
        c = c[None]
    u = c.astype(np.uint64)
    h = (u[..., 0] * PRIMES[0]) ^ (u[..., 1] * PRIMES[1]) ^ (u[..., 2] * PRIMES[2])
    out = (h & np.uint64((1 << log2_table_size) - 1)).astype(np.int64)
    return int(out[0]) if single else out


def level_resolutions(extent: Sequence[float], voxel_size: float, n_levels: int,
                      base_resolution: int = 16) -> np.ndarray:
    """
    Resoluções (células no eixo mais longo) em progressão geométrica.

    Vai de ``base_resolution`` até max(extent)/s_v, de modo que o nível mais
    fino coincide com a rede de voxels. Sempre estritamente crescente.
    """
    finest = int(round(max(extent) / voxel_size))
    coarsest = max(1, min(base_resolution, finest))
    if n_levels == 1:
        return np.array([finest], dtype=np.int64)
    growth = np.exp((np.log(finest) - np.log(coarsest)) / (n_levels - 1))
    res = np.floor(coarsest * growth ** np.arange(n_levels) + 1e-9).astype(np.int64)
    res[0], res[-1] = coarsest, finest
    for level in range(1, n_levels):
        res[level] = max(res[level], res[level - 1] + 1)
    return res


def trilinear_weights(frac: np.ndarray) -> np.ndarray:
    """Pesos (..., 8) dos cantos a partir das frações (..., 3); somam 1."""
    frac = np.asarray(frac)
    sel = CORNER_OFFSETS.astype(bool)
    w = np.where(sel, frac[..., None, :], 1.0 - frac[..., None, :])
    return w.prod(axis=-1)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MLPCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


class MLP:
    """
    Perceptron raso com ReLU nas camadas ocultas e saída linear escalar.

    Atributos:
        weights: Matrizes (entrada, saída) por camada
        biases: Vetores de viés por camada
    """

    def __init__(self, in_dim: int, hidden: int = 256, n_hidden: int = 2,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)
        dims = [in_dim] + [hidden] * n_hidden + [1]
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            gain = 2.0 if i < n_hidden else 1.0
            self.weights.append(rng.normal(0.0, np.sqrt(gain / d_in), size=(d_in, d_out)).astype(self.dtype))
            self.biases.append(np.zeros(d_out, dtype=self.dtype))

    @property
    def dims(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self) -> List[np.ndarray]:
        """Parâmetros intercalados [W0, b0, W1, b1, ...] (referências)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, MLPCache]:
        h = np.asarray(x, dtype=self.dtype)
        cache = MLPCache([], [])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(h)
            z = h @ w + b
            cache.pre_activations.append(z)
            h = np.maximum(z, 0) if i < last else z
        return h[:, 0], cache

    def backward(self, cache: MLPCache, grad_out: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Returns:
            Gradientes na ordem de ``params`` e gradiente em relação à entrada
        """
        g = np.asarray(grad_out, dtype=self.dtype).reshape(-1, 1)
        grads: List[np.ndarray] = []
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * (cache.pre_activations[i] > 0)
            grads.append(g.sum(axis=0))
            grads.append(cache.inputs[i].T @ g)
            g = g @ self.weights[i].T
        grads.reverse()
        return grads, g

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.dtype = self.dtype
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


# ---------------------------------------------------------------------------
# Campo de features
# ---------------------------------------------------------------------------

@dataclass
class VertexCache:
    """Linhas das tabelas e pesos por nível de cada vértice consultado."""

    rows: np.ndarray      # (V, L, 8) int32
    weights: np.ndarray   # (V, L, 8)


@dataclass
class FieldCache:
    """Intermediários de um forward, consumidos pelo backward."""

    vertex_inverse: np.ndarray   # (N, 8) índice no conjunto único de vértices
    voxel_weights: np.ndarray    # (N, 8)
    vertex: VertexCache
    mlp: MLPCache

    @property
    def n_queries(self) -> int:
        return len(self.voxel_weights)


@dataclass
class FieldGradients:
    """Gradientes esparsos das tabelas e densos da MLP."""

    table_rows: np.ndarray        # (R,) linhas tocadas
    table_grads: np.ndarray       # (R, F)
    mlp_grads: List[np.ndarray]   # na ordem de MLP.params


class FeatureField:
    """
    Tabelas de hash por nível sobre a caixa local de um submapa.

    Atributos:
        extent: Dimensões da caixa (m)
        voxel_size: Aresta do voxel da rede guiada por vértices (m)
        resolutions: Células por nível no eixo mais longo
        cell_sizes: Aresta da célula de cada nível (m)
        tables: (L·2^T, F) entradas aprendíveis, nível ℓ nas linhas [ℓ·2^T, (ℓ+1)·2^T)
        mlp: MLP compartilhada
    """

    def __init__(self, extent: Sequence[float], voxel_size: float, n_levels: int = 16,
                 n_features: int = 2, log2_table_size: int = 19, base_resolution: int = 16,
                 mlp: Optional[MLP] = None, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64, mlp_hidden: int = 256, mlp_layers: int = 2,
                 resolutions: Optional[np.ndarray] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.extent = np.asarray(extent, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = np.round(self.extent / self.voxel_size).astype(np.int64)
        self.n_levels = n_levels
        self.n_features = n_features
        self.log2_table_size = log2_table_size
        self.table_size = 1 << log2_table_size
        self.dtype = np.dtype(dtype)
        if resolutions is None:
            resolutions = level_resolutions(self.extent, self.voxel_size, n_levels, base_resolution)
        self.resolutions = np.asarray(resolutions, dtype=np.int64)
        self.cell_sizes = float(self.extent.max()) / self.resolutions.astype(np.float64)
        self.level_offsets = (np.arange(n_levels, dtype=np.int64) * self.table_size)
        self.tables = rng.uniform(-INIT_SCALE, INIT_SCALE,
                                  size=(n_levels * self.table_size, n_features)).astype(self.dtype)
        if mlp is None:
            mlp = MLP(n_levels * n_features, mlp_hidden, mlp_layers, rng=rng, dtype=self.dtype)
        if mlp.dims[0] != n_levels * n_features:
            raise FieldError(f"MLP espera entrada {mlp.dims[0]}, campo produz {n_levels * n_features}")
        self.mlp = mlp

    @classmethod
    def from_config(cls, extent: Sequence[float], config, mlp: Optional[MLP] = None,
                    rng: Optional[np.random.Generator] = None) -> "FeatureField":
        return cls(
            extent=extent, voxel_size=config.voxel_size, n_levels=config.hash_levels,
            n_features=config.features_per_level, log2_table_size=config.log2_table_size,
            base_resolution=config.base_resolution, mlp=mlp, rng=rng, dtype=config.dtype,
            mlp_hidden=config.mlp_hidden, mlp_layers=config.mlp_layers
        )

    @property
    def feature_dim(self) -> int:
        return self.n_levels * self.n_features

    def table_index(self, level: int, cells: np.ndarray) -> np.ndarray:
        """Linha da tabela achatada para células de um nível."""
        return hash_index(cells, self.log2_table_size) + level * self.table_size

    def _check_inside(self, points: np.ndarray) -> None:
        if len(points) == 0:
            return
        outside = np.any((points < -BOX_TOL) | (points > self.extent + BOX_TOL), axis=1)
        if outside.any():
            first = points[np.flatnonzero(outside)[0]]
            raise FieldError(f"Ponto fora da caixa do campo: {first.tolist()} (caixa {self.extent.tolist()})")

    # -- nível dos vértices ------------------------------------------------

    def _vertex_lookup(self, vertices: np.ndarray) -> VertexCache:
        x = vertices[:, None, :] / self.cell_sizes[None, :, None]
        x0 = np.floor(x)
        frac = x - x0
        cells = x0.astype(np.int64)[:, :, None, :] + CORNER_OFFSETS[None, None, :, :]
        rows = hash_index(cells, self.log2_table_size) + self.level_offsets[None, :, None]
        return VertexCache(rows=rows.astype(np.int32), weights=trilinear_weights(frac).astype(self.dtype))

    def vertex_features(self, vertices: np.ndarray) -> Tuple[np.ndarray, VertexCache]:
        """
        Features (V, L·F) de vértices na caixa local.

        Raises:
            FieldError: Vértice fora da caixa
        """
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self._check_inside(v)
        cache = self._vertex_lookup(v)
        gathered = self.tables[cache.rows]                     # (V, L, 8, F)
        feats = np.einsum("vlc,vlcf->vlf", cache.weights, gathered)
        return feats.reshape(len(v), self.feature_dim), cache

    # -- nível das amostras ------------------------------------------------

    def encode(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, VertexCache]:
        """
        Feature interpolada de cada amostra.

        Returns:
            (features (N, L·F), índice dos vértices (N, 8), pesos (N, 8), cache dos vértices)
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._check_inside(p)
        s = self.voxel_size
        voxel = np.clip(np.floor(p / s).astype(np.int64), 0, self.dims - 1)
        frac = np.clip(p / s - voxel, 0.0, 1.0)
        corners = voxel[:, None, :] + CORNER_OFFSETS[None, :, :]
        span = self.dims + 1
        keys = (corners[..., 0] * span[1] + corners[..., 1]) * span[2] + corners[..., 2]
        unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
        inverse = inverse.reshape(-1, 8)
        ijk = np.stack([
            unique_keys // (span[1] * span[2]),
            (unique_keys // span[2]) % span[1],
            unique_keys % span[2]
        ], axis=1)
        vertex_feats, vcache = self.vertex_features(ijk * s)
        weights = trilinear_weights(frac).astype(self.dtype)
        feats = np.einsum("nc,ncf->nf", weights, vertex_feats[inverse])
        return feats, inverse, weights, vcache

    def forward(self, points: np.ndarray) -> Tuple[np.ndarray, FieldCache]:
        """SDF predita (N,) e os intermediários para o backward."""
        feats, inverse, weights, vcache = self.encode(points)
        sdf, mlp_cache = self.mlp.forward(feats)
        if not np.all(np.isfinite(sdf)):
            raise FieldError("SDF não finita: parâmetros do campo divergiram")
        return sdf, FieldCache(inverse, weights, vcache, mlp_cache)

    def predict(self, points: np.ndarray) -> np.ndarray:
        return self.forward(points)[0]

    # -- backward ----------------------------------------------------------

    def table_gradients(self, vcache: VertexCache, grad_vertex: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Espalha gradientes de features de vértices (V, L·F) nas linhas das tabelas.

        O custo é proporcional às linhas tocadas, não ao tamanho da tabela.

        Returns:
            (linhas tocadas em ordem crescente, gradientes (R, F))
        """
        rows = vcache.rows.ravel().astype(np.int64)
        g = np.asarray(grad_vertex, dtype=np.float64).reshape(len(vcache.rows), self.n_levels, self.n_features)
        contrib = vcache.weights.astype(np.float64)[..., None] * g[:, :, None, :]   # (V, L, 8, F)
        contrib = contrib.reshape(-1, self.n_features)
        touched, slot = np.unique(rows, return_inverse=True)
        slot = slot.ravel()
        grads = np.stack(
            [np.bincount(slot, weights=contrib[:, f], minlength=len(touched)) for f in range(self.n_features)],
            axis=1
        )
        return touched, grads

    def backward(self, cache: FieldCache, grad_sdf: np.ndarray) -> FieldGradients:
        """
        Gradientes de todos os parâmetros dado dL/dŝ para cada consulta.

        Raises:
            FieldError: Tamanho de ``grad_sdf`` diferente do número de consultas
        """
        grad_sdf = np.asarray(grad_sdf, dtype=np.float64).reshape(-1)
        if len(grad_sdf) != cache.n_queries:
            raise FieldError(f"Gradiente com {len(grad_sdf)} valores para {cache.n_queries} consultas")
        mlp_grads, grad_feat = self.mlp.backward(cache.mlp, grad_sdf)

        n_vertices = len(cache.vertex.rows)
        n = cache.n_queries
        scatter = sparse.csr_matrix(
            (cache.voxel_weights.astype(np.float64).ravel(),
             (cache.vertex_inverse.ravel(), np.repeat(np.arange(n), 8))),
            shape=(n_vertices, n)
        )
        grad_vertex = scatter @ np.asarray(grad_feat, dtype=np.float64)
        rows, table_grads = self.table_gradients(cache.vertex, grad_vertex)
        return FieldGradients(rows, table_grads, mlp_grads)

    def copy(self, share_mlp: bool = True) -> "FeatureField":
        clone = FeatureField.__new__(FeatureField)
        clone.__dict__.update(self.__dict__)
        clone.tables = self.tables.copy()
        clone.mlp = self.mlp if share_mlp else self.mlp.copy()
        return clone


# ---------------------------------------------------------------------------
# Operações
# ---------------------------------------------------------------------------

def vertex_feature(field: FeatureField, v: np.ndarray) -> np.ndarray:
    """Feature de largura L·F de um ou mais vértices."""
    single = np.asarray(v).ndim == 1
    feats, _ = field.vertex_features(v)
    return feats[0] if single else feats


def interpolate_sample(field: FeatureField, p_s: np.ndarray) -> np.ndarray:
    """Feature f(p_s) interpolada dos 8 vértices do voxel que contém p_s."""
    single = np.asarray(p_s).ndim == 1
    feats = field.encode(p_s)[0]
    return feats[0] if single else feats


def predict_sdf(field: FeatureField, p_s: np.ndarray) -> Union[float, np.ndarray]:
    single = np.asarray(p_s).ndim == 1
    sdf = field.predict(p_s)
    return float(sdf[0]) if single else sdf


def sdf_spatial_gradient(field: FeatureField, p_s: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """
    ∇ŝ por diferenças centrais com passo h (padrão s_v/4).

    Raises:
        FieldError: Ponto a menos de h da borda da caixa
    """
    h = field.voxel_size / 4.0 if h is None else h
    p = np.asarray(p_s, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    if np.any(p - h < 0) or np.any(p + h > field.extent):
        raise FieldError(f"Ponto a menos de h={h} da borda da caixa")
    stencil = np.concatenate([p + h * np.eye(3)[axis] for axis in range(3)]
                             + [p - h * np.eye(3)[axis] for axis in range(3)])
    values = field.predict(stencil).astype(np.float64).reshape(6, len(p))
    grad = ((values[:3] - values[3:]) / (2.0 * h)).T
    return grad[0] if single else grad


def backward(field: FeatureField, cache: FieldCache, grad_sdf: np.ndarray) -> FieldGradients:
    return field.backward(cache, grad_sdf)


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------

def save_field(field: FeatureField, path: Union[str, Path]) -> None:
    """
    Grava tabelas e MLP em binário little-endian.

    Cabeçalho: magic, versão, L, F, T, bytes por float, número de camadas,
    resoluções, extent, voxel_size e larguras da MLP; depois os arrays planos.
    """
    fmt = "<f8" if field.dtype == np.float64 else "<f4"
    dims = field.mlp.dims
    header = np.array([CHECKPOINT_VERSION, field.n_levels, field.n_features, field.log2_table_size,
                       field.dtype.itemsize, len(dims)], dtype="<i8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(header.tobytes())
        f.write(field.resolutions.astype("<i8").tobytes())
        f.write(field.extent.astype("<f8").tobytes())
        f.write(np.array([field.voxel_size], dtype="<f8").tobytes())
        f.write(np.asarray(dims, dtype="<i8").tobytes())
        f.write(field.tables.astype(fmt).tobytes())
        for param in field.mlp.params:
            f.write(param.astype(fmt).tobytes())


def load_field(path: Union[str, Path]) -> FeatureField:
    """Lê um checkpoint gravado por ``save_field`` (ida e volta exata)."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FieldError(f"{path}: assinatura de checkpoint inválida")
    offset = len(CHECKPOINT_MAGIC)

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal offset
        size = np.dtype(dtype).itemsize * count
        if offset + size > len(data):
            raise FieldError(f"{path}: checkpoint truncado no byte {offset}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
        offset += size
        return arr

    version, n_levels, n_features, log2_size, itemsize, n_dims = take("<i8", 6).tolist()
    if version != CHECKPOINT_VERSION:
        raise FieldError(f"{path}: versão de checkpoint {version} não suportada")
    resolutions = take("<i8", n_levels)
    extent = take("<f8", 3)
    voxel_size = float(take("<f8", 1)[0])
    dims = take("<i8", n_dims).tolist()
    fmt = "<f8" if itemsize == 8 else "<f4"
    dtype = np.float64 if itemsize == 8 else np.float32

    mlp = MLP.__new__(MLP)
    mlp.dtype = np.dtype(dtype)
    mlp.weights, mlp.biases = [], []
    field = FeatureField.__new__(FeatureField)
    field.extent = extent
    field.voxel_size = voxel_size
    field.dims = np.round(extent / voxel_size).astype(np.int64)
    field.n_levels, field.n_features, field.log2_table_size = n_levels, n_features, log2_size
    field.table_size = 1 << log2_size
    field.dtype = np.dtype(dtype)
    field.resolutions = resolutions
    field.cell_sizes = float(extent.max()) / resolutions.astype(np.float64)
    field.level_offsets = np.arange(n_levels, dtype=np.int64) * field.table_size
    field.tables = take(fmt, n_levels * field.table_size * n_features).reshape(-1, n_features).astype(dtype)
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        mlp.weights.append(take(fmt, d_in * d_out).reshape(d_in, d_out).astype(dtype))
        mlp.biases.append(take(fmt, d_out).astype(dtype))
    if offset != len(data):
        raise FieldError(f"{path}: {len(data) - offset} bytes sobrando após os parâmetros")
    field.mlp = mlp
    return field
