"""
Configurações e fixtures compartilhadas para os testes do Voxfield.
"""

import sys
from itertools import product
from pathlib import Path

import numpy as np
import pytest

# Adiciona o diretório raiz ao path para importações
project_root = str(Path(__file__).parent.parent)
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from core.neural_field import MLP, FeatureField
from core.scan_io import Pose
from core.submap_manager import create_submap
from utils.config import Config
from utils.performance import performance_monitor


@pytest.fixture(autouse=True)
def reset_performance_monitor():
    """Zera tempos e contadores do monitor global entre os testes."""
    performance_monitor.reset_stats()
    yield
    performance_monitor.reset_stats()


@pytest.fixture
def rng():
    """Gerador determinístico."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Configuração reduzida para rodar em segundos na CPU."""
    return Config(
        voxel_size=0.2,
        truncation=0.25,
        submap_extent=(4.0, 4.0, 2.0),
        hash_levels=4,
        features_per_level=2,
        log2_table_size=12,
        base_resolution=4,
        mlp_hidden=16,
        mlp_layers=2,
        precision="float64",
        rays_per_batch=256,
        samples_per_ray=4,
        iters_per_frame=3,
        overlap_iters=5,
        replay_iters=5,
        seed_min_known_neighbors=0,
        grow_stable_hits=1000,
    )


@pytest.fixture
def wall_points():
    """
    Parede plana x = 3.0 vista de (1, 2, 1) no referencial local de uma caixa 4 x 4 x 2.

    Returns:
        (pontos (N, 3), origem (3,))
    """
    ys = np.linspace(0.5, 3.5, 31)
    zs = np.linspace(0.3, 1.7, 15)
    y, z = np.meshgrid(ys, zs, indexing="ij")
    points = np.stack([np.full(y.size, 3.0), y.ravel(), z.ravel()], axis=1)
    return points, np.array([1.0, 2.0, 1.0])


@pytest.fixture
def wall_submap(small_config, rng):
    """Submapa vazio 4 x 4 x 2 com canto mínimo na origem."""
    return create_submap(np.array([2.0, 2.0, 1.0]), np.array(small_config.submap_extent), small_config,
                         rng=rng)


@pytest.fixture
def tiny_field(rng):
    """Campo pequeno (L=2, F=2, T=8, MLP de 16 unidades) com tabelas aleatórias."""
    mlp = MLP(4, hidden=16, n_hidden=2, rng=rng, dtype=np.float64)
    field = FeatureField((0.8, 0.8, 0.8), 0.2, n_levels=2, n_features=2, log2_table_size=8,
                         base_resolution=2, mlp=mlp, rng=rng, dtype=np.float64)
    field.tables[:] = rng.normal(0.0, 0.5, size=field.tables.shape)
    return field


def make_linear_field() -> FeatureField:
    """
    Campo cuja SDF é exatamente ŝ(p) = p_x.

    Nível 0 (resolução 2, células de 0.4 m) guarda x do nó na feature 0; os
    27 nós não colidem com T=8. A MLP passa a feature 0 pela ReLU com um
    deslocamento de +10 que a saída desfaz.
    """
    mlp = MLP(4, hidden=16, n_hidden=2, dtype=np.float64)
    for w in mlp.weights:
        w[:] = 0.0
    for b in mlp.biases:
        b[:] = 0.0
    mlp.weights[0][0, 0] = 1.0
    mlp.biases[0][0] = 10.0
    mlp.weights[1][0, 0] = 1.0
    mlp.weights[2][0, 0] = 1.0
    mlp.biases[2][0] = -10.0
    field = FeatureField((0.8, 0.8, 0.8), 0.2, n_levels=2, n_features=2, log2_table_size=8,
                         base_resolution=2, mlp=mlp, dtype=np.float64)
    field.tables[:] = 0.0
    for node in product(range(3), repeat=3):
        row = field.table_index(0, np.array([node]))[0]
        field.tables[row, 0] = node[0] * field.cell_sizes[0]
    return field


@pytest.fixture
def linear_field():
    return make_linear_field()


@pytest.fixture
def identity_pose():
    return Pose.identity()
