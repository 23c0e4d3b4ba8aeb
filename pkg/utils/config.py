"""
Configuração do mapeamento Voxfield.

A configuração é um modelo pydantic imutável cujos campos são exatamente as
chaves aceitas no arquivo de configuração (texto plano ``chave = valor``).
Chaves desconhecidas são rejeitadas para capturar erros de digitação.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

logger = logging.getLogger("voxfield-config")


class ConfigError(ValueError):
    """Erro de leitura ou validação da configuração."""


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    return value


def _none_token(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("", "none", "null"):
        return None
    return value


class Config(BaseModel):
    """
    Parâmetros do mapeamento incremental.

    Os valores padrão correspondem à escala de mesa: voxels de 0.2 m,
    banda truncada de 0.25 m e submapas de 40 x 40 x 12 m.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Grade e submapas
    voxel_size: float = 0.2
    truncation: float = 0.25
    submap_extent: Tuple[float, float, float] = (40.0, 40.0, 12.0)
    entry_threshold: float = 0.75
    keyscan_distance: float = 2.0
    center_mode: Literal["centroid", "sensor"] = "centroid"

    # Campo implícito
    hash_levels: int = 16
    features_per_level: int = 2
    log2_table_size: int = 19
    base_resolution: int = 16
    mlp_hidden: int = 256
    mlp_layers: int = 2
    precision: Literal["float32", "float64"] = "float32"

    # Otimização
    iters_per_frame: int = 5
    overlap_iters: int = 30
    replay_iters: int = 100
    lambda_bce: float = 1.0
    lambda_eik: float = 0.1
    lambda_align: float = 1.0
    sigma_t: float = 0.0625
    lr_features: float = 1e-2
    lr_mlp: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    eikonal_step: Optional[float] = None

    # Amostragem
    samples_per_ray: int = 6
    rays_per_batch: int = 4096
    rng_seed: int = 42

    # Remoção dinâmica
    dynamic_removal: bool = True
    min_free_hits: int = 1
    seed_min_known_neighbors: int = 20
    grow_stable_hits: int = 2

    # Ablações e saída
    overlap_alignment: bool = True
    keyscan_replay: bool = True
    mesh_resolution: Optional[float] = None

    @field_validator("submap_extent", mode="before")
    @classmethod
    def _parse_extent(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("mesh_resolution", "eikonal_step", mode="before")
    @classmethod
    def _parse_optional(cls, value: Any) -> Any:
        return _none_token(value)

    @model_validator(mode="after")
    def _check_invariants(self) -> "Config":
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size deve ser positivo (recebido {self.voxel_size})")
        if self.truncation < self.voxel_size:
            raise ValueError(
                f"truncation ({self.truncation}) deve ser >= voxel_size ({self.voxel_size})"
            )
        if not 0 < self.entry_threshold <= 1:
            raise ValueError(f"entry_threshold fora de (0, 1]: {self.entry_threshold}")
        for name in ("lambda_bce", "lambda_eik", "lambda_align"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} deve ser >= 0")
        if self.sigma_t <= 0:
            raise ValueError("sigma_t deve ser positivo")
        for axis, length in zip("xyz", self.submap_extent):
            if length <= 0:
                raise ValueError(f"submap_extent.{axis} deve ser positivo")
            ratio = length / self.voxel_size
            if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
                raise ValueError(
                    f"submap_extent.{axis}={length} não é múltiplo inteiro de voxel_size={self.voxel_size}"
                )
        if self.mesh_resolution is not None:
            factor = self.voxel_size / self.mesh_resolution
            if self.mesh_resolution <= 0 or abs(factor - round(factor)) > 1e-6:
                raise ValueError("mesh_resolution deve dividir voxel_size em partes inteiras")
        if self.eikonal_step is not None and not 0 < self.eikonal_step < self.voxel_size:
            raise ValueError("eikonal_step deve estar em (0, voxel_size)")
        for name in ("hash_levels", "features_per_level", "mlp_hidden", "mlp_layers",
                     "samples_per_ray", "rays_per_batch", "min_free_hits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} deve ser >= 1")
        if not 1 <= self.log2_table_size <= 30:
            raise ValueError("log2_table_size deve estar em [1, 30]")
        for name in ("iters_per_frame", "overlap_iters", "replay_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} deve ser >= 0")
        return self

    @property
    def grid_dims(self) -> Tuple[int, int, int]:
        """Número de voxels por eixo de um submapa."""
        return tuple(int(round(length / self.voxel_size)) for length in self.submap_extent)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    @property
    def fd_step(self) -> float:
        """Passo das diferenças centrais do termo Eikonal."""
        if self.eikonal_step is not None:
            return self.eikonal_step
        return self.voxel_size / 4.0

    @property
    def mesh_subdivision(self) -> int:
        if self.mesh_resolution is None:
            return 1
        return int(round(self.voxel_size / self.mesh_resolution))

    def with_overrides(self, **overrides: Any) -> "Config":
        """Retorna uma cópia validada com os campos substituídos."""
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return Config(**data)


def parse_config_text(text: str, source: str = "<texto>") -> Config:
    """
    Interpreta o formato ``chave = valor``.

    Args:
        text: Conteúdo do arquivo
        source: Nome usado nas mensagens de erro

    Returns:
        Config validada

    Raises:
        ConfigError: Linha malformada, chave duplicada/desconhecida ou valor inválido
    """
    values: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: esperado 'chave = valor', recebido {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in Config.model_fields:
            raise ConfigError(f"{source}:{line_no}: chave desconhecida '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: chave duplicada '{key}'")
        values[key] = value

    try:
        return Config(**values)
    except ValidationError as e:
        raise ConfigError(f"{source}: configuração inválida: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None) -> Config:
    """Carrega a configuração de um arquivo; sem caminho retorna os padrões."""
    if path is None:
        return Config()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
    config = parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
    logger.info(f"Configuração carregada de {path}")
    return config


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: Config) -> str:
    lines = [f"{key} = {_format_value(value)}" for key, value in config.model_dump().items()]
    return "\n".join(lines) + "\n"


def write_config(config: Config, path: Union[str, Path]) -> None:
    """Grava a configuração no mesmo formato aceito por ``load_config``."""
    Path(path).write_text(format_config(config), encoding="utf-8")

