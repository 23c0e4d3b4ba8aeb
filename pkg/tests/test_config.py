"""
Testes unitários para a configuração do mapeamento.
"""

import pytest

from utils.config import Config, ConfigError, format_config, load_config, parse_config_text, write_config


class TestConfig:
    """Testes para o modelo Config."""

    def test_defaults(self):
        """Testa os valores padrão de escala de mesa."""
        config = Config()

        assert config.voxel_size == 0.2
        assert config.truncation == 0.25
        assert config.submap_extent == (40.0, 40.0, 12.0)
        assert config.entry_threshold == 0.75
        assert config.grid_dims == (200, 200, 60)
        assert config.fd_step == pytest.approx(0.05)
        assert config.mesh_subdivision == 1

    def test_truncation_below_voxel_rejected(self):
        """Testa que T_r < s_v é rejeitado."""
        with pytest.raises(ValueError, match="truncation"):
            Config(voxel_size=0.2, truncation=0.1)

    def test_extent_not_multiple_of_voxel(self):
        """Testa a extensão que não é múltipla de s_v."""
        with pytest.raises(ValueError, match="múltiplo"):
            Config(submap_extent=(40.1, 40.0, 12.0))

    def test_entry_threshold_range(self):
        """Testa r_min fora de (0, 1]."""
        with pytest.raises(ValueError):
            Config(entry_threshold=0.0)
        with pytest.raises(ValueError):
            Config(entry_threshold=1.5)

    def test_unknown_field_rejected(self):
        """Testa que campos desconhecidos são proibidos."""
        with pytest.raises(ValueError):
            Config(voxelsize=0.2)

    def test_mesh_resolution_subdivision(self):
        """Testa a subdivisão inteira do voxel."""
        config = Config(mesh_resolution=0.05)
        assert config.mesh_subdivision == 4
        with pytest.raises(ValueError):
            Config(mesh_resolution=0.15)

    def test_with_overrides_ignores_none(self):
        """Testa que overrides None mantêm o valor original."""
        config = Config().with_overrides(rng_seed=7, precision=None, dynamic_removal=False)

        assert config.rng_seed == 7
        assert config.precision == "float32"
        assert config.dynamic_removal is False


class TestConfigFile:
    """Testes para o formato chave = valor."""

    def test_parse_text(self):
        """Testa a leitura com comentários, tuplas e booleanos."""
        text = """
        # grade
        voxel_size = 0.1
        truncation = 0.15   # banda
        submap_extent = 4, 4, 2
        dynamic_removal = false
        mesh_resolution = none
        """

        config = parse_config_text(text)

        assert config.voxel_size == 0.1
        assert config.submap_extent == (4.0, 4.0, 2.0)
        assert config.dynamic_removal is False
        assert config.mesh_resolution is None

    def test_unknown_key(self):
        """Testa que a chave desconhecida indica a linha."""
        with pytest.raises(ConfigError, match=":2: chave desconhecida"):
            parse_config_text("voxel_size = 0.2\nvoxels = 3\n")

    def test_duplicate_key(self):
        """Testa a chave duplicada."""
        with pytest.raises(ConfigError, match="duplicada"):
            parse_config_text("voxel_size = 0.2\nvoxel_size = 0.3\n")

    def test_malformed_line(self):
        """Testa a linha sem '='."""
        with pytest.raises(ConfigError, match="chave = valor"):
            parse_config_text("voxel_size 0.2\n")

    def test_invalid_value_wrapped(self):
        """Testa que erros de validação viram ConfigError."""
        with pytest.raises(ConfigError, match="inválida"):
            parse_config_text("truncation = 0.05\n")

    def test_write_and_load(self, tmp_path):
        """Testa que o arquivo gravado é lido de volta igual."""
        config = Config(voxel_size=0.1, truncation=0.3, submap_extent=(2.0, 2.0, 1.0), eikonal_step=0.02)
        path = tmp_path / "config.txt"

        write_config(config, path)
        loaded = load_config(path)

        assert loaded == config
        assert "eikonal_step = 0.02" in format_config(config)

    def test_load_missing_file(self, tmp_path):
        """Testa o arquivo inexistente."""
        with pytest.raises(ConfigError, match="não encontrado"):
            load_config(tmp_path / "nada.txt")

    def test_load_none_returns_defaults(self):
        """Testa que sem caminho voltam os padrões."""
        assert load_config(None) == Config()
