"""
Testes unitários para logging, monitor de desempenho e cache.
"""

import io
import logging
import time

import numpy as np
import pytest

from utils.cache import KeyScanCache, MemoryCache
from utils.logger import ColoredFormatter, setup_logging
from utils.performance import PerformanceMonitor, measure, performance_monitor


class TestLogger:
    """Testes para a configuração de logging."""

    def test_setup_writes_terminal_and_file(self, tmp_path):
        """Testa os dois handlers instalados."""
        # Configura
        stream = io.StringIO()

        # Executa
        app_logger = setup_logging("DEBUG", tmp_path, stream=stream)
        logging.getLogger("voxfield-grid").info("mensagem de teste")

        # Verifica
        assert app_logger.name == "voxfield-app"
        assert "mensagem de teste" in stream.getvalue()
        log_files = list(tmp_path.glob("voxfield_*.log"))
        assert len(log_files) == 1
        for handler in logging.getLogger().handlers:
            handler.flush()
        content = log_files[0].read_text(encoding="utf-8")
        assert "voxfield-grid - INFO - mensagem de teste" in content
        # Arquivo sem códigos de cor
        assert "\x1b[" not in content

    def test_repeated_setup_replaces_handlers(self):
        """Testa que chamadas repetidas não duplicam handlers."""
        setup_logging("INFO")
        setup_logging("WARNING")

        ours = [h for h in logging.getLogger().handlers if getattr(h, "_voxfield", False)]
        assert len(ours) == 1
        assert logging.getLogger().level == logging.WARNING

    def test_colored_formatter_symbols(self):
        """Testa símbolo ASCII e nome do componente na saída colorida."""
        formatter = ColoredFormatter("%(message)s", use_unicode=False)
        record = logging.LogRecord("voxfield-trainer", logging.WARNING, __file__, 1, "cuidado", None, None)

        text = formatter.format(record)

        assert "[W] WARNING" in text
        assert "voxfield-trainer" in text
        assert "cuidado" in text


class TestPerformanceMonitor:
    """Testes para o monitor de desempenho."""

    def test_record_and_statistics(self):
        """Testa contagem, média e percentis."""
        monitor = PerformanceMonitor()
        for t in (0.001, 0.002, 0.003, 0.004):
            monitor.record_time("op", t)

        stats = monitor.get_statistics("op")
        metrics = monitor.get_metrics("op")

        assert stats["count"] == 4
        assert stats["min"] == 0.001
        assert stats["max"] == 0.004
        assert metrics["total_time"] == pytest.approx(0.010)
        assert metrics["avg_time"] == pytest.approx(0.0025)

    def test_disabled_skips_times_but_counts(self):
        """Testa que contadores de trabalho não dependem do monitor de tempo."""
        monitor = PerformanceMonitor(enabled=False)

        monitor.record_time("op", 1.0)
        monitor.increment("traversal_visits", 5)
        monitor.increment("traversal_visits", 2)

        assert monitor.get_metrics("op")["count"] == 0
        assert monitor.get_counter("traversal_visits") == 7

    def test_slow_operation_warns(self, caplog):
        """Testa o alerta de operação lenta."""
        monitor = PerformanceMonitor()
        monitor.set_threshold("lenta", 1)

        with caplog.at_level(logging.WARNING, logger="voxfield-performance"):
            monitor.record_time("lenta", 0.0025)

        assert any("Operação lenta: lenta" in r.getMessage() for r in caplog.records)

    def test_measure_decorator(self):
        """Testa que o decorador registra a chamada e preserva o retorno."""
        @measure("dobro")
        def dobro(x):
            return 2 * x

        assert dobro(21) == 42
        assert performance_monitor.get_metrics("dobro")["count"] == 1

    def test_measure_records_on_exception(self):
        """Testa que o tempo é registrado mesmo com exceção."""
        @measure("falha")
        def falha():
            raise ValueError("erro")

        with pytest.raises(ValueError):
            falha()
        assert performance_monitor.get_metrics("falha")["count"] == 1

    def test_reset(self):
        """Testa a limpeza de tempos e contadores."""
        monitor = PerformanceMonitor()
        monitor.record_time("op", 0.1)
        monitor.increment("x")

        monitor.reset_stats()

        assert monitor.get_stats() == {"operations": {}, "counters": {}}


class TestMemoryCache:
    """Testes para o cache LRU."""

    def test_set_get(self):
        """Testa o armazenamento básico e as estatísticas."""
        cache = MemoryCache(max_size=4)
        cache.set("a", 1)

        assert cache.get("a") == 1
        assert cache.get("b") is None
        assert cache.hit_rate == 0.5

    def test_lru_eviction(self):
        """Testa o descarte do item menos usado."""
        cache = MemoryCache(max_size=2)
        cache.set("a", 1)
        cache.set("b", 2)
        cache.get("a")

        cache.set("c", 3)

        assert "a" in cache
        assert "b" not in cache
        assert cache.get_stats()["evictions"] == 1

    def test_ttl_expiration(self, mocker):
        """Testa a expiração por tempo com relógio simulado."""
        clock = mocker.patch("utils.cache.time.monotonic", return_value=100.0)
        cache = MemoryCache(max_size=4, ttl=10.0)
        cache.set("a", 1)

        clock.return_value = 105.0
        assert cache.get("a") == 1
        clock.return_value = 111.0
        assert cache.get("a") is None


class TestKeyScanCache:
    """Testes para o cache de key-scans."""

    def test_put_get_release(self):
        """Testa a liberação de todas as key-scans de um submapa."""
        cache = KeyScanCache(max_size=16)
        points = np.zeros((3, 3))
        origin = np.array([0.0, 0.0, 1.5])
        cache.put_scan(0, 1, points, origin)
        cache.put_scan(0, 5, points, origin)
        cache.put_scan(1, 7, points, origin)

        removed = cache.release_submap(0)

        assert removed == 2
        assert cache.get_scan(0, 1) is None
        stored_points, stored_origin = cache.get_scan(1, 7)
        assert stored_points is points
        assert stored_origin is origin
