"""
Monitoramento de desempenho das etapas do mapeamento.

Mede o tempo de cada etapa decorada com ``measure`` e acumula contadores de
trabalho determinísticos (voxels visitados, amostras), usados pelo benchmark
para comparar o modo com submapas e o modo monolítico.
"""

import time
import logging
import functools
import statistics
from collections import defaultdict, deque
from typing import Any, Callable, Deque, Dict, TypeVar, cast

logger = logging.getLogger("voxfield-performance")

F = TypeVar('F', bound=Callable[..., Any])

# Janela usada nos percentis
HISTORY_SIZE = 500


class PerformanceMonitor:
    """
    Registro de tempos de execução e contadores por operação.

    Atributos:
        _times: Últimos tempos (s) por operação
        _totals: Tempo acumulado e contagem por operação
        _counters: Contadores inteiros de trabalho
        _thresholds: Limite de alerta por operação (s)
    """

    def __init__(self, enabled: bool = True, default_threshold_ms: int = 500):
        self._times: Dict[str, Deque[float]] = defaultdict(lambda: deque(maxlen=HISTORY_SIZE))
        self._totals: Dict[str, Dict[str, float]] = defaultdict(lambda: {"count": 0, "total_time": 0.0})
        self._counters: Dict[str, int] = defaultdict(int)
        self._default_threshold = default_threshold_ms / 1000.0
        self._thresholds: Dict[str, float] = {}
        self._enabled = enabled

    def enable(self) -> None:
        self._enabled = True

    def disable(self) -> None:
        self._enabled = False

    def is_enabled(self) -> bool:
        return self._enabled

    def set_threshold(self, operation: str, threshold_ms: float) -> None:
        """Define o limite de alerta (ms) de uma operação."""
        self._thresholds[operation] = threshold_ms / 1000.0

    def get_threshold(self, operation: str) -> float:
        return self._thresholds.get(operation, self._default_threshold)

    def record_time(self, operation: str, time_taken: float) -> None:
        """
        Registra o tempo de execução de uma operação e alerta se for lenta.

        Args:
            operation: Nome da operação
            time_taken: Tempo de execução em segundos
        """
        if not self._enabled:
            return

        self._times[operation].append(time_taken)
        totals = self._totals[operation]
        totals["count"] += 1
        totals["total_time"] += time_taken

        threshold = self.get_threshold(operation)
        if time_taken <= threshold:
            return

        time_ms = time_taken * 1000
        threshold_ms = threshold * 1000
        percentage = (time_ms / threshold_ms - 1) * 100
        # Mais de 3x o limite sobe para ERROR
        log_level = logging.ERROR if percentage > 200 else logging.WARNING
        avg_ms = totals["total_time"] / totals["count"] * 1000
        logger.log(
            log_level,
            f"Operação lenta: {operation} levou {time_ms:.2f}ms "
            f"(limite: {threshold_ms:.2f}ms, +{percentage:.1f}%, média: {avg_ms:.2f}ms)"
        )

    def increment(self, counter: str, amount: int = 1) -> None:
        """Soma ``amount`` a um contador de trabalho (conta mesmo com o monitor desligado)."""
        self._counters[counter] += int(amount)

    def get_counter(self, counter: str) -> int:
        return self._counters.get(counter, 0)

    def get_metrics(self, operation: str) -> Dict[str, float]:
        """Contagem, tempo total e médio (s) de uma operação."""
        if operation not in self._totals:
            return {"count": 0, "total_time": 0.0, "avg_time": 0.0}
        totals = self._totals[operation]
        count = int(totals["count"])
        return {
            "count": count,
            "total_time": totals["total_time"],
            "avg_time": totals["total_time"] / count if count else 0.0
        }

    def get_statistics(self, operation: str) -> Dict[str, float]:
        """
        Estatísticas da janela recente de uma operação.

        Returns:
            Dicionário com contagem, média, mediana, mínimo, máximo, p90, p95 e p99 (s)
        """
        times = list(self._times.get(operation, ()))
        if not times:
            return {key: 0.0 for key in ("count", "avg", "median", "min", "max", "p90", "p95", "p99")}

        ordered = sorted(times)
        count = len(ordered)

        def percentile(q: float) -> float:
            idx = int(count * q)
            return ordered[idx - 1] if idx > 0 else ordered[0]

        return {
            "count": count,
            "avg": statistics.mean(ordered),
            "median": statistics.median(ordered),
            "min": ordered[0],
            "max": ordered[-1],
            "p90": percentile(0.90),
            "p95": percentile(0.95),
            "p99": percentile(0.99)
        }

    def get_stats(self) -> Dict[str, Any]:
        """Resumo de todas as operações e contadores."""
        return {
            "operations": {name: self.get_metrics(name) for name in sorted(self._totals)},
            "counters": dict(sorted(self._counters.items()))
        }

    def reset_stats(self) -> None:
        self._times.clear()
        self._totals.clear()
        self._counters.clear()

    def log_statistics(self, operation: str) -> None:
        """Registra no log as estatísticas de uma operação."""
        if not self._enabled:
            return
        stats = self.get_statistics(operation)
        if not stats["count"]:
            return

        ms = {key: value * 1000 for key, value in stats.items() if key != "count"}
        logger.info(
            f"📊 Estatísticas para '{operation}' ({int(stats['count'])} execuções):\n"
            f"   • Média: {ms['avg']:.2f}ms | Mediana: {ms['median']:.2f}ms\n"
            f"   • Min: {ms['min']:.2f}ms | Max: {ms['max']:.2f}ms\n"
            f"   • p90: {ms['p90']:.2f}ms | p95: {ms['p95']:.2f}ms | p99: {ms['p99']:.2f}ms"
        )

        threshold_ms = self.get_threshold(operation) * 1000
        if ms["median"] > threshold_ms:
            logger.warning(
                f"⚠️ A operação '{operation}' está consistentemente acima do limite "
                f"({ms['median']:.2f}ms > {threshold_ms:.2f}ms)"
            )


# Instância única usada pelos módulos
performance_monitor = PerformanceMonitor()


def measure(operation_name: str) -> Callable[[F], F]:
    """
    Decorador que registra o tempo de execução de uma função.

    Args:
        operation_name: Nome da operação para registro
    """
    def decorator(func: F) -> F:
        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            if not performance_monitor.is_enabled():
                return func(*args, **kwargs)
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                performance_monitor.record_time(operation_name, time.perf_counter() - start_time)
        return cast(F, wrapper)
    return decorator
