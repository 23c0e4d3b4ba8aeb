"""
Cache LRU para os pontos estáticos das key-scans.

Durante a vida de um submapa, os pontos estáticos (já filtrados pela remoção
dinâmica) de cada key-scan ficam em memória até o replay. Se o cache
transbordar, a key-scan descartada fica fora do replay.
"""

import time
import logging
import threading
from collections import OrderedDict
from typing import Any, Dict, Generic, Hashable, Iterator, List, Optional, Tuple, TypeVar

K = TypeVar('K', bound=Hashable)
V = TypeVar('V')

logger = logging.getLogger('voxfield-cache')


class MemoryCache(Generic[K, V]):
    """
    Cache LRU com expiração opcional por tempo.

    Atributos:
        max_size: Número máximo de itens (0 = ilimitado)
        ttl: Tempo de vida em segundos (None = sem expiração)
    """

    def __init__(self, max_size: int = 256, ttl: Optional[float] = None):
        self.max_size = max_size
        self.ttl = ttl
        self._cache: "OrderedDict[K, V]" = OrderedDict()
        self._expirations: Dict[K, float] = {}
        self._lock = threading.RLock()
        self._hits = 0
        self._misses = 0
        self._evictions = 0

        logger.debug(f"Cache inicializado com tamanho máximo {max_size} e TTL {ttl}")

    def get(self, key: K) -> Optional[V]:
        """Recupera um item, marcando-o como usado recentemente."""
        with self._lock:
            self._cleanup_expired()
            if key not in self._cache:
                self._misses += 1
                return None
            self._cache.move_to_end(key)
            self._hits += 1
            return self._cache[key]

    def set(self, key: K, value: V) -> None:
        """Adiciona ou atualiza um item, descartando o menos usado se necessário."""
        with self._lock:
            if key in self._cache:
                self._cache.pop(key)
            self._cache[key] = value
            if self.ttl is not None:
                self._expirations[key] = time.monotonic() + self.ttl

            if self.max_size > 0 and len(self._cache) > self.max_size:
                oldest_key, _ = self._cache.popitem(last=False)
                self._expirations.pop(oldest_key, None)
                self._evictions += 1
                logger.warning(f"Cache cheio: item {oldest_key!r} descartado")

    def invalidate(self, key: K) -> None:
        with self._lock:
            self._cache.pop(key, None)
            self._expirations.pop(key, None)

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()
            self._expirations.clear()

    def keys(self) -> List[K]:
        with self._lock:
            self._cleanup_expired()
            return list(self._cache.keys())

    def __contains__(self, key: object) -> bool:
        with self._lock:
            self._cleanup_expired()
            return key in self._cache

    def __iter__(self) -> Iterator[K]:
        return iter(self.keys())

    def _cleanup_expired(self) -> None:
        if self.ttl is None:
            return
        now = time.monotonic()
        for key in [k for k, exp in self._expirations.items() if exp <= now]:
            self._cache.pop(key, None)
            self._expirations.pop(key, None)

    @property
    def size(self) -> int:
        with self._lock:
            return len(self._cache)

    @property
    def hit_rate(self) -> float:
        total = self._hits + self._misses
        return self._hits / total if total else 0.0

    def get_stats(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "size": len(self._cache),
                "max_size": self.max_size,
                "ttl": self.ttl,
                "hits": self._hits,
                "misses": self._misses,
                "evictions": self._evictions,
                "hit_rate": self.hit_rate
            }


class KeyScanCache(MemoryCache[Tuple[int, int], Any]):
    """Pontos estáticos e origem do sensor (mundo) das key-scans, indexados por (submapa, quadro)."""

    def put_scan(self, submap_id: int, frame_index: int, static_points_world: Any, sensor_world: Any) -> None:
        self.set((submap_id, frame_index), (static_points_world, sensor_world))

    def get_scan(self, submap_id: int, frame_index: int) -> Optional[Tuple[Any, Any]]:
        """Par (pontos, origem do sensor), ou None se a entrada saiu do cache."""
        return self.get((submap_id, frame_index))

    def release_submap(self, submap_id: int) -> int:
        """Remove todas as key-scans de um submapa; retorna quantas saíram."""
        keys = [key for key in self.keys() if key[0] == submap_id]
        for key in keys:
            self.invalidate(key)
        return len(keys)
