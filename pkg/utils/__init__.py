"""
Utilitários do Voxfield: configuração, logging, desempenho e cache.
"""
