"""
Módulo de testes para o Voxfield.
"""
