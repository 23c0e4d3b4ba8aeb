"""
Módulos de domínio do Voxfield: varreduras, submapas, grade esparsa,
campo implícito, treino, malhas, avaliação e mundos sintéticos.
"""
