"""
Configuração de logging do Voxfield.

Terminal com cores e símbolos por nível (colorama) e arquivo diário sem cores.
"""

import os
import sys
import logging
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

import colorama

colorama.init()


class ColoredFormatter(logging.Formatter):
    """
    Formatador que adiciona cores e símbolos para diferentes níveis de log.
    """

    COLORS = {
        'DEBUG': colorama.Fore.CYAN,
        'INFO': colorama.Fore.GREEN,
        'WARNING': colorama.Fore.YELLOW,
        'ERROR': colorama.Fore.RED,
        'CRITICAL': colorama.Fore.RED + colorama.Style.BRIGHT
    }

    # ASCII para compatibilidade
    SYMBOLS = {
        'DEBUG': '[D]',
        'INFO': '[I]',
        'WARNING': '[W]',
        'ERROR': '[E]',
        'CRITICAL': '[C]'
    }

    UNICODE_SYMBOLS = {
        'DEBUG': '🔍',
        'INFO': '✓',
        'WARNING': '⚠️',
        'ERROR': '❌',
        'CRITICAL': '🔥'
    }

    # Prefixos mais específicos primeiro
    COMPONENT_COLORS = {
        'voxfield-app': colorama.Fore.MAGENTA + colorama.Style.BRIGHT,
        'voxfield-pipeline': colorama.Fore.MAGENTA,
        'voxfield-submap': colorama.Fore.BLUE + colorama.Style.BRIGHT,
        'voxfield-grid': colorama.Fore.BLUE,
        'voxfield-dynamic': colorama.Fore.YELLOW + colorama.Style.BRIGHT,
        'voxfield-trainer': colorama.Fore.CYAN + colorama.Style.BRIGHT,
        'voxfield-field': colorama.Fore.CYAN,
        'voxfield-mesher': colorama.Fore.GREEN + colorama.Style.BRIGHT,
        'voxfield-eval': colorama.Fore.GREEN,
        'voxfield-synth': colorama.Fore.WHITE + colorama.Style.BRIGHT,
        'voxfield-performance': colorama.Fore.RED + colorama.Style.BRIGHT
    }

    def __init__(self, fmt=None, datefmt=None, style='%', validate=True, *, use_unicode=None):
        super().__init__(fmt, datefmt, style, validate)
        self.use_unicode = use_unicode
        if self.use_unicode is None:
            # Terminais modernos do Windows expõem TERM_PROGRAM ou WT_SESSION
            if sys.platform == 'win32':
                self.use_unicode = bool(os.environ.get('TERM_PROGRAM') or os.environ.get('WT_SESSION'))
            else:
                self.use_unicode = True

    def format(self, record):
        try:
            levelname = record.levelname
            symbol_dict = self.UNICODE_SYMBOLS if self.use_unicode else self.SYMBOLS
            symbol = symbol_dict.get(levelname, '')
            color = self.COLORS.get(levelname, colorama.Fore.WHITE)

            component_color = colorama.Fore.WHITE
            for component, comp_color in self.COMPONENT_COLORS.items():
                if record.name.startswith(component):
                    component_color = comp_color
                    break

            colored_levelname = f"{color}{symbol} {levelname}{colorama.Style.RESET_ALL}"
            colored_name = f"{component_color}{record.name}{colorama.Style.RESET_ALL}"
            asctime = self.formatTime(record, self.datefmt)

            message = record.getMessage()
            if record.exc_info:
                message = f"{message}\n{self.formatException(record.exc_info)}"
            if record.levelno >= logging.ERROR:
                message = f"{color}{message}{colorama.Style.RESET_ALL}"

            return f"{asctime} | {colored_name} | {colored_levelname} | {message}"
        except Exception:
            return f"{record.name} - {record.levelname} - {record.getMessage()}"


def setup_logging(
    level: Union[int, str] = logging.INFO,
    log_dir: Optional[Union[str, Path]] = None,
    stream=None
) -> logging.Logger:
    """
    Instala os handlers de terminal e (opcionalmente) de arquivo no logger raiz.

    Chamadas repetidas substituem os handlers instalados anteriormente.

    Args:
        level: Nível mínimo (nome ou número)
        log_dir: Diretório do arquivo diário ``voxfield_YYYYMMDD.log``; None desativa
        stream: Destino do handler de terminal (padrão: stderr)

    Returns:
        Logger principal ``voxfield-app``
    """
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        if getattr(handler, '_voxfield', False):
            root_logger.removeHandler(handler)
            handler.close()
    root_logger.setLevel(level)

    fmt = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    terminal_handler = logging.StreamHandler(stream or sys.stderr)
    terminal_handler.setFormatter(ColoredFormatter(fmt))
    terminal_handler._voxfield = True
    root_logger.addHandler(terminal_handler)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / f"voxfield_{datetime.now().strftime('%Y%m%d')}.log"
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(fmt))
        file_handler._voxfield = True
        root_logger.addHandler(file_handler)

    return logging.getLogger("voxfield-app")
