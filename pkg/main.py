#!/usr/bin/env python3
"""
Voxfield - Mapeamento LiDAR incremental com campo implícito por submapas.

Subcomandos:
    map       Reconstrói a malha a partir de varreduras e poses
    eval      Compara uma malha com a referência
    simulate  Gera varreduras sintéticas de uma cena
    bench     Mede o custo por quadro (submapas ou monolítico)
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from core.evaluator import DEFAULT_THRESHOLD_CM, EmptyMeshError
from core.pipeline import PipelineError, cmd_bench, cmd_eval, cmd_map, cmd_simulate
from core.synth_world import LidarSpec
from utils.config import ConfigError, load_config
from utils.logger import setup_logging
from utils.performance import performance_monitor

__version__ = "1.0.0"

logger = logging.getLogger("voxfield-app")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxfield", description="Mapeamento LiDAR com submapas neurais")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING ou ERROR")
    parser.add_argument("--log-dir", default=None, help="Diretório do log diário")
    parser.add_argument("--quiet", action="store_true", help="Sem barra de progresso")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("map", "bench"):
        p = sub.add_parser(name, help="Mapeamento" if name == "map" else "Custo por quadro")
        p.add_argument("--scans", required=True, help="Diretório com as varreduras")
        p.add_argument("--poses", required=True, help="Arquivo de poses (formato KITTI)")
        p.add_argument("--out", required=True, help="Diretório de saída")
        p.add_argument("--config", default=None, help="Arquivo chave = valor")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=("submap", "monolithic"), default="submap")
        p.add_argument("--precision", choices=("float32", "float64"), default=None)
        p.add_argument("--no-dynamic-removal", action="store_true")
        p.add_argument("--no-alignment", action="store_true")
        p.add_argument("--no-keyscan", action="store_true")

    p = sub.add_parser("eval", help="Métricas de reconstrução")
    p.add_argument("pred", help="Malha PLY reconstruída")
    p.add_argument("gt", help="Malha PLY de referência")
    p.add_argument("--threshold-cm", type=float, default=DEFAULT_THRESHOLD_CM)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", action="store_true", help="Recorta a referência à caixa da predição")
    p.add_argument("--out", default=None, help="CSV com o relatório")

    p = sub.add_parser("simulate", help="Varreduras sintéticas")
    p.add_argument("--scene", required=True, help="Arquivo de cena")
    p.add_argument("--trajectory", required=True, help="Poses do sensor (formato KITTI)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-dt", type=float, default=0.1)
    p.add_argument("--gt-resolution", type=float, default=0.1)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--horizontal", type=int, default=720)
    p.add_argument("--fov-down", type=float, default=-15.0)
    p.add_argument("--fov-up", type=float, default=15.0)
    p.add_argument("--max-range", type=float, default=50.0)
    p.add_argument("--noise", type=float, default=0.0, help="Desvio do ruído de alcance (m)")
    return parser


class VoxfieldApp:
    """
    Aplicação de linha de comando do Voxfield.
    """

    def __init__(self, argv: Optional[List[str]] = None):
        load_dotenv()
        self.args = build_parser().parse_args(argv)
        level = self.args.log_level or os.getenv("VOXFIELD_LOG_LEVEL", "INFO")
        setup_logging(level, self.args.log_dir)
        self._setup_performance_monitoring()
        sys.excepthook = self.handle_exception

    def _setup_performance_monitoring(self):
        """
        Configura o monitoramento de desempenho com base nas variáveis de ambiente
        """
        monitoring_enabled = os.getenv("PERFORMANCE_MONITORING", "true").lower() == "true"
        slow_threshold = int(os.getenv("PERFORMANCE_SLOW_OPERATION_THRESHOLD", "500"))
        log_level_name = os.getenv("PERFORMANCE_LOG_LEVEL", "WARNING")
        logging.getLogger("voxfield-performance").setLevel(getattr(logging, log_level_name, logging.WARNING))

        if monitoring_enabled:
            performance_monitor.enable()
            performance_monitor.set_threshold("process_frame", slow_threshold)
            performance_monitor.set_threshold("train_frame", slow_threshold)
            performance_monitor.set_threshold("train_overlap", slow_threshold * 4)
            performance_monitor.set_threshold("replay_submap", slow_threshold * 10)
            performance_monitor.set_threshold("extract_mesh", slow_threshold * 10)
            logger.debug(f"Monitoramento de desempenho ativado (limite: {slow_threshold}ms)")
        else:
            performance_monitor.disable()

    def _config(self):
        args = self.args
        config = load_config(args.config)
        overrides = {"rng_seed": args.seed, "precision": args.precision}
        if args.no_dynamic_removal:
            overrides["dynamic_removal"] = False
        if args.no_alignment:
            overrides["overlap_alignment"] = False
        if args.no_keyscan:
            overrides["keyscan_replay"] = False
        return config.with_overrides(**overrides)

    def run(self) -> int:
        args = self.args
        try:
            if args.command == "map":
                manifest = cmd_map(args.scans, args.poses, self._config(), args.out, args.mode, args.quiet)
                logger.info(f"Malha gravada em {manifest.outputs['mesh']}")
            elif args.command == "bench":
                cmd_bench(args.scans, args.poses, self._config(), args.out, args.mode, args.quiet)
            elif args.command == "eval":
                cmd_eval(args.pred, args.gt, args.threshold_cm, args.samples, args.seed, args.crop, args.out)
            elif args.command == "simulate":
                lidar = LidarSpec(
                    channels=args.channels, horizontal=args.horizontal, fov_down=args.fov_down,
                    fov_up=args.fov_up, max_range=args.max_range, noise_sigma=args.noise
                )
                cmd_simulate(args.scene, args.trajectory, args.out, lidar, args.seed,
                             args.frame_dt, args.gt_resolution)
            return 0
        except (PipelineError, ConfigError, EmptyMeshError, ValueError, OSError) as e:
            logger.error(f"{args.command}: {e}")
            return 1

    def handle_exception(self, exc_type, exc_value, exc_traceback):
        """
        Registra exceções não tratadas
        """
        if issubclass(exc_type, KeyboardInterrupt):
            sys.__excepthook__(exc_type, exc_value, exc_traceback)
            return
        logger.error("Exceção não tratada:", exc_info=(exc_type, exc_value, exc_traceback))


def main(argv: Optional[List[str]] = None) -> int:
    """
    Função principal do aplicativo
    """
    return VoxfieldApp(argv).run()


if __name__ == "__main__":
    sys.exit(main())
