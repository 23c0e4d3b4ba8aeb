#!/usr/bin/env python3
"""
Script para comparar o custo por quadro entre submapas e mapa monolítico.

Roda ``cmd_bench`` nos dois modos sobre a mesma sequência e imprime um
relatório com tempos e voxels visitados.
"""

import argparse
import logging
import statistics
import sys
from pathlib import Path
from typing import Dict, List, Sequence

from dotenv import load_dotenv

# Adiciona o diretório raiz ao path para importações
project_root = str(Path(__file__).parent.parent)
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from core.pipeline import FrameRecord, PipelineError, cmd_bench  # noqa: E402
from utils.config import ConfigError, load_config  # noqa: E402
from utils.logger import setup_logging  # noqa: E402
from utils.performance import performance_monitor  # noqa: E402

logger = logging.getLogger("voxfield-bench")

MODES = ("submap", "monolithic")


def summarize(records: Sequence[FrameRecord]) -> Dict[str, float]:
    """
    Estatísticas de uma execução.

    Args:
        records: Registros por quadro

    Returns:
        Médias e p95 de tempo e de voxels visitados
    """
    walls = sorted(r.wall_ms for r in records)
    visits = [r.visited_voxels for r in records]
    p95_index = min(len(walls) - 1, int(round(0.95 * (len(walls) - 1))))
    return {
        "frames": len(records),
        "wall_avg": statistics.mean(walls),
        "wall_median": statistics.median(walls),
        "wall_p95": walls[p95_index],
        "visits_avg": statistics.mean(visits),
        "visits_last": visits[-1],
    }


def generate_report(results: Dict[str, List[FrameRecord]]) -> None:
    """Imprime o relatório comparativo."""
    summaries = {mode: summarize(records) for mode, records in results.items()}

    print("\n" + "=" * 60)
    print(" " * 18 + "RELATÓRIO DE DESEMPENHO")
    print("=" * 60 + "\n")

    print(f"{'':30}" + "".join(f"{mode:>15}" for mode in summaries))
    rows = [
        ("Quadros", "frames", "{:>15.0f}"),
        ("Tempo médio (ms)", "wall_avg", "{:>15.1f}"),
        ("Tempo mediano (ms)", "wall_median", "{:>15.1f}"),
        ("Tempo p95 (ms)", "wall_p95", "{:>15.1f}"),
        ("Voxels visitados (média)", "visits_avg", "{:>15.0f}"),
        ("Voxels visitados (último)", "visits_last", "{:>15.0f}"),
    ]
    for title, key, fmt in rows:
        print(f"{title:30}" + "".join(fmt.format(s[key]) for s in summaries.values()))

    if set(summaries) == set(MODES):
        ratio = summaries["monolithic"]["wall_avg"] / max(summaries["submap"]["wall_avg"], 1e-9)
        growth = summaries["monolithic"]["visits_last"] / max(summaries["submap"]["visits_last"], 1)
        print()
        print(f"Monolítico / submapas (tempo)  {ratio:.2f}x")
        print(f"Monolítico / submapas (visitas no último quadro)  {growth:.2f}x")

    print("\n" + "=" * 60)


def main() -> int:
    """Função principal que executa a comparação."""
    parser = argparse.ArgumentParser(description="Custo por quadro: submapas vs. monolítico")
    parser.add_argument("--scans", required=True, help="Diretório com as varreduras")
    parser.add_argument("--poses", required=True, help="Arquivo de poses")
    parser.add_argument("--out", required=True, help="Diretório de saída")
    parser.add_argument("--config", default=None, help="Arquivo chave = valor")
    parser.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    args = parser.parse_args()

    load_dotenv()
    setup_logging("INFO")
    try:
        config = load_config(args.config)
        results = {}
        for mode in args.modes:
            performance_monitor.reset_stats()
            print(f"\nExecutando bench no modo {mode}...")
            results[mode] = cmd_bench(args.scans, args.poses, config, args.out, mode)
            performance_monitor.log_statistics("process_frame")
    except (PipelineError, ConfigError) as e:
        logger.error(f"Bench interrompido: {e}")
        return 1

    generate_report(results)
    return 0


if __name__ == "__main__":
    sys.exit(main())
