"""Run the univariate suite and write CSV/text reports.

    python3 scripts/run_table1.py --backend oracle --out runs/table1
    python3 scripts/run_table1.py --backend live --pop 25 --gens 10
"""

import argparse
import logging

from plotsr import evolve
from plotsr.bench import BenchConfig, run_benchmark
from plotsr.llmclient import LlmConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--suite", default="table1", help="table1 or special")
    ap.add_argument("--backend", default="oracle")
    ap.add_argument("--model", default=LlmConfig.model)
    ap.add_argument("--pop", type=int, default=25)
    ap.add_argument("--gens", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--out", default="runs/table1")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    ga = evolve.GaConfig(population_size=a.pop, generations=a.gens, seed=a.seed,
                         llm=LlmConfig(model=a.model, backend=a.backend))
    report = run_benchmark(a.suite, BenchConfig(ga=ga, backend=a.backend, parallel=a.parallel), a.out)
    print(report.to_table(), end="")


if __name__ == "__main__":
    main()
