"""Noise sweep: loss and returned expression against epsilon."""

import argparse

from plotsr import evolve
from plotsr.bench import BenchConfig, run_benchmark
from plotsr.suites import NOISE_FUNCTIONS, NoiseSpec, find_entry


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--eps", type=float, nargs="+", default=[0.0, 0.01, 0.03, 0.05])
    ap.add_argument("--fn", nargs="+", default=list(NOISE_FUNCTIONS))
    ap.add_argument("--backend", default="oracle")
    ap.add_argument("--pop", type=int, default=10)
    ap.add_argument("--gens", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    entries = [find_entry(n) for n in a.fn]
    ga = evolve.GaConfig(population_size=a.pop, generations=a.gens, seed=a.seed)
    print(f"{'fn':6} {'eps':>6}  {'loss':>10}  returned")
    for eps in a.eps:
        rep = run_benchmark("noise", BenchConfig(ga=ga, backend=a.backend, noise=NoiseSpec(eps, a.seed)), None, entries)
        for e, row in zip(entries, rep.rows):
            print(f"{e.name:6} {eps:6.3f}  {row.loss:10.3g}  {row.returned or row.error}")


if __name__ == "__main__":
    main()
