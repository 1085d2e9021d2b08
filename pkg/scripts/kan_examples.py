"""KAN pipeline on the multivariate examples with planted edge oracles.

Trains the reduced architectures directly, fits each edge with an oracle
that always proposes the expected edge family, composes and simplifies.
Pass ``--search`` to start from the wide [d,4,4,1] network instead.
"""

import argparse
import logging
import time

from plotsr.evolve import GaConfig
from plotsr.kan import KanTrainConfig
from plotsr.llmclient import LlmClient, ScriptedBackend
from plotsr.pipeline import KanPipelineConfig, run_kan_pipeline
from plotsr.suites import find_entry

LOG_EDGE = "oracle:1:0:params[0]*np.log(x) + params[1]"
CASES = {
    "example2": ((2, 1, 1), "oracle:1:0:params[0]*np.exp(params[1]*x)"),
    "example3": ((3, 1, 1), "oracle:1:0:params[0]*np.exp(params[1]*x) + params[2]"),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", default=list(CASES))
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--search", action="store_true")
    ap.add_argument("--proposals", default="tests/fixtures/example2_proposals.json",
                    help="scripted simplification replies; empty string disables the LLM stage")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    for name in a.names:
        widths, outer = CASES[name]
        data = find_entry(name).dataset()
        cfg = KanPipelineConfig(
            widths=(widths[0], 4, 4, 1) if a.search else widths,
            train=KanTrainConfig(steps=a.steps, l1=1e-2),
            auto=a.search,
            ga=GaConfig(population_size=3, generations=2, threshold=1e-7),
        )
        backends = {(0, i, 0): LOG_EDGE for i in range(widths[0])}
        backends[(1, 0, 0)] = outer
        simplify = LlmClient(ScriptedBackend(a.proposals)) if a.proposals else None
        t0 = time.perf_counter()
        res = run_kan_pipeline(data, cfg, backends, simplify)
        print(f"{name}: widths {res.architecture.widths}")
        print(f"  composed  {res.composed.source}")
        print(f"  final     {res.source}  loss {res.score:.3g}  ({time.perf_counter() - t0:.1f}s)")
        if res.simplified.warning:
            print(f"  warning   {res.simplified.warning}")


if __name__ == "__main__":
    main()
