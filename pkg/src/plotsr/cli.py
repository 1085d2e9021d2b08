"""Command line entry points: fit1d, fitnd, bench, noise."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import evolve
from .bench import NOISY_THRESHOLD, BenchConfig, ReportRow, BenchmarkReport, entry_backend, run_benchmark
from .compose import SimplifyConfig
from .kan import KanModel, KanTrainConfig
from .llmclient import LlmClient, LlmConfig, make_backend
from .numfit import FitConfig, ScoreConfig
from .pipeline import KanPipelineConfig, run_kan_pipeline, search_architecture
from .plotgen import render_xy
from .suites import NOISE_FUNCTIONS, NoiseSpec, add_noise, find_entry, load_dataset, noise_sigma

log = logging.getLogger("plotsr")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_manifest(out: Path, command: str, argv, config, llm: LlmConfig, calls: int, result: dict) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": asdict(config),
        "backend": llm.backend,
        "model": llm.model,
        "llm_calls": calls,
        "result": result,
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _llm_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default="live", help="live | scripted:<path> | oracle[:<p>:<seed>[:<target>]]")
    p.add_argument("--model", default=LlmConfig.model)
    p.add_argument("--base-url", default=LlmConfig.base_url)
    p.add_argument("--max-in-flight", type=int, default=LlmConfig.max_in_flight)


def _ga_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pop", type=int, default=25)
    p.add_argument("--gens", type=int, default=10)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--elitism", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--prompt", default="default", help="default | special | special-preferred")
    _llm_args(p)


def _llm_config(a) -> LlmConfig:
    return LlmConfig(base_url=a.base_url, model=a.model, max_in_flight=a.max_in_flight, backend=a.backend)


def _ga_config(a, threshold_default: float = 1e-5) -> evolve.GaConfig:
    return evolve.GaConfig(
        population_size=a.pop,
        generations=a.gens,
        temperature=a.temp,
        threshold=a.threshold if a.threshold is not None else threshold_default,
        elitism=a.elitism,
        seed=a.seed,
        prompt=a.prompt,
        score=ScoreConfig(alpha=a.alpha),
        fit=FitConfig(restarts=a.restarts, seed=a.seed),
        llm=_llm_config(a),
    )


def _univariate_data(a):
    if a.suite_fn:
        entry = find_entry(a.suite_fn)
        return entry.dataset(), entry
    if not a.csv:
        raise SystemExit("give a CSV file or --suite-fn NAME")
    return load_dataset(a.csv), None


def cmd_fit1d(a) -> int:
    data, entry = _univariate_data(a)
    if data.d != 1:
        raise SystemExit("fit1d needs univariate data; use fitnd")
    noisy = a.noise_eps > 0
    data = add_noise(data, NoiseSpec(a.noise_eps, a.seed))
    cfg = _ga_config(a, NOISY_THRESHOLD if noisy else 1e-5)
    backend = entry_backend(a.backend, entry, cfg, 0) if entry is not None else make_backend(a.backend, cfg.llm)
    client = LlmClient(backend, cfg.llm)
    best, hist = evolve.run(data, cfg, client)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    x = data.x
    grid = np.linspace(x.min(), x.max(), 1000)
    fit = best.expression.compile()(grid[:, None], best.params)
    (out / "fit.png").write_bytes(render_xy(x, data.targets, cfg.plot, overlay=(grid, fit)))
    (out / "history.json").write_text(hist.to_json() + "\n")
    result = {"source": best.fitted_source(None), "loss": best.score, "reported_score": 0.0 - best.score,
              "generations_run": len(hist.generations) - 1, "stopped_early": hist.stopped_early}
    write_manifest(out, "fit1d", a.argv, cfg, cfg.llm, client.calls, result)
    print(f"{result['source']}\nloss {best.score:.6g}  (reported score {result['reported_score']:.6g})")
    return 0


def _report_text(steps) -> str:
    lines = []
    for s in steps:
        r = s.report
        lines.append(f"widths {s.widths}: val mse {s.val_mse:.3g}, suggested {r.suggested_widths}")
        for ell, sc in enumerate(r.scores):
            lines.append(f"  layer {ell} edge scores:\n" + "\n".join("    " + " ".join(f"{v:8.4f}" for v in row) for row in sc))
        if r.linear_edges():
            lines.append(f"  near-linear edges: {r.linear_edges()}")
        if r.strippable_layers:
            lines.append(f"  all-linear layers: {r.strippable_layers}")
    return "\n".join(lines)


def cmd_fitnd(a) -> int:
    if a.suite_fn:
        data = find_entry(a.suite_fn).dataset()
    elif a.csv:
        data = load_dataset(a.csv)
    else:
        raise SystemExit("give a CSV file or --suite-fn NAME")
    widths = tuple(int(w) for w in a.widths.split(","))
    if widths[0] != data.d:
        raise SystemExit(f"first width must equal the input dimension {data.d}")
    ga = replace(_ga_config(a, 1e-7), population_size=a.pop, generations=a.gens)
    cfg = KanPipelineConfig(
        widths=widths,
        train=KanTrainConfig(steps=a.steps, lr=a.lr, l1=a.l1, seed=a.seed),
        prune_threshold=a.prune_threshold,
        auto=a.auto,
        ga=ga,
        simplify=SimplifyConfig(rounds=a.rounds, n_proposals=a.proposals, seed=a.seed),
        seed=a.seed,
    )
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model = KanModel.load(a.load_model) if a.load_model else None
    if model is None:
        arch = search_architecture(data, cfg)
        model = arch.model
        print(_report_text(arch.steps))
        model.save(out / "kan.json")
    if a.report_only:
        write_manifest(out, "fitnd", a.argv, cfg, ga.llm, 0, {"widths": list(model.widths)})
        return 0
    simplify_backend = a.simplify_backend or a.backend
    result = run_kan_pipeline(data, cfg, a.backend, simplify_backend, model=model)
    payload = {
        "widths": list(model.widths),
        "composed": result.composed.source,
        "source": result.source,
        "loss": result.score,
        "reported_score": 0.0 - result.score,
        "warning": result.simplified.warning,
        "edges": {str(k): f.expression.source for k, f in result.edge_fits.items()},
    }
    write_manifest(out, "fitnd", a.argv, cfg, ga.llm, result.llm_calls, payload)
    print(f"{result.source}\nloss {result.score:.6g}")
    return 0


def _bench_config(a, noise: NoiseSpec = NoiseSpec()) -> BenchConfig:
    return BenchConfig(ga=_ga_config(a), backend=a.backend, noise=noise, parallel=a.parallel, threshold=a.threshold)


def cmd_bench(a) -> int:
    cfg = _bench_config(a)
    report = run_benchmark(a.suite, cfg, a.out)
    print(report.to_table(), end="")
    calls = sum(r.llm_calls for r in report.rows)
    write_manifest(Path(a.out), "bench", a.argv, cfg, cfg.ga.llm, calls, {"rows": len(report.rows)})
    return 0


def cmd_noise(a) -> int:
    names = a.fn or list(NOISE_FUNCTIONS)
    entries = [find_entry(n) for n in names]
    rows: list[ReportRow] = []
    for eps in a.eps:
        cfg = _bench_config(a, NoiseSpec(eps, a.seed))
        rep = run_benchmark("noise", cfg, None, entries)
        for entry, row in zip(entries, rep.rows):
            row.name = f"{entry.name}@eps={eps:g}"
            rows.append(row)
        for entry in entries:
            log.info("%s eps=%g sigma=%.6g", entry.name, eps, noise_sigma(entry.dataset(), NoiseSpec(eps)))
    report = BenchmarkReport("noise", rows)
    report.write(a.out)
    print(report.to_table(), end="")
    write_manifest(Path(a.out), "noise", a.argv, _bench_config(a), _llm_config(a),
                   sum(r.llm_calls for r in rows), {"eps": a.eps, "rows": len(rows)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plotsr", description="LLM-guided symbolic regression from plots.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit1d", help="univariate genetic search")
    p.add_argument("csv", nargs="?")
    p.add_argument("--suite-fn", help="built-in entry, e.g. f03 or table1/f03")
    p.add_argument("--noise-eps", type=float, default=0.0)
    p.add_argument("--out", default="runs/fit1d")
    _ga_args(p)
    p.set_defaults(func=cmd_fit1d)

    p = sub.add_parser("fitnd", help="multivariate KAN pipeline")
    p.add_argument("csv", nargs="?")
    p.add_argument("--suite-fn")
    p.add_argument("--widths", default="2,4,4,1")
    p.add_argument("--auto", action="store_true", help="retrain with suggested widths until they stop changing")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--l1", type=float, default=1e-2)
    p.add_argument("--prune-threshold", type=float, default=1e-2)
    p.add_argument("--report-only", action="store_true", help="train, prune and report; skip edge fitting")
    p.add_argument("--load-model", help="KAN checkpoint to fit edges on")
    p.add_argument("--simplify-backend", default=None)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--proposals", type=int, default=9)
    p.add_argument("--out", default="runs/fitnd")
    _ga_args(p)
    p.set_defaults(func=cmd_fitnd, pop=10, gens=5)

    p = sub.add_parser("bench", help="run a built-in suite")
    p.add_argument("suite", help="table1 | special | multivar")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", default="runs/bench")
    _ga_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("noise", help="noise robustness runs")
    p.add_argument("--eps", type=float, action="append", required=True)
    p.add_argument("--fn", action="append", help="suite entry (repeatable); default: the four noise functions")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", default="runs/noise")
    _ga_args(p)
    p.set_defaults(func=cmd_noise)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    a.argv = list(sys.argv[1:] if argv is None else argv)
    level = logging.WARNING - 10 * min(a.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return a.func(a)


if __name__ == "__main__":
    sys.exit(main())
