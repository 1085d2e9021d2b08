"""Benchmark runner and report tables."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import evolve
from .llmclient import LlmClient, OracleBackend, make_backend
from .pipeline import KanPipelineConfig, run_kan_pipeline
from .suites import NoiseSpec, SuiteEntry, add_noise, get_suite

log = logging.getLogger(__name__)

EXACT_SCORE = -1e-15
NOISY_THRESHOLD = 0.04


@dataclass
class ReportRow:
    name: str
    target: str
    returned: str
    loss: float
    seconds: float
    llm_calls: int
    error: str = ""

    @property
    def reported(self) -> float:
        """Score in the reporting convention: the negated loss."""
        return 0.0 - self.loss

    @property
    def exact(self) -> bool:
        return self.reported >= EXACT_SCORE


@dataclass
class BenchmarkReport:
    suite: str
    rows: list[ReportRow] = field(default_factory=list)

    COLUMNS = ("name", "target", "returned", "reported_score", "exact", "seconds", "llm_calls", "error")

    def _cells(self, r: ReportRow) -> list:
        return [r.name, r.target, r.returned, repr(r.reported), int(r.exact), f"{r.seconds:.3f}", r.llm_calls, r.error]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(self._cells(r))
        return buf.getvalue()

    def to_table(self) -> str:
        head = ("name", "target", "returned", "score", "exact", "time/s", "calls")
        body = [
            (r.name, r.target, r.returned if not r.error else f"ERROR: {r.error}", f"{r.reported:.3g}",
             "yes" if r.exact else "", f"{r.seconds:.1f}", str(r.llm_calls))
            for r in self.rows
        ]
        widths = [max(len(h), *(len(b[k]) for b in body)) if body else len(h) for k, h in enumerate(head)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
        n_exact = sum(r.exact for r in self.rows)
        lines.append(f"{n_exact}/{len(self.rows)} at or above {EXACT_SCORE:g} (flagged for manual review)")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out / f"{self.suite}.csv", out / f"{self.suite}.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_table())
        return csv_path, txt_path


@dataclass(frozen=True)
class BenchConfig:
    ga: evolve.GaConfig = field(default_factory=evolve.GaConfig)
    backend: str = "live"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    parallel: int = 1
    threshold: float | None = None  # overrides ga.threshold; noisy runs default to 0.04
    kan: KanPipelineConfig = field(default_factory=KanPipelineConfig)


def entry_backend(spec: str, entry: SuiteEntry, cfg: evolve.GaConfig, index: int):
    """Resolve a backend spec for one entry.

    ``oracle`` and ``oracle:<p>:<seed>`` plant the entry's own target; any
    other spec goes through :func:`make_backend`.
    """
    if spec == "oracle":
        return OracleBackend(entry.source)
    if spec.startswith("oracle:") and spec.count(":") == 2:
        _, p, seed = spec.split(":")
        return OracleBackend(entry.source, float(p), int(seed) + index)
    return make_backend(spec, cfg.llm)


def _run_entry(args) -> ReportRow:
    index, entry, cfg = args
    t0 = time.perf_counter()
    try:
        data = add_noise(entry.dataset(), replace(cfg.noise, seed=cfg.noise.seed + index))
        ga = replace(cfg.ga, seed=cfg.ga.seed + index)
        threshold = cfg.threshold
        if threshold is None and cfg.noise.epsilon > 0:
            threshold = NOISY_THRESHOLD
        if threshold is not None:
            ga = replace(ga, threshold=threshold)
        if entry.d > 1:
            result = run_kan_pipeline(data, replace(cfg.kan, seed=cfg.kan.seed + index), cfg.backend, cfg.backend)
            return ReportRow(entry.name, entry.source, result.source, result.score,
                             time.perf_counter() - t0, result.llm_calls)
        client = LlmClient(entry_backend(cfg.backend, entry, ga, index), ga.llm)
        best, hist = evolve.run(data, ga, client)
        return ReportRow(entry.name, entry.source, best.fitted_source(6), best.score,
                         time.perf_counter() - t0, hist.llm_calls)
    except Exception as err:  # recorded per row; the report is always written
        log.warning("entry %s failed: %s", entry.name, err)
        return ReportRow(entry.name, entry.source, "", float("inf"), time.perf_counter() - t0, 0,
                         f"{type(err).__name__}: {err}")


def run_benchmark(suite: str, cfg: BenchConfig = BenchConfig(), out_dir=None, entries=None) -> BenchmarkReport:
    """Run every entry of a suite, in suite order.

    Univariate entries go through the genetic search; multivariate ones
    through the KAN pipeline (``cfg.backend`` then serves edges and
    simplification alike).
    """
    entries = list(entries) if entries is not None else get_suite(suite)
    jobs = [(k, e, cfg) for k, e in enumerate(entries)]
    if cfg.parallel > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallel) as pool:
            rows = list(pool.map(_run_entry, jobs))
    else:
        rows = [_run_entry(j) for j in jobs]
    report = BenchmarkReport(suite, rows)
    if out_dir is not None:
        report.write(out_dir)
    return report

