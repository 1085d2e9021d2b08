"""Multivariate regression: KAN fit, architecture search, edge fits, compose, simplify."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import evolve
from .compose import EdgeFit, SimplifyConfig, SimplifyResult, compose_expression, llm_simplify_refit
from .expr import Expression, to_source
from .kan import (
    EdgeReport,
    KanModel,
    KanTrainConfig,
    TrainHistory,
    edge_dataset,
    kan_forward,
    kan_prune,
    kan_train,
    shrink,
)
from .llmclient import LlmClient, LlmConfig, make_backend
from .numfit import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KanPipelineConfig:
    widths: tuple[int, ...] = (2, 4, 4, 1)
    # stronger sparsity than plain training so pruning has something to remove
    train: KanTrainConfig = field(default_factory=lambda: KanTrainConfig(l1=1e-2))
    prune_threshold: float = 1e-2
    linear_tol: float = 0.01
    auto: bool = False
    max_iterations: int = 6
    ga: evolve.GaConfig = field(
        default_factory=lambda: evolve.GaConfig(population_size=10, generations=5, threshold=1e-7)
    )
    simplify: SimplifyConfig = field(default_factory=SimplifyConfig)
    seed: int = 0


@dataclass
class SearchStep:
    widths: list[int]
    val_mse: float
    report: EdgeReport


@dataclass
class ArchitectureResult:
    model: KanModel
    history: TrainHistory
    steps: list[SearchStep]

    @property
    def widths(self) -> list[int]:
        return list(self.model.widths)


def _next_widths(model: KanModel, report: EdgeReport) -> list[int]:
    widths = list(report.suggested_widths)
    # an all-affine layer fed by a single hidden node folds into the layer before it
    for ell in sorted(report.strippable_layers, reverse=True):
        if 1 <= ell < len(widths) - 1 and widths[ell] == 1 and len(widths) > 2:
            return widths[:ell] + widths[ell + 1:]
    return widths


def search_architecture(data: Dataset, cfg: KanPipelineConfig) -> ArchitectureResult:
    """Train, prune and retrain until the suggested widths stop changing.

    Without ``cfg.auto`` a single train and prune pass runs.  Each retrain
    starts from the shrunk pruned model unless a layer was stripped.
    """
    model = KanModel.create(list(cfg.widths), cfg.train.grid_size, cfg.seed, data.input_ranges)
    steps: list[SearchStep] = []
    iterations = cfg.max_iterations if cfg.auto else 1
    for it in range(iterations):
        model, hist = kan_train(model, data, replace(cfg.train, seed=cfg.train.seed + it))
        _, caches = kan_forward(model, data.inputs)
        pruned, report = kan_prune(model, caches, cfg.prune_threshold, cfg.linear_tol)
        steps.append(SearchStep(list(model.widths), hist.val_mse[-1], report))
        log.info("widths %s -> suggested %s (val mse %.3g)", model.widths, report.suggested_widths, hist.val_mse[-1])
        nxt = _next_widths(model, report)
        if nxt == list(model.widths):
            if pruned.enabled_edges() != model.enabled_edges():
                model = pruned
            break
        if len(nxt) == len(model.widths):
            model = shrink(pruned)
        else:
            model = KanModel.create(nxt, cfg.train.grid_size, cfg.seed + it + 1, data.input_ranges)
        if it == iterations - 1:
            model, hist = kan_train(model, data, replace(cfg.train, seed=cfg.train.seed + it + 1))
    return ArchitectureResult(model, hist, steps)


def _client_for(backend, llm: LlmConfig) -> LlmClient:
    if isinstance(backend, LlmClient):
        return backend
    if isinstance(backend, str):
        return LlmClient(make_backend(backend, llm), llm)
    return LlmClient(backend, llm)


def fit_edges(model: KanModel, data: Dataset, ga: evolve.GaConfig, backends) -> tuple[dict, int]:
    """GA-fit every enabled edge on its activation samples.

    ``backends`` is one backend (spec string, object or client) for all edges
    or a dict keyed by edge id.  Returns the fits and the total LLM calls.
    """
    _, caches = kan_forward(model, data.inputs)
    fits: dict = {}
    calls = 0
    for edge in model.enabled_edges():
        ds = edge_dataset(model, caches, edge)
        backend = backends.get(edge) if isinstance(backends, dict) else backends
        if backend is None:
            raise KeyError(f"no backend for edge {edge}")
        client = _client_for(backend, ga.llm)
        best, hist = evolve.run(ds, ga, client)
        fits[edge] = EdgeFit(edge, best.expression, best.params, best.score)
        calls += hist.llm_calls
        log.info("edge %s: %s (loss %.3g)", edge, best.fitted_source(), best.score)
    return fits, calls


@dataclass
class PipelineResult:
    architecture: ArchitectureResult
    edge_fits: dict
    composed: Expression
    composed_params: np.ndarray
    simplified: SimplifyResult
    llm_calls: int
    seconds: float

    @property
    def expression(self) -> Expression:
        return self.simplified.expression

    @property
    def params(self) -> np.ndarray:
        return self.simplified.best.params

    @property
    def score(self) -> float:
        return self.simplified.score

    @property
    def source(self) -> str:
        return to_source(self.expression, self.params)


def run_kan_pipeline(
    data: Dataset,
    cfg: KanPipelineConfig = KanPipelineConfig(),
    edge_backends="live",
    simplify_backend="live",
    model: KanModel | None = None,
) -> PipelineResult:
    """Fit a KAN (or use ``model``), fit its edges, compose and simplify."""
    t0 = time.perf_counter()
    if model is None:
        arch = search_architecture(data, cfg)
    else:
        arch = ArchitectureResult(model, TrainHistory(), [])
    fits, calls = fit_edges(arch.model, data, cfg.ga, edge_backends)
    composed, values = compose_expression(arch.model, fits)
    client = None if simplify_backend is None else _client_for(simplify_backend, cfg.ga.llm)
    simplified = llm_simplify_refit(composed, values, data, data.input_ranges, cfg.simplify, client)
    if client is not None:
        calls += client.calls
    return PipelineResult(arch, fits, composed, values, simplified, calls, time.perf_counter() - t0)
