"""LLM-mutated genetic algorithm over candidate ansatz expressions."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .expr import ExprError, Expression, complexity, parse_candidate, to_source
from .llmclient import LlmClient, LlmConfig, build_ga_prompt, get_variant, make_backend
from .numfit import Dataset, FitConfig, ScoreConfig, fit_params
from .plotgen import PlotSpec, render_plot, to_image_payload

log = logging.getLogger(__name__)

CONSTANT_SOURCE = "lambda x,*params: params[0]"
NORM_EPS = 1e-12


class AllInfinite(ValueError):
    pass


class FailureCapExceeded(RuntimeError):
    def __init__(self, message: str, history: "RunHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class Candidate:
    expression: Expression
    source: str
    params: np.ndarray
    score: float
    generation: int = 0

    @property
    def complexity(self) -> int:
        return complexity(self.expression)

    def fitted_source(self, digits: int | None = 6) -> str:
        return to_source(self.expression, self.params, digits)


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 25
    generations: int = 10
    temperature: float = 1.0
    threshold: float = 1e-5
    elitism: bool = False
    seed: int = 0
    failure_cap_factor: int = 5
    prompt: str = "default"
    score: ScoreConfig = field(default_factory=ScoreConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    plot: PlotSpec = field(default_factory=PlotSpec)

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        get_variant(self.prompt)


@dataclass
class GenerationStats:
    generation: int
    best_score: float
    mean_score: float
    parse_failures: int
    llm_calls: int
    best_source: str


@dataclass
class RunHistory:
    generations: list[GenerationStats] = field(default_factory=list)
    best: Candidate | None = None
    population: list[Candidate] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def llm_calls(self) -> int:
        return sum(g.llm_calls for g in self.generations)

    @property
    def best_scores(self) -> list[float]:
        return [g.best_score for g in self.generations]

    def record(self, generation: int, population: list[Candidate], failures: int, calls: int) -> None:
        scores = np.array([c.score for c in population])
        finite = scores[np.isfinite(scores)]
        best = min(population, key=lambda c: c.score)
        self.generations.append(
            GenerationStats(
                generation,
                float(best.score),
                float(finite.mean()) if finite.size else math.inf,
                failures,
                calls,
                best.source,
            )
        )
        if self.best is None or best.score < self.best.score:
            self.best = best
        self.population = list(population)

    def to_dict(self) -> dict:
        best = self.best
        return {
            "generations": [asdict(g) for g in self.generations],
            "stopped_early": self.stopped_early,
            "llm_calls": self.llm_calls,
            "best": None
            if best is None
            else {
                "source": best.source,
                "params": [float(v) for v in best.params],
                "score": best.score,
                "generation": best.generation,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def normalized_fitness(scores) -> np.ndarray:
    """Map losses to (0, 1] with the best candidate at exactly 1 and +inf at 0."""
    scores = np.asarray(scores, dtype=float)
    finite = np.isfinite(scores)
    if not finite.any():
        raise AllInfinite("every candidate in the population failed")
    s_best = scores[finite].min() + NORM_EPS
    s = np.zeros_like(scores)
    s[finite] = np.clip(s_best / (scores[finite] + NORM_EPS), 0.0, 1.0)
    return s


def softmax(s, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(s, dtype=float) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def selection_probabilities(scores, temperature: float = 1.0) -> np.ndarray:
    return softmax(normalized_fitness(scores), temperature)


class _Fitter:
    """Fits candidates against one dataset, memoised by canonical source."""

    def __init__(self, data: Dataset, cfg: GaConfig):
        self.data = data
        self.cfg = cfg
        self._cache: dict[str, tuple[np.ndarray, float]] = {}

    def __call__(self, expr: Expression, generation: int) -> Candidate:
        source = to_source(expr)
        if source not in self._cache:
            self._cache[source] = fit_params(expr, self.data, self.cfg.score, self.cfg.fit)
        params, value = self._cache[source]
        return Candidate(expr, source, params.copy(), value, generation)


def init_population(cfg: GaConfig, data: Dataset, fitter: _Fitter | None = None) -> list[Candidate]:
    """N copies of the fitted constant function."""
    fitter = fitter or _Fitter(data, cfg)
    expr = parse_candidate(CONSTANT_SOURCE, data.d)
    return [fitter(expr, 0) for _ in range(cfg.population_size)]


def run(data: Dataset, cfg: GaConfig = GaConfig(), client: LlmClient | None = None) -> tuple[Candidate, RunHistory]:
    """Evolve ansatz expressions for a univariate dataset.

    Stops as soon as a candidate's loss is at or below ``cfg.threshold``; that
    candidate is returned.  Otherwise returns the best candidate seen.
    """
    if data.d != 1:
        raise ValueError("the genetic search works on univariate data")
    if client is None:
        client = LlmClient(make_backend(cfg.llm.backend, cfg.llm), cfg.llm)
    variant = get_variant(cfg.prompt)
    rng = np.random.default_rng(cfg.seed)
    payload = to_image_payload(render_plot(data, cfg.plot))
    fitter = _Fitter(data, cfg)
    N = cfg.population_size
    cap = cfg.failure_cap_factor * N

    history = RunHistory()
    parents = init_population(cfg, data, fitter)
    history.record(0, parents, 0, 0)
    if history.best.score <= cfg.threshold:
        history.stopped_early = True
        return history.best, history

    for generation in range(1, cfg.generations + 1):
        probs = selection_probabilities([c.score for c in parents], cfg.temperature)
        new: list[Candidate] = []
        failures = calls = 0
        found: Candidate | None = None
        while len(new) < N and found is None:
            need = N - len(new)
            pairs = [rng.choice(N, size=2, replace=True, p=probs) for _ in range(need)]
            prompts = [build_ga_prompt(parents[a].source, parents[b].source, variant) for a, b in pairs]
            texts = client.complete_many(prompts, payload)
            calls += len(texts)
            for text in texts:
                try:
                    expr = parse_candidate(text, 1)
                except ExprError as err:
                    failures += 1
                    log.debug("generation %d: unparseable proposal (%s)", generation, err)
                    if failures > cap:
                        history.record(generation, new or parents, failures, calls)
                        raise FailureCapExceeded(
                            f"more than {cap} unparseable proposals in generation {generation}", history
                        )
                    continue
                cand = fitter(expr, generation)
                new.append(cand)
                if cand.score <= cfg.threshold:
                    found = cand
                    break
        if found is not None:
            # pad with the strongest parents so the recorded population stays size N
            fill = sorted(parents, key=lambda c: c.score)[: N - len(new)]
            history.record(generation, new + fill, failures, calls)
            history.best = found
            history.stopped_early = True
            return found, history
        if cfg.elitism:
            elite = min(parents, key=lambda c: c.score)
            worst = int(np.argmax([c.score for c in new]))
            new[worst] = elite
        history.record(generation, new, failures, calls)
        if any(math.isfinite(c.score) for c in new):
            parents = new
        else:
            log.warning("generation %d: every candidate failed; redrawing from the previous population", generation)
    return history.best, history
