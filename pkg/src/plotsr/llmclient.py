"""Prompt construction, chat-completions transport, and offline mock backends."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .expr import BinOp, Call, Const, Expression, Neg, Node, Param, parse_candidate, to_source

log = logging.getLogger(__name__)


class LlmError(RuntimeError):
    pass


class AuthError(LlmError):
    pass


class ConfigError(LlmError):
    pass


# ---------------------------------------------------------------------------
# Prompts

_SYSTEM_HEAD = (
    "You are a symbolic regression expert. Analyze the data in the image and provide an improved "
    "mathematical ansatz. Respond with ONLY the ansatz formula, without any explanation or commentary. "
    "Ensure it is in valid Python. "
)
_SYSTEM_TAIL = " params is a list of parameters that can be of any length or complexity."

SIMPLIFY_STRATEGIES = (
    "Taylor expand terms that are small in this interval",
    "Remove negligible terms",
    "Recognise polynomial patterns as Taylor series terms",
    "Combine similar terms and factor them when possible",
)

GA_TEMPLATE = "{imports}\ncurve_0 = lambda x,*params: {a}\ncurve_1 = lambda x,*params: {b}\ncurve_2 = lambda x,*params:"

SIMPLIFY_SYSTEM = (
    "You are an expert in symbolic mathematics. You will be given a mathematical expression and the "
    "interval from which each input variable was sampled. Simplify the expression using the following "
    "strategies:\n" + "\n".join(f"- {s}" for s in SIMPLIFY_STRATEGIES) + "\n"
    "Respond with ONLY the simplified expression as a single valid Python expression, without any "
    "explanation or commentary. You may use numpy functions (as np) and params[k] for free coefficients."
)

SIMPLIFY_TEMPLATE = "Expression: {expression}\nInput intervals: {ranges}\nSimplified expression:"


@dataclass(frozen=True)
class PromptVariant:
    id: str
    system: str
    user_template: str

    def __post_init__(self):
        if self.id == "simplify":
            required = ("{expression}", "{ranges}")
        else:
            required = ("{a}", "{b}")
        missing = [r for r in required if r not in self.user_template]
        if missing:
            raise ConfigError(f"prompt variant {self.id!r} lacks placeholders {missing}")


PROMPTS: dict[str, PromptVariant] = {
    "default": PromptVariant(
        "default",
        _SYSTEM_HEAD + "You may use numpy functions." + _SYSTEM_TAIL,
        GA_TEMPLATE,
    ),
    "special_fns": PromptVariant(
        "special_fns",
        _SYSTEM_HEAD + "You may use numpy functions, and scipy.special." + _SYSTEM_TAIL,
        GA_TEMPLATE,
    ),
    "special_fns_preferred": PromptVariant(
        "special_fns_preferred",
        _SYSTEM_HEAD
        + "You may use numpy functions, and scipy.special. Give preference to scipy.special over numpy."
        + _SYSTEM_TAIL,
        GA_TEMPLATE,
    ),
    "simplify": PromptVariant("simplify", SIMPLIFY_SYSTEM, SIMPLIFY_TEMPLATE),
}

PROMPT_ALIASES = {"special": "special_fns", "special-preferred": "special_fns_preferred"}


def get_variant(name: str) -> PromptVariant:
    key = PROMPT_ALIASES.get(name, name).replace("-", "_")
    if key not in PROMPTS:
        raise ConfigError(f"unknown prompt variant {name!r}")
    return PROMPTS[key]


def build_ga_prompt(parent_a: str, parent_b: str, variant: PromptVariant | str = "default") -> tuple[str, str]:
    """(system, user) text for one parent pair; parents are symbolic bodies."""
    if isinstance(variant, str):
        variant = get_variant(variant)
    imports = "import numpy as np"
    if variant.id.startswith("special"):
        imports += "\nimport scipy.special"
    user = variant.user_template.format(imports=imports, a=parent_a, b=parent_b)
    return variant.system, user


def format_ranges(ranges: Sequence[tuple[float, float]], names: Sequence[str]) -> str:
    return ", ".join(f"{n} in [{lo:.6g}, {hi:.6g}]" for n, (lo, hi) in zip(names, ranges))


def build_simplify_prompt(expression: str, ranges: Sequence[tuple[float, float]], names: Sequence[str]) -> tuple[str, str]:
    variant = PROMPTS["simplify"]
    user = variant.user_template.format(expression=expression, ranges=format_ranges(ranges, names))
    return variant.system, user


# ---------------------------------------------------------------------------
# Wire format


def chat_messages(system: str, user: str, image_payload: str | None) -> list[dict]:
    if image_payload is None:
        content: object = user
    else:
        content = [
            {"type": "text", "text": user},
            {"type": "image_url", "image_url": {"url": image_payload}},
        ]
    return [{"role": "system", "content": system}, {"role": "user", "content": content}]


@dataclass(frozen=True)
class LlmConfig:
    base_url: str = "https://openrouter.ai/api"
    model: str = "openai/gpt-4o"
    temperature: float | None = None  # None leaves the provider default
    max_in_flight: int = 8
    timeout: float = 120.0
    retries: int = 3
    backoff: float = 1.0
    api_key_env: str = "OPENROUTER_API_KEY"
    fallback_key_env: str = "OPENAI_API_KEY"
    backend: str = "live"

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")


@dataclass(frozen=True)
class Request:
    """One chat request; ``index`` is the per-backend correlation id."""

    index: int
    system: str
    user: str
    image_payload: str | None = None


class Backend(Protocol):
    def complete(self, request: Request) -> str: ...


class LiveBackend:
    """POST {base}/v1/chat/completions with bearer auth."""

    def __init__(self, cfg: LlmConfig, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.cfg = cfg
        key = os.environ.get(cfg.api_key_env) or os.environ.get(cfg.fallback_key_env)
        if not key:
            raise ConfigError(f"no API key in ${cfg.api_key_env} or ${cfg.fallback_key_env}")
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"},
            timeout=cfg.timeout,
            transport=transport,
        )
        self._sleep = sleep

    def body(self, request: Request) -> dict:
        body = {
            "model": self.cfg.model,
            "messages": chat_messages(request.system, request.user, request.image_payload),
        }
        if self.cfg.temperature is not None:
            body["temperature"] = self.cfg.temperature
        return body

    def complete(self, request: Request) -> str:
        body = self.body(request)
        for attempt in range(self.cfg.retries + 1):
            try:
                resp = self._client.post("/v1/chat/completions", json=body)
            except httpx.HTTPError as err:
                log.warning("request %d attempt %d failed: %s", request.index, attempt, err)
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"authentication failed ({resp.status_code})")
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"] or ""
                    except (KeyError, IndexError, TypeError, ValueError):
                        log.warning("request %d: malformed response body", request.index)
                        return ""
                log.warning("request %d attempt %d: HTTP %d", request.index, attempt, resp.status_code)
                if 400 <= resp.status_code < 500 and resp.status_code != 429:
                    return ""
            if attempt < self.cfg.retries:
                self._sleep(self.cfg.backoff * 2**attempt)
        return ""


class ScriptedBackend:
    """Replays recorded responses cyclically, by request index.

    A ``.json`` fixture holds a list of raw response strings (multi-line
    responses such as fenced code); any other file holds one response per
    non-empty line.
    """

    def __init__(self, path: str | os.PathLike):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"scripted fixture {path} not found")
        if path.suffix == ".json":
            self.lines = [str(r) for r in json.loads(path.read_text())]
        else:
            self.lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not self.lines:
            self.lines = [""]

    def complete(self, request: Request) -> str:
        return self.lines[request.index % len(self.lines)]


_SWAPS = {"add": "sub", "sub": "add", "mul": "div", "div": "mul"}
_FUNC_SWAPS = {"sin": "cos", "cos": "sin", "exp": "cosh", "cosh": "exp", "log": "sqrt", "sqrt": "log", "tanh": "arctan"}


def _nodes_with_paths(node: Node, path=()):
    yield path, node
    if isinstance(node, Neg):
        yield from _nodes_with_paths(node.operand, path + (0,))
    elif isinstance(node, BinOp):
        yield from _nodes_with_paths(node.left, path + (0,))
        yield from _nodes_with_paths(node.right, path + (1,))
    elif isinstance(node, Call):
        for i, a in enumerate(node.args):
            yield from _nodes_with_paths(a, path + (i,))


def _replace(node: Node, path, new: Node) -> Node:
    if not path:
        return new
    head, rest = path[0], path[1:]
    if isinstance(node, Neg):
        return Neg(_replace(node.operand, rest, new))
    if isinstance(node, BinOp):
        if head == 0:
            return BinOp(node.op, _replace(node.left, rest, new), node.right)
        return BinOp(node.op, node.left, _replace(node.right, rest, new))
    if isinstance(node, Call):
        args = list(node.args)
        args[head] = _replace(args[head], rest, new)
        return Call(node.func, tuple(args))
    raise ValueError("bad path")


def perturb(expr: Expression, rng: np.random.Generator) -> Expression:
    """A random structural change: operator swap, function swap, or an extra term."""
    p = expr.n_params
    sites = list(_nodes_with_paths(expr.root))
    ops = [(path, n) for path, n in sites if isinstance(n, BinOp) and n.op in _SWAPS]
    funcs = [(path, n) for path, n in sites if isinstance(n, Call) and n.func in _FUNC_SWAPS]
    kinds = ["term"] + (["op"] if ops else []) + (["func"] if funcs else [])
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "op":
        path, n = ops[int(rng.integers(len(ops)))]
        root = _replace(expr.root, path, BinOp(_SWAPS[n.op], n.left, n.right))
        return Expression(root, expr.n_inputs, p)
    if kind == "func":
        path, n = funcs[int(rng.integers(len(funcs)))]
        root = _replace(expr.root, path, Call(_FUNC_SWAPS[n.func], n.args))
        return Expression(root, expr.n_inputs, p)
    extra = [
        Param(p),
        BinOp("mul", Param(p), Call("sin", (BinOp("mul", Const(3.0), Param(p + 1)),))),
        BinOp("mul", Param(p), Call("exp", (Neg(Param(p + 1)),))),
    ][int(rng.integers(3))]
    n_new = p + (1 if isinstance(extra, Param) else 2)
    return Expression(BinOp("add", expr.root, extra), expr.n_inputs, n_new)


class OracleBackend:
    """Answers with a planted target with probability ``success_prob``.

    Failures return a random perturbation of the target.  Draws depend only on
    ``(seed, request.index)``, so results do not depend on completion order.
    """

    def __init__(self, target_source: str, success_prob: float = 1.0, seed: int = 0, input_dim: int = 1):
        if not 0.0 <= success_prob <= 1.0:
            raise ConfigError("success_prob must lie in [0, 1]")
        self.target = parse_candidate(target_source, input_dim)
        self.success_prob = success_prob
        self.seed = seed
        self.input_dim = input_dim

    def complete(self, request: Request) -> str:
        rng = np.random.default_rng([self.seed, request.index])
        if rng.random() < self.success_prob:
            expr = self.target
        else:
            expr = perturb(self.target, rng)
        if self.input_dim > 1:
            return to_source(expr)
        return f"curve_2 = lambda x,*params: {to_source(expr)}"


def make_backend(spec: str, cfg: LlmConfig | None = None):
    """``live`` | ``scripted:<path>`` | ``oracle:<p>:<seed>:<target source>``."""
    cfg = cfg or LlmConfig()
    if spec == "live":
        return LiveBackend(cfg)
    if spec.startswith("scripted:"):
        return ScriptedBackend(spec[len("scripted:"):])
    if spec.startswith("oracle:"):
        parts = spec[len("oracle:"):].split(":", 2)
        if len(parts) == 1:
            return OracleBackend(parts[0])
        if len(parts) != 3:
            raise ConfigError("oracle backend spec is oracle:<p>:<seed>:<target>")
        return OracleBackend(parts[2], float(parts[0]), int(parts[1]))
    raise ConfigError(f"unknown backend {spec!r}")


# ---------------------------------------------------------------------------
# Client


class LlmClient:
    """Fans requests out to a backend with at most ``max_in_flight`` outstanding.

    Correlation ids are assigned in submission order on the calling thread and
    results come back in that order regardless of completion order.
    """

    def __init__(self, backend, cfg: LlmConfig | None = None):
        self.backend = backend
        self.cfg = cfg or LlmConfig()
        self._lock = threading.Lock()
        self._next_index = 0
        self.calls = 0

    def _reserve(self, n: int) -> int:
        with self._lock:
            start = self._next_index
            self._next_index += n
            self.calls += n
            return start

    def complete_many(self, prompts: Sequence[tuple[str, str]], image_payload: str | None = None) -> list[str]:
        if not prompts:
            return []
        start = self._reserve(len(prompts))
        requests = [Request(start + i, s, u, image_payload) for i, (s, u) in enumerate(prompts)]
        if self.cfg.max_in_flight == 1 or len(requests) == 1:
            return [self.backend.complete(r) for r in requests]
        with ThreadPoolExecutor(max_workers=min(self.cfg.max_in_flight, len(requests))) as pool:
            return list(pool.map(self.backend.complete, requests))

    def propose(self, image_payload: str | None, prompts: tuple[str, str], n: int = 1) -> list[str]:
        """n independent completions of one (system, user) pair, in request order."""
        if n < 1:
            raise ValueError("n must be >= 1")
        return self.complete_many([prompts] * n, image_payload)


def propose(image_payload: str | None, prompts: tuple[str, str], n: int, cfg: LlmConfig, backend=None) -> list[str]:
    backend = backend if backend is not None else make_backend(cfg.backend, cfg)
    return LlmClient(backend, cfg).propose(image_payload, prompts, n)
