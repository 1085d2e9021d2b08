"""Assemble a symbolic expression from fitted KAN edges, then simplify and refit it.

The rewrite engine works on numeric ASTs (parameters inlined).  Every rewrite
is checked numerically on points drawn uniformly from the input ranges and is
rejected if it moves the expression by more than the configured tolerance or
changes where it is finite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .expr import (
    BinOp,
    Call,
    Const,
    ExprError,
    Expression,
    Neg,
    Node,
    Param,
    Var,
    canonical_variable_name,
    children,
    complexity,
    inline_params,
    parse_candidate,
    substitute,
    to_source,
    walk,
)
from .kan import KanModel
from .llmclient import LlmClient, build_simplify_prompt
from .numfit import Dataset, FitConfig, ScoreConfig, fit_params

log = logging.getLogger(__name__)


class MissingEdgeFit(KeyError):
    pass


@dataclass(frozen=True)
class EdgeFit:
    edge: tuple[int, int, int]
    expression: Expression
    params: np.ndarray
    score: float = math.nan

    def __post_init__(self):
        if self.expression.n_inputs != 1:
            raise ValueError("edge expressions are univariate")
        if len(self.params) != self.expression.n_params:
            raise ValueError("parameter count does not match the expression")


@dataclass(frozen=True)
class SimplifyConfig:
    rounds: int = 1
    negligible: float = 1e-3
    snap_tol: float = 1e-4
    n_proposals: int = 9
    tie_margin: float = 0.01
    tie_floor: float = 1e-12
    samples: int = 256
    seed: int = 0
    max_passes: int = 25
    score: ScoreConfig = field(default_factory=ScoreConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if min(self.negligible, self.snap_tol, self.tie_margin) <= 0:
            raise ValueError("thresholds must be positive")
        if self.n_proposals < 0 or self.samples < 2:
            raise ValueError("need n_proposals >= 0 and samples >= 2")


# ---------------------------------------------------------------------------
# Composition


def _sum(nodes: list[Node]) -> Node:
    acc = nodes[0]
    for n in nodes[1:]:
        acc = BinOp("add", acc, n)
    return acc


def compose_expression(model: KanModel, fits) -> tuple[Expression, np.ndarray]:
    """Nested expression of the network with every edge fit's parameters kept.

    ``fits`` maps edge ids ``(layer, i, j)`` to :class:`EdgeFit` (a list of
    fits is accepted too).  Parameters are renumbered densely in layer, then
    input, then output order; the returned vector holds their fitted values.
    Node biases enter as fixed constants.
    """
    if not isinstance(fits, dict):
        fits = {f.edge: f for f in fits}
    nodes: list[Node] = [Var(i) for i in range(model.widths[0])]
    values: list[float] = []
    for ell, layer in enumerate(model.layers):
        nxt = []
        for j in range(layer.n_out):
            terms = []
            for i in range(layer.n_in):
                if not layer.mask[i, j]:
                    continue
                fit = fits.get((ell, i, j))
                if fit is None:
                    raise MissingEdgeFit((ell, i, j))
                terms.append(substitute(fit.expression.root, [nodes[i]], len(values)))
                values.extend(float(v) for v in fit.params)
            b = float(layer.bias[j])
            if b != 0.0 or not terms:
                terms.append(Const(b))
            nxt.append(_sum(terms))
        nodes = nxt
    if len(nodes) != 1:
        raise ValueError("only single-output networks can be composed")
    return Expression(nodes[0], model.widths[0], len(values)), np.array(values)


# ---------------------------------------------------------------------------
# Term and factor views


def _num(node: Node) -> bool:
    return isinstance(node, Const) and node.name is None


def _c(value: float) -> Const:
    return Const(float(value))


def _has_var(node: Node) -> bool:
    return any(isinstance(n, Var) for n in walk(node))


def _node_key(node: Node) -> str:
    return to_source(Expression(node, _max_var(node) + 1, -1))


def _max_var(node: Node) -> int:
    return max((n.index for n in walk(node) if isinstance(n, Var)), default=0)


Factors = tuple[float, dict]  # coefficient, {base: exponent}


def _merge(into: dict, base: Node, e: float) -> None:
    into[base] = into.get(base, 0.0) + e


def factors(node: Node) -> Factors:
    """Split a product into a numeric coefficient and base**exponent factors.

    Products of exponentials merge into one exponential of the summed
    arguments.
    """
    if _num(node):
        return node.value, {}
    if isinstance(node, Neg):
        c, f = factors(node.operand)
        return -c, f
    if isinstance(node, BinOp) and node.op in ("mul", "div"):
        ca, fa = factors(node.left)
        cb, fb = factors(node.right)
        sign = 1.0 if node.op == "mul" else -1.0
        if node.op == "div" and cb == 0.0:
            return 1.0, {node: 1.0}
        out = dict(fa)
        for base, e in fb.items():
            _merge(out, base, sign * e)
        return (ca * cb if sign > 0 else ca / cb), _merge_exps(out)
    if isinstance(node, BinOp) and node.op == "pow" and _num(node.right):
        k = node.right.value
        c, f = factors(node.left)
        if c < 0 and not float(k).is_integer():
            return 1.0, {node: 1.0}
        with np.errstate(all="ignore"):
            ck = float(np.power(c, k))
        if not math.isfinite(ck):
            return 1.0, {node: 1.0}
        return ck, {b: e * k for b, e in f.items()}
    return 1.0, {node: 1.0}


def _merge_exps(f: dict) -> dict:
    exps = [(b, e) for b, e in f.items() if isinstance(b, Call) and b.func == "exp"]
    if len(exps) < 2:
        return f
    out = {b: e for b, e in f.items() if not (isinstance(b, Call) and b.func == "exp")}
    arg = _scale(exps[0][1], exps[0][0].args[0])
    for b, e in exps[1:]:
        arg = BinOp("add", arg, _scale(e, b.args[0]))
    _merge(out, Call("exp", (arg,)), 1.0)
    return out


def _scale(k: float, node: Node) -> Node:
    if k == 1.0:
        return node
    if k == -1.0:
        return Neg(node)
    return BinOp("mul", _c(k), node)


def _power(base: Node, e: float) -> Node:
    return base if e == 1.0 else BinOp("pow", base, _c(e))


def _prod(nodes: list[Node]) -> Node:
    acc = nodes[0]
    for n in nodes[1:]:
        acc = BinOp("mul", acc, n)
    return acc


def build_product(coef: float, f: dict) -> Node:
    items = sorted(((b, e) for b, e in f.items() if e != 0.0), key=lambda be: _node_key(be[0]))
    num = [_power(b, e) for b, e in items if e > 0]
    den = [_power(b, -e) for b, e in items if e < 0]
    if coef == 0.0:
        return _c(0.0)
    if not num:
        body: Node = _c(coef)
    elif coef == 1.0:
        body = _prod(num)
    elif coef == -1.0:
        body = Neg(_prod(num)) if len(num) == 1 else _prod([Neg(num[0])] + num[1:])
    else:
        body = _prod([_c(coef)] + num)
    if den:
        body = BinOp("div", body, _prod(den))
    return body


Terms = list[tuple[float, Node | None]]  # coefficient, monomial (None for the constant)


def terms(node: Node) -> Terms:
    """Flatten sums; numeric multipliers distribute over inner sums."""
    if _num(node):
        return [(node.value, None)]
    if isinstance(node, Neg):
        return [(-c, m) for c, m in terms(node.operand)]
    if isinstance(node, BinOp) and node.op in ("add", "sub"):
        right = terms(node.right)
        if node.op == "sub":
            right = [(-c, m) for c, m in right]
        return terms(node.left) + right
    if isinstance(node, BinOp) and node.op in ("mul", "div"):
        c, f = factors(node)
        if len(f) == 1:
            (base, e), = f.items()
            if e == 1.0 and isinstance(base, BinOp) and base.op in ("add", "sub"):
                return [(c * k, m) for k, m in terms(base)]
        if not f:
            return [(c, None)]
        return [(c, build_product(1.0, f))]
    return [(1.0, node)]


def combine_terms(ts: Terms) -> Terms:
    order: list = []
    acc: dict = {}
    for c, m in ts:
        key = None if m is None else m
        if key not in acc:
            order.append(key)
            acc[key] = 0.0
        acc[key] += c
    out = [(acc[k], k) for k in order if acc[k] != 0.0 and k is not None]
    if acc.get(None, 0.0) != 0.0:
        out.append((acc[None], None))
    return out


def _term_node(c: float, m: Node | None) -> Node:
    if m is None:
        return _c(c)
    cf, f = factors(m)
    return build_product(c * cf, f)


def build_sum(ts: Terms) -> Node:
    if not ts:
        return _c(0.0)
    c0, m0 = ts[0]
    acc = _term_node(c0, m0)
    for c, m in ts[1:]:
        if c < 0:
            acc = BinOp("sub", acc, _term_node(-c, m))
        else:
            acc = BinOp("add", acc, _term_node(c, m))
    return acc


# ---------------------------------------------------------------------------
# Rewrite rules.  Each takes a node and returns a replacement or None.


def _rebuild(node: Node, kids: list[Node]) -> Node:
    if isinstance(node, Neg):
        return Neg(kids[0])
    if isinstance(node, BinOp):
        return BinOp(node.op, kids[0], kids[1])
    if isinstance(node, Call):
        return Call(node.func, tuple(kids))
    return node


def _is_pi_multiple(node: Node) -> bool:
    if isinstance(node, Const):
        return node.name is not None
    if isinstance(node, Neg):
        return _is_pi_multiple(node.operand)
    if isinstance(node, BinOp) and node.op == "mul":
        a, b = node.left, node.right
        return (_num(a) and float(a.value).is_integer() and _is_pi_multiple(b)) or (
            _num(b) and float(b.value).is_integer() and _is_pi_multiple(a)
        )
    return False


def _const_value(node: Node) -> float | None:
    expr = Expression(node, 1, 0)
    with np.errstate(all="ignore"):
        v = expr.compile()(np.zeros((1, 1)), np.zeros(0))[0]
    return float(v) if math.isfinite(v) else None


def rule_fold(node: Node, ctx) -> Node | None:
    if isinstance(node, (Const, Var)) or _has_var(node) or _is_pi_multiple(node):
        return None
    v = _const_value(node)
    return None if v is None else _c(v)


def rule_sum(node: Node, ctx) -> Node | None:
    if not (isinstance(node, Neg) or (isinstance(node, BinOp) and node.op in ("add", "sub", "mul", "div"))):
        return None
    return build_sum(combine_terms(terms(node)))


def rule_product(node: Node, ctx) -> Node | None:
    if not (isinstance(node, BinOp) and node.op in ("mul", "div", "pow")):
        return None
    c, f = factors(node)
    return build_product(c, f)


def rule_exp(node: Node, ctx) -> Node | None:
    """exp(c + sum k log u + rest) -> e**c * prod u**k * exp(rest)."""
    if not (isinstance(node, Call) and node.func == "exp"):
        return None
    ts = combine_terms(terms(node.args[0]))
    coef, f, rest = 1.0, {}, []
    fired = False
    for k, m in ts:
        if m is None:
            coef *= math.exp(k) if k < 700 else math.inf
            fired = True
        elif isinstance(m, Call) and m.func == "log":
            _merge(f, m.args[0], k)
            fired = True
        else:
            rest.append((k, m))
    if not fired or not math.isfinite(coef):
        return None
    if rest:
        _merge(f, Call("exp", (build_sum(rest),)), 1.0)
    return build_product(coef, f)


def rule_log_exp(node: Node, ctx) -> Node | None:
    if isinstance(node, Call) and node.func == "log":
        inner = node.args[0]
        if isinstance(inner, Call) and inner.func == "exp":
            return inner.args[0]
    return None


def rule_negligible(node: Node, ctx) -> Node | None:
    """Drop summands whose RMS is tiny next to the whole sum's RMS."""
    if not (isinstance(node, BinOp) and node.op in ("add", "sub")):
        return None
    ts = combine_terms(terms(node))
    if len(ts) < 2:
        return None
    total = ctx.values(node)
    if total is None:
        return None
    ref = _rms(total)
    keep = []
    for c, m in ts:
        v = ctx.values(_term_node(c, m))
        if v is not None and _rms(v) < ctx.cfg.negligible * ref:
            continue
        keep.append((c, m))
    if len(keep) == len(ts) or not keep:
        return None
    return build_sum(keep)


def rule_flat_call(node: Node, ctx) -> Node | None:
    """A call that is effectively constant over the ranges becomes that constant."""
    if not (isinstance(node, (Call, BinOp)) and _has_var(node)):
        return None
    if isinstance(node, BinOp) and node.op != "pow":
        return None
    v = ctx.values(node)
    if v is None:
        return None
    mean = float(np.mean(v))
    if np.ptp(v) <= ctx.cfg.negligible * max(abs(mean), 1e-300):
        return _c(mean)
    return None


def snap_value(value: float, tol: float) -> Node | None:
    if value == 0.0 or value.is_integer():
        return None
    r = round(value)
    if abs(value - r) <= tol * max(1.0, abs(value)):
        return _c(r)
    k = round(value / math.pi)
    if 1 <= abs(k) <= 4 and abs(value - k * math.pi) <= tol * abs(value):
        pi = Const(math.pi, "pi")
        if k == 1:
            return pi
        if k == -1:
            return Neg(pi)
        return BinOp("mul", _c(k), pi)
    return None


def rule_snap(node: Node, ctx) -> Node | None:
    if not _num(node):
        return None
    return snap_value(float(node.value), ctx.cfg.snap_tol)


def rule_neg(node: Node, ctx) -> Node | None:
    if isinstance(node, Neg):
        inner = node.operand
        if isinstance(inner, Neg):
            return inner.operand
        if _num(inner):
            return _c(-inner.value)
    return None


RULES = {
    "fold": rule_fold,
    "neg": rule_neg,
    "log_exp": rule_log_exp,
    "exp_log": rule_exp,
    "flat_call": rule_flat_call,
    "product": rule_product,
    "sum": rule_sum,
    "negligible": rule_negligible,
}


@dataclass(frozen=True)
class Rewrite:
    rule: str
    before: str
    after: str
    deviation: float


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v)))


def sample_inputs(ranges, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.array([r[0] for r in ranges], float)
    hi = np.array([r[1] for r in ranges], float)
    return lo + (hi - lo) * rng.random((n, len(ranges)))


class _Context:
    def __init__(self, root: Node, d: int, ranges, cfg: SimplifyConfig):
        self.d = d
        self.cfg = cfg
        self.X = sample_inputs(ranges, cfg.samples, cfg.seed)
        self.original = self._eval(root)

    def _eval(self, node: Node) -> np.ndarray:
        expr = Expression(node, self.d, 0)
        return expr.compile()(self.X, np.zeros(0))

    def values(self, node: Node) -> np.ndarray | None:
        v = self._eval(node)
        return v if np.all(np.isfinite(v)) else None

    def deviation(self, old: np.ndarray, new: np.ndarray) -> float:
        """Max |new - old| over the samples relative to RMS(old); inf if finiteness differs."""
        fo, fn = np.isfinite(old), np.isfinite(new)
        if not np.array_equal(fo, fn):
            return math.inf
        if not fo.any():
            return 0.0
        diff = float(np.max(np.abs(new[fo] - old[fo])))
        if diff == 0.0:
            return 0.0
        return diff / max(_rms(old[fo]), 1e-300)


def _get(node: Node, path) -> Node:
    for k in path:
        node = children(node)[k]
    return node


def _put(node: Node, path, new: Node) -> Node:
    if not path:
        return new
    kids = list(children(node))
    kids[path[0]] = _put(kids[path[0]], path[1:], new)
    return _rebuild(node, kids)


def simplify_node(root: Node, d: int, ranges, cfg: SimplifyConfig = SimplifyConfig(), snap: bool = True, trace=None) -> Node:
    ctx = _Context(root, d, ranges, cfg)
    rules = list(RULES.items()) + ([("snap", rule_snap)] if snap else [])
    state = {"root": root, "values": ctx.original}

    def try_rules(path) -> bool:
        changed = False
        node = _get(state["root"], path)
        for name, rule in rules:
            cand = rule(node, ctx)
            if cand is None or cand == node:
                continue
            if complexity(cand) > complexity(node):
                continue
            new_root = _put(state["root"], path, cand)
            new_values = ctx._eval(new_root)
            dev = max(ctx.deviation(state["values"], new_values), ctx.deviation(ctx.original, new_values))
            if dev > cfg.negligible:
                continue
            if trace is not None:
                trace.append(Rewrite(name, _node_key(node), _node_key(cand), dev))
            state["root"], state["values"] = new_root, new_values
            node = cand
            changed = True
        return changed

    def visit(path) -> bool:
        changed = False
        k = 0
        while k < len(children(_get(state["root"], path))):
            changed |= visit(path + (k,))
            k += 1
        changed |= try_rules(path)
        return changed

    for _ in range(cfg.max_passes):
        if not visit(()):
            break
    return state["root"]


def simplify_algebraic(expr: Expression, ranges, cfg: SimplifyConfig = SimplifyConfig(), params=None, snap: bool = True, trace=None) -> Expression:
    """Rewrite to a simpler, numerically equivalent expression over ``ranges``.

    Parameters are inlined from ``params`` first, so the result has none; use
    :func:`parameterize` to turn its free constants back into parameters.
    """
    root = expr.root
    if expr.n_params:
        if params is None:
            raise ValueError("parameter values are needed to simplify a parameterised expression")
        root = inline_params(root, params)
    if len(ranges) != expr.n_inputs:
        raise ValueError("one range per input required")
    out = simplify_node(root, expr.n_inputs, ranges, cfg, snap, trace)
    return Expression(out, expr.n_inputs, 0)


def parameterize(expr: Expression) -> tuple[Expression, np.ndarray]:
    """Replace non-integer numeric constants by parameters, in reading order.

    Integer-valued constants and named constants stay fixed.
    """
    values: list[float] = []

    def go(node: Node) -> Node:
        if isinstance(node, Const):
            if node.name is None and not float(node.value).is_integer():
                values.append(float(node.value))
                return Param(len(values) - 1)
            return node
        if isinstance(node, Param):
            raise ValueError("expression already has parameters")
        kids = children(node)
        if not kids:
            return node
        if isinstance(node, BinOp) and node.op == "pow":
            return BinOp("pow", go(node.left), go(node.right))
        return _rebuild(node, [go(k) for k in kids])

    root = go(expr.root)
    return Expression(root, expr.n_inputs, len(values)), np.array(values)


# ---------------------------------------------------------------------------
# Refit and LLM stage


@dataclass
class Fitted:
    expression: Expression
    params: np.ndarray
    score: float
    stage: str = ""

    @property
    def complexity(self) -> int:
        return complexity(self.expression)

    @property
    def source(self) -> str:
        return to_source(self.expression, self.params)


@dataclass
class SimplifyResult:
    best: Fitted
    first_refit: Fitted
    stages: list[Fitted] = field(default_factory=list)
    proposals: list[str] = field(default_factory=list)
    warning: str | None = None

    @property
    def expression(self) -> Expression:
        return self.best.expression

    @property
    def score(self) -> float:
        return self.best.score


def refit(expr: Expression, data: Dataset, cfg: SimplifyConfig, x0=None, stage: str = "refit") -> Fitted:
    params, value = fit_params(expr, data, cfg.score, cfg.fit, x0=x0 if expr.n_params else None)
    return Fitted(expr, np.asarray(params, float), float(value), stage)


def _ties(a: Fitted, b: Fitted, cfg: SimplifyConfig) -> bool:
    return a.score <= b.score * (1.0 + cfg.tie_margin) + cfg.tie_floor


def select(cands: list[Fitted], cfg: SimplifyConfig) -> Fitted:
    """Lowest score; within the tie margin of it, lowest complexity, then lowest score."""
    finite = [c for c in cands if math.isfinite(c.score)]
    if not finite:
        return cands[0]
    best = min(finite, key=lambda c: c.score)
    tied = [c for c in finite if _ties(c, best, cfg)]
    return min(tied, key=lambda c: (c.complexity, c.score))


def algebraic_stage(current: Fitted, data: Dataset, ranges, cfg: SimplifyConfig) -> Fitted:
    """Rewrite, re-parameterise and refit; snapped constants must keep the score."""
    out = []
    for snap in (False, True):
        simple = simplify_algebraic(current.expression, ranges, cfg, current.params, snap=snap)
        pexpr, x0 = parameterize(simple)
        out.append(refit(pexpr, data, cfg, x0, "algebraic+snap" if snap else "algebraic"))
    plain, snapped = out
    if _ties(snapped, plain, cfg) and snapped.complexity <= plain.complexity:
        return snapped
    return plain


def _prepare_proposal(text: str, d: int, ranges, cfg: SimplifyConfig) -> tuple[Expression, np.ndarray | None]:
    expr = parse_candidate(text, d)
    if expr.n_params:
        return expr, None
    simple = simplify_algebraic(expr, ranges, cfg, snap=False)
    return parameterize(simple)


def llm_stage(current: Fitted, data: Dataset, ranges, cfg: SimplifyConfig, client: LlmClient | None):
    """Ask for simplified rewrites, refit each, keep the best."""
    d = data.d
    names = [canonical_variable_name(i, d) for i in range(d)]
    if client is None or cfg.n_proposals == 0:
        return current, [], "no simplification proposals requested"
    prompt = build_simplify_prompt(to_source(current.expression, current.params, 6), ranges, names)
    texts = client.propose(None, prompt, cfg.n_proposals)
    cands = [current]
    for text in texts:
        try:
            expr, x0 = _prepare_proposal(text, d, ranges, cfg)
        except ExprError as err:
            log.debug("unusable simplification proposal %r (%s)", text, err)
            continue
        cands.append(refit(expr, data, cfg, x0, "llm"))
    warning = None if len(cands) > 1 else "no usable simplification proposals"
    if warning:
        log.warning(warning)
    return select(cands, cfg), texts, warning


def llm_simplify_refit(
    expr: Expression,
    params,
    data: Dataset,
    ranges=None,
    cfg: SimplifyConfig = SimplifyConfig(),
    client: LlmClient | None = None,
) -> SimplifyResult:
    """Refit, then ``cfg.rounds`` rounds of rewrite, refit, LLM proposals and refit.

    The returned best score is never worse than that of the first refit.
    """
    ranges = tuple(ranges or data.input_ranges)
    x0 = None if params is None or not expr.n_params else np.asarray(params, float)
    first = refit(expr, data, cfg, x0, "refit")
    current = first
    stages, proposals, warning = [first], [], None
    try:
        for _ in range(cfg.rounds):
            current = select([current, algebraic_stage(current, data, ranges, cfg)], cfg)
            stages.append(current)
            current, texts, warning = llm_stage(current, data, ranges, cfg, client)
            proposals.extend(texts)
            current = select([current, algebraic_stage(current, data, ranges, cfg)], cfg)
            stages.append(current)
    except (ExprError, ValueError) as err:
        log.warning("simplification stopped early: %s", err)
        warning = f"simplification stopped early: {err}"
    best = current if current.score <= first.score else first
    return SimplifyResult(best, first, stages, proposals, warning)
