"""Parameterized expression trees, the candidate-source parser, and evaluation.

Candidate sources are the lambda-style Python snippets a chat model emits,
e.g. ``curve_2 = lambda x,*params: params[0]*np.exp(-params[1]*x)``.  They are
parsed into an immutable AST rather than executed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np
import scipy.special as sps


class ExprError(ValueError):
    pass


class ParseError(ExprError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class UnknownFunction(ExprError):
    def __init__(self, token: str, position: int | None = None):
        self.token = token
        self.position = position
        super().__init__(f"unknown function {token!r}")


class ArityError(ExprError):
    pass


class VariableOutOfRange(ExprError):
    pass


class DimensionMismatch(ExprError):
    pass


# ---------------------------------------------------------------------------
# Function catalog


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    arity: int
    impl: Callable[..., np.ndarray]
    module: str  # "np" or "scipy.special"; used for the canonical token
    token: str  # attribute name under ``module``
    aliases: tuple[str, ...] = ()

    @property
    def canonical_token(self) -> str:
        return f"{self.module}.{self.token}"


def _np(name, arity, impl, token=None, aliases=()):
    return FunctionSpec(name, arity, impl, "np", token or name, tuple(aliases))


def _sp(name, arity, impl, token=None, aliases=()):
    return FunctionSpec(name, arity, impl, "scipy.special", token or name, tuple(aliases))


_ENTRIES = [
    _np("sin", 1, np.sin),
    _np("cos", 1, np.cos),
    _np("tan", 1, np.tan),
    _np("tanh", 1, np.tanh),
    _np("sinh", 1, np.sinh),
    _np("cosh", 1, np.cosh),
    _np("arctan", 1, np.arctan),
    _np("arcsin", 1, np.arcsin),
    _np("arccos", 1, np.arccos),
    _np("exp", 1, np.exp),
    _np("log", 1, np.log),
    _np("log10", 1, np.log10),
    _np("sqrt", 1, np.sqrt),
    _np("abs", 1, np.abs, aliases=("absolute", "fabs")),
    _np("sign", 1, np.sign),
    _np("floor", 1, np.floor),
    _np("power", 2, np.power),
    _np("maximum", 2, np.maximum),
    _np("minimum", 2, np.minimum),
    # frequently emitted numpy extras
    _np("log2", 1, np.log2),
    _np("log1p", 1, np.log1p),
    _np("expm1", 1, np.expm1),
    _np("square", 1, np.square),
    _np("cbrt", 1, np.cbrt),
    _np("arcsinh", 1, np.arcsinh),
    _np("arccosh", 1, np.arccosh),
    _np("arctanh", 1, np.arctanh),
    _np("arctan2", 2, np.arctan2),
    # special functions
    _sp("besselj", 2, sps.jv, token="jv", aliases=("jn", "jv")),
    _sp("bessely", 2, sps.yv, token="yv", aliases=("yn", "yv")),
    _sp("erf", 1, sps.erf),
    _sp("erfc", 1, sps.erfc),
    _sp("gamma", 1, sps.gamma),
    _sp("loggamma", 1, lambda x: np.real(sps.loggamma(x)), aliases=("gammaln",)),
]

CATALOG: dict[str, FunctionSpec] = {}
_TOKENS: dict[str, str] = {}
for _spec in _ENTRIES:
    if _spec.name in CATALOG:
        raise RuntimeError(f"duplicate catalog entry {_spec.name}")
    CATALOG[_spec.name] = _spec
    for _alias in (_spec.name, *_spec.aliases):
        _TOKENS.setdefault(_alias, _spec.name)

NAMED_CONSTANTS = {"pi": math.pi, "e": math.e}
_PREFIXES = ("np.", "numpy.", "scipy.special.", "special.")


def lookup_function(token: str) -> FunctionSpec | None:
    """Resolve ``np.sin`` / ``scipy.special.jv`` / ``sin`` to a catalog entry."""
    bare = token
    for prefix in _PREFIXES:
        if token.startswith(prefix):
            bare = token[len(prefix):]
            break
    name = _TOKENS.get(bare)
    return CATALOG[name] if name is not None else None


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float
    name: str | None = None  # "pi" / "e" for named constants


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Param:
    index: int


@dataclass(frozen=True)
class Neg:
    operand: "Node"


BINARY_OPS = ("add", "sub", "mul", "div", "pow", "mod")


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Node", ...]


Node = Union[Const, Var, Param, Neg, BinOp, Call]


def children(node: Node) -> tuple[Node, ...]:
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return node.args
    return ()


def walk(node: Node) -> Iterator[Node]:
    yield node
    for child in children(node):
        yield from walk(child)


def count_nodes(node: Node) -> int:
    return sum(1 for _ in walk(node))


@dataclass(frozen=True)
class Expression:
    """An immutable expression over ``n_inputs`` variables and ``n_params`` parameters."""

    root: Node
    n_inputs: int = 1
    n_params: int = field(default=-1)

    def __post_init__(self):
        used = sorted({n.index for n in walk(self.root) if isinstance(n, Param)})
        if self.n_params < 0:
            object.__setattr__(self, "n_params", len(used))
        if used and used[-1] >= self.n_params:
            raise ExprError("parameter index exceeds n_params")
        for n in walk(self.root):
            if isinstance(n, Var) and n.index >= self.n_inputs:
                raise VariableOutOfRange(f"variable index {n.index} >= input dimension {self.n_inputs}")
            if isinstance(n, Call):
                spec = CATALOG.get(n.func)
                if spec is None:
                    raise UnknownFunction(n.func)
                if len(n.args) != spec.arity:
                    raise ArityError(f"{n.func} takes {spec.arity} argument(s), got {len(n.args)}")

    def __str__(self) -> str:
        return to_source(self)

    @property
    def source(self) -> str:
        return to_source(self)

    def compile(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        return _compile(self)


def complexity(expr: Expression | Node) -> int:
    """Number of AST nodes."""
    root = expr.root if isinstance(expr, Expression) else expr
    return count_nodes(root)


# ---------------------------------------------------------------------------
# Source extraction


_FENCE = re.compile(r"```[a-zA-Z0-9_+-]*\n?(.*?)(?:```|$)", re.S)
_ASSIGN = re.compile(r"^\s*[A-Za-z_][A-Za-z_0-9]*\s*=(?!=)\s*")
_LAMBDA = re.compile(r"^\s*lambda\b([^:]*):")


def _strip_fences(text: str) -> str:
    if "```" not in text:
        return text
    match = _FENCE.search(text)
    return match.group(1) if match else text.replace("```", "")


def extract_body(source: str) -> tuple[str, list[str] | None]:
    """Strip fences, an assignment prefix and a lambda header.

    Returns the expression body and the lambda argument list (None when the
    source had no header).
    """
    text = _strip_fences(source).strip()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    # keep the last lambda line and its continuation lines
    lambda_rows = [i for i, ln in enumerate(lines) if "lambda" in ln]
    if lambda_rows:
        lines = lines[lambda_rows[-1]:]
    text = " ".join(ln.strip() for ln in lines)
    text = _ASSIGN.sub("", text, count=1)
    header = None
    match = _LAMBDA.match(text)
    if match:
        header = [a.strip() for a in match.group(1).split(",") if a.strip()]
        text = text[match.end():]
    text = text.strip().rstrip(";").strip()
    if text.endswith(".") and len(text) > 1 and not text[-2].isdigit():
        text = text[:-1].rstrip()
    return text, header


# ---------------------------------------------------------------------------
# Tokenizer and parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*(?:\.[A-Za-z_][A-Za-z_0-9]*)*)
  | (?P<op>\*\*|[-+*/%(),\[\]])
    """,
    re.X,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> list[_Tok]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            out.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    out.append(_Tok("end", "", pos))
    return out


def default_variable_names(input_dim: int) -> dict[str, int]:
    names = {f"x{i}": i for i in range(input_dim)}
    if input_dim == 1:
        names["x"] = 0
    elif input_dim > 1:
        for i, alias in enumerate("xyz"):
            names[alias] = i
    return names


def canonical_variable_name(index: int, input_dim: int) -> str:
    if input_dim == 1:
        return "x"
    if input_dim <= 3:
        return "xyz"[index]
    return f"x{index}"


class _Parser:
    """Precedence-climbing parser following Python's operator rules.

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/'|'%') unary)*
    unary  := ('-'|'+') unary | power
    power  := atom ('**' unary)?
    """

    def __init__(self, text, input_dim, var_names, array_names, positional):
        self.toks = tokenize(text)
        self.i = 0
        self.input_dim = input_dim
        self.var_names = var_names
        self.array_names = array_names
        self.positional = positional
        self.param_refs: list[tuple[str, int]] = []

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.pos)
        return tok

    def parse(self) -> Node:
        if self.peek().kind == "end":
            raise ParseError("empty expression", 0)
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected token {tok.text!r}", tok.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = "add" if self.next().text == "+" else "sub"
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().text in ("*", "/", "%"):
            op = {"*": "mul", "/": "div", "%": "mod"}[self.next().text]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok.text == "-":
            self.next()
            return Neg(self.unary())
        if tok.text == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek().text == "**":
            self.next()
            return BinOp("pow", base, self.unary())
        return base

    def int_index(self) -> int:
        self.expect("[")
        tok = self.next()
        if tok.kind != "num" or not tok.text.isdigit():
            raise ParseError("expected non-negative integer index", tok.pos)
        self.expect("]")
        return int(tok.text)

    def atom(self) -> Node:
        tok = self.next()
        if tok.kind == "num":
            return Const(float(tok.text))
        if tok.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind != "name":
            raise ParseError(f"unexpected token {tok.text or 'end of input'!r}", tok.pos)
        name = tok.text
        if self.peek().text == "(":
            return self.call(tok)
        if name in self.array_names:
            if self.peek().text != "[":
                raise ParseError(f"{name} used without an index", tok.pos)
            k = self.int_index()
            self.param_refs.append(("array", k))
            return Param(len(self.param_refs) - 1)
        if name in self.positional:
            self.param_refs.append(("positional", self.positional[name]))
            return Param(len(self.param_refs) - 1)
        if name in self.var_names:
            idx = self.var_names[name]
            if self.peek().text == "[":
                raise ParseError(f"cannot index variable {name}", self.peek().pos)
            if idx >= self.input_dim:
                raise VariableOutOfRange(f"variable {name} out of range for input dimension {self.input_dim}")
            return Var(idx)
        if name == "x" and self.peek().text == "[":
            idx = self.int_index()
            if idx >= self.input_dim:
                raise VariableOutOfRange(f"variable x[{idx}] out of range for input dimension {self.input_dim}")
            return Var(idx)
        bare = name
        for prefix in ("np.", "numpy.", "math."):
            if name.startswith(prefix):
                bare = name[len(prefix):]
        if bare in NAMED_CONSTANTS:
            return Const(NAMED_CONSTANTS[bare], bare)
        if re.fullmatch(r"x\d+|[yz]", name):
            raise VariableOutOfRange(f"variable {name} out of range for input dimension {self.input_dim}")
        raise ParseError(f"unknown identifier {name!r}", tok.pos)

    def call(self, name_tok: _Tok) -> Node:
        spec = lookup_function(name_tok.text)
        if spec is None:
            raise UnknownFunction(name_tok.text, name_tok.pos)
        self.expect("(")
        args = [self.expr()]
        while self.peek().text == ",":
            self.next()
            args.append(self.expr())
        self.expect(")")
        if len(args) != spec.arity:
            raise ArityError(f"{spec.name} takes {spec.arity} argument(s), got {len(args)}")
        return Call(spec.name, tuple(args))


def _renumber(node: Node, mapping: dict[int, int]) -> Node:
    if isinstance(node, Param):
        return Param(mapping[node.index])
    if isinstance(node, Neg):
        return Neg(_renumber(node.operand, mapping))
    if isinstance(node, BinOp):
        return BinOp(node.op, _renumber(node.left, mapping), _renumber(node.right, mapping))
    if isinstance(node, Call):
        return Call(node.func, tuple(_renumber(a, mapping) for a in node.args))
    return node


def parse_candidate(source: str, input_dim: int = 1) -> Expression:
    """Parse raw model output into an :class:`Expression`.

    Code fences, an assignment prefix (``curve_2 =``) and a lambda header are
    stripped in that order.  Parameters may be written ``params[k]`` or named
    positionally in the header; either way they are re-indexed densely.
    """
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    body, header = extract_body(source)
    if header is None:
        var_names = default_variable_names(input_dim)
        array_names = {"params"}
        positional: dict[str, int] = {}
    else:
        var_names, array_names, positional = {}, set(), {}
        plain = [a for a in header if not a.startswith("*")]
        starred = [a.lstrip("*") for a in header if a.startswith("*")]
        if len(plain) < input_dim and not (len(plain) == 1 and input_dim > 1):
            raise ParseError("lambda header lists fewer inputs than the input dimension", 0)
        if len(plain) == 1 and input_dim > 1:
            # lambda X, *params: with X indexed as x[i] is not supported; treat X as x
            var_names = default_variable_names(input_dim)
            rest = []
        else:
            for i, name in enumerate(plain[:input_dim]):
                var_names[name] = i
            rest = plain[input_dim:]
        array_names.update(starred)
        for name in rest:
            # a header name that is subscripted in the body is the parameter array
            if name == "params" or re.search(rf"\b{re.escape(name)}\s*\[", body):
                array_names.add(name)
            else:
                positional[name] = len(positional)
        if not array_names:
            array_names.add("params")
    parser = _Parser(body, input_dim, var_names, array_names, positional)
    root = parser.parse()
    # dense re-indexing: array references by index, then positional names in header order
    keys = sorted(set(parser.param_refs), key=lambda r: (r[0] != "array", r[1]))
    dense = {key: i for i, key in enumerate(keys)}
    mapping = {slot: dense[ref] for slot, ref in enumerate(parser.param_refs)}
    root = _renumber(root, mapping)
    return Expression(root, input_dim, len(keys))


# ---------------------------------------------------------------------------
# Canonical source

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "mod": 2, "neg": 3, "pow": 4}
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "mod": "%", "pow": "**"}
_ATOM = 5


def format_number(value: float) -> str:
    if value != value or value in (math.inf, -math.inf):
        raise ExprError(f"cannot format non-finite constant {value}")
    if value.is_integer() and abs(value) < 1e15:
        text = str(int(value))
    else:
        text = repr(float(value))
    return text


def _precedence(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    return _ATOM


def _render(node: Node, n_inputs: int, param_text: Callable[[int], str]) -> str:
    def sub(child: Node, min_prec: int) -> str:
        text = _render(child, n_inputs, param_text)
        return f"({text})" if _precedence(child) < min_prec else text

    if isinstance(node, Const):
        if node.name is not None:
            return f"np.{node.name}"
        text = format_number(node.value)
        return f"({text})" if node.value < 0 or text.startswith("-") else text
    if isinstance(node, Var):
        return canonical_variable_name(node.index, n_inputs)
    if isinstance(node, Param):
        return param_text(node.index)
    if isinstance(node, Neg):
        return "-" + sub(node.operand, _PREC["neg"])
    if isinstance(node, BinOp):
        prec = _PREC[node.op]
        if node.op == "pow":
            # right-associative; the exponent is a unary-level operand
            left = sub(node.left, prec + 1)
            right = sub(node.right, _PREC["neg"])
        else:
            left = sub(node.left, prec)
            right = sub(node.right, prec + 1)
        return f"{left} {_SYMBOL[node.op]} {right}"
    if isinstance(node, Call):
        spec = CATALOG[node.func]
        args = ", ".join(_render(a, n_inputs, param_text) for a in node.args)
        return f"{spec.canonical_token}({args})"
    raise TypeError(f"not an expression node: {node!r}")


def to_source(expr: Expression, params: Sequence[float] | None = None, digits: int | None = None) -> str:
    """Canonical source text.  With ``params`` the fitted values are inlined."""
    if params is None:
        param_text = lambda k: f"params[{k}]"  # noqa: E731
    else:
        values = [float(v) for v in params]

        def param_text(k: int) -> str:
            v = values[k]
            text = format(v, f".{digits}g") if digits else format_number(v)
            return f"({text})" if text.startswith("-") else text

    return _render(expr.root, expr.n_inputs, param_text)


def lambda_source(expr: Expression) -> str:
    args = ", ".join(canonical_variable_name(i, expr.n_inputs) for i in range(expr.n_inputs))
    return f"lambda {args},*params: {to_source(expr)}"


# ---------------------------------------------------------------------------
# Evaluation


_BINARY_IMPL = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "pow": np.power,
    "mod": np.mod,
}


def _compile_node(node: Node) -> Callable[[np.ndarray, np.ndarray], np.ndarray | float]:
    if isinstance(node, Const):
        value = float(node.value)
        return lambda X, p: value
    if isinstance(node, Var):
        i = node.index
        return lambda X, p: X[:, i]
    if isinstance(node, Param):
        k = node.index
        return lambda X, p: p[k]
    if isinstance(node, Neg):
        inner = _compile_node(node.operand)
        return lambda X, p: np.negative(inner(X, p))
    if isinstance(node, BinOp):
        f = _BINARY_IMPL[node.op]
        a, b = _compile_node(node.left), _compile_node(node.right)
        return lambda X, p: f(a(X, p), b(X, p))
    if isinstance(node, Call):
        impl = CATALOG[node.func].impl
        args = [_compile_node(a) for a in node.args]
        if len(args) == 1:
            (g,) = args
            return lambda X, p: impl(g(X, p))
        return lambda X, p: impl(*(g(X, p) for g in args))
    raise TypeError(f"not an expression node: {node!r}")


def _compile(expr: Expression) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    body = _compile_node(expr.root)
    n_inputs, n_params = expr.n_inputs, expr.n_params

    def run(X: np.ndarray, params) -> np.ndarray:
        p = np.asarray(params, dtype=float)
        if p.shape != (n_params,):
            raise DimensionMismatch(f"expected {n_params} parameters, got {p.shape}")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1 and n_inputs == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] != n_inputs:
            raise DimensionMismatch(f"expected inputs of shape (N, {n_inputs}), got {X.shape}")
        with np.errstate(all="ignore"):
            out = body(X, p)
            out = np.asarray(out)
            if np.iscomplexobj(out):
                out = np.where(np.imag(out) == 0, np.real(out), np.nan)
            out = np.broadcast_to(out.astype(float, copy=False), (X.shape[0],)).copy()
        return out

    return run


def evaluate(expr: Expression, inputs, params=()) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate on an (N, d) block; returns ``(values, finite_mask)``.

    Domain failures (log of negatives, 0**-1, overflow) show up as non-finite
    values with ``mask == False`` rather than raising.
    """
    values = expr.compile()(inputs, params)
    mask = np.isfinite(values)
    return values, mask


# ---------------------------------------------------------------------------
# Tree helpers used by the composer and simplifier


def substitute(node: Node, variables: Sequence[Node] | None = None, param_offset: int = 0) -> Node:
    """Replace ``Var(i)`` by ``variables[i]`` and shift parameter indices."""
    if isinstance(node, Var):
        return variables[node.index] if variables is not None else node
    if isinstance(node, Param):
        return Param(node.index + param_offset)
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, variables, param_offset))
    if isinstance(node, BinOp):
        return BinOp(node.op, substitute(node.left, variables, param_offset), substitute(node.right, variables, param_offset))
    if isinstance(node, Call):
        return Call(node.func, tuple(substitute(a, variables, param_offset) for a in node.args))
    return node


def inline_params(node: Node, values: Sequence[float]) -> Node:
    """Replace every ``Param(k)`` with ``Const(values[k])``."""
    if isinstance(node, Param):
        return Const(float(values[node.index]))
    if isinstance(node, Neg):
        return Neg(inline_params(node.operand, values))
    if isinstance(node, BinOp):
        return BinOp(node.op, inline_params(node.left, values), inline_params(node.right, values))
    if isinstance(node, Call):
        return Call(node.func, tuple(inline_params(a, values) for a in node.args))
    return node
