import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plotsr.expr import (
    ArityError,
    BinOp,
    Call,
    Const,
    DimensionMismatch,
    Expression,
    Param,
    ParseError,
    UnknownFunction,
    Var,
    VariableOutOfRange,
    complexity,
    evaluate,
    parse_candidate,
    substitute,
    to_source,
    walk,
)


def test_constant_lambda():
    e = parse_candidate("lambda x,*params: params[0]")
    assert e.n_params == 1
    assert e.root == Param(0)
    assert complexity(e) == 1


def test_listing_body_shape():
    e = parse_candidate("np.sin(params[0]*x)*np.exp(-params[1]*x**2)")
    assert e.n_params == 2
    assert isinstance(e.root, BinOp) and e.root.op == "mul"
    assert isinstance(e.root.left, Call) and e.root.left.func == "sin"
    assert isinstance(e.root.right, Call) and e.root.right.func == "exp"


@pytest.mark.parametrize("bad", ["lambda x: np.foo(x", "np.foo(x)", "x +", "params", "params[]", "x if x > 0 else 0"])
def test_malformed_rejected(bad):
    with pytest.raises((ParseError, UnknownFunction)):
        parse_candidate(bad)


def test_unknown_function_reports_token():
    with pytest.raises(UnknownFunction) as err:
        parse_candidate("np.frobnicate(x)")
    assert "frobnicate" in str(err.value)


def test_parse_error_has_position():
    with pytest.raises(ParseError) as err:
        parse_candidate("x * * 2")
    assert err.value.position is not None


def test_arity_and_variable_range():
    with pytest.raises(ArityError):
        parse_candidate("np.sin(x, x)")
    with pytest.raises(VariableOutOfRange):
        parse_candidate("x * y", 1)


def test_stripping_order():
    text = "```python\ncurve_2 = lambda x,*params: params[0]*x + params[1]\n```"
    e = parse_candidate(text)
    assert to_source(e) == "params[0] * x + params[1]"


def test_sparse_params_reindexed():
    e = parse_candidate("params[3]*x + params[7]")
    assert e.n_params == 2
    assert sorted(n.index for n in walk(e.root) if isinstance(n, Param)) == [0, 1]


def test_positional_params():
    e = parse_candidate("lambda x, a, b: a*np.exp(-b*x)")
    assert e.n_params == 2
    assert to_source(e) == "params[0] * np.exp(-params[1] * x)"


def test_evaluate_constant():
    e = parse_candidate("params[0]")
    values, mask = evaluate(e, np.array([[0.0], [1.0]]), [3.0])
    assert values.tolist() == [3.0, 3.0]
    assert mask.all()


def test_evaluate_odd_at_origin():
    e = parse_candidate("np.sin(2*x)*np.exp(-10*x**2)")
    values, _ = evaluate(e, np.zeros((1, 1)))
    assert values[0] == 0.0


def test_domain_error_is_masked():
    e = parse_candidate("np.log(x)")
    values, mask = evaluate(e, np.array([[-1.0], [1.0]]))
    assert not mask[0] and mask[1]
    assert not np.isfinite(values[0])


@pytest.mark.parametrize("src", ["1/x", "x**-1", "np.exp(1000*x)", "np.sqrt(x - 5)", "x % 0"])
def test_domain_failures_are_data(src):
    values, mask = evaluate(parse_candidate(src), np.array([[0.0], [1.0]]))
    assert np.array_equal(mask, np.isfinite(values))


def test_evaluate_dimension_mismatch():
    e = parse_candidate("params[0]*x")
    with pytest.raises(DimensionMismatch):
        evaluate(e, np.ones((3, 2)), [1.0])
    with pytest.raises(DimensionMismatch):
        evaluate(e, np.ones((3, 1)), [1.0, 2.0])


def test_complexity_counts():
    e = parse_candidate("params[0]*x + params[1]")
    assert complexity(e) == 5
    assert complexity(parse_candidate(to_source(e))) == 5


def test_constants_and_prefixes():
    e = parse_candidate("np.pi * x + e + scipy.special.erf(x) + special.jv(0, x)")
    values, mask = evaluate(e, np.array([[0.0]]))
    assert mask.all()
    assert values[0] == pytest.approx(np.e + 1.0)


def test_multivariate_names():
    e = parse_candidate("x*y/z", 3)
    assert to_source(e) == "x * y / z"
    v, _ = evaluate(e, np.array([[2.0, 3.0, 1.5]]))
    assert v[0] == pytest.approx(4.0)


def test_substitute_shifts_params():
    inner = parse_candidate("params[0]*np.log(x) + params[1]")
    node = substitute(inner.root, [Var(1)], 3)
    idx = sorted(n.index for n in walk(node) if isinstance(n, Param))
    assert idx == [3, 4]


def test_fitted_source_inlines_values():
    e = parse_candidate("params[0]*x - params[1]")
    assert to_source(e, [2.0, -0.5]) == "2 * x - (-0.5)"


def test_expression_rejects_bad_call():
    with pytest.raises(UnknownFunction):
        Expression(Call("nope", (Var(0),)))


def test_powers_right_associative():
    e = parse_candidate("2**3**2")
    v, _ = evaluate(e, np.zeros((1, 1)))
    assert v[0] == 512.0
    assert parse_candidate("-x**2").root == parse_candidate("-(x**2)").root


def test_corpus_parses_and_round_trips(corpus):
    for item in corpus:
        e = parse_candidate(item["source"], item["d"])
        if "params" in item:
            assert e.n_params == item["params"], item["source"]
        canon = to_source(e)
        again = parse_candidate(canon, item["d"])
        assert again.root == e.root, item["source"]
        assert to_source(again) == canon


# ---------------------------------------------------------------------------
# properties

_leaf = st.one_of(
    st.builds(Var, st.just(0)),
    st.builds(Param, st.integers(0, 2)),
    st.builds(Const, st.floats(-100, 100, allow_nan=False).map(lambda v: round(v, 3))),
)


def _extend(children):
    return st.one_of(
        st.builds(BinOp, st.sampled_from(["add", "sub", "mul", "div", "pow"]), children, children),
        st.builds(lambda f, a: Call(f, (a,)), st.sampled_from(["sin", "exp", "log", "sqrt", "tanh", "abs"]), children),
    )


trees = st.recursive(_leaf, _extend, max_leaves=12)


def _expression(root):
    used = sorted({n.index for n in walk(root) if isinstance(n, Param)})
    mapping = {k: i for i, k in enumerate(used)}

    def renum(node):
        if isinstance(node, Param):
            return Param(mapping[node.index])
        if isinstance(node, BinOp):
            return BinOp(node.op, renum(node.left), renum(node.right))
        if isinstance(node, Call):
            return Call(node.func, tuple(renum(a) for a in node.args))
        return node

    return Expression(renum(root), 1)


@given(trees)
def test_round_trip_property(root):
    e = parse_candidate(to_source(_expression(root)))
    canon = to_source(e)
    again = parse_candidate(canon)
    assert again.root == e.root
    assert to_source(again) == canon
    assert complexity(again) == complexity(e)


@given(trees, st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_evaluate_pure_and_mask_sound(root, p):
    e = _expression(root)
    X = np.linspace(-2, 2, 17)[:, None]
    params = np.array(p[: e.n_params])
    v1, m1 = evaluate(e, X, params)
    v2, m2 = evaluate(e, X, params)
    assert np.array_equal(v1, v2, equal_nan=True)
    assert np.array_equal(m1, m2)
    assert np.all(np.isfinite(v1[m1]))


@given(trees)
def test_params_dense_after_parse(root):
    e = parse_candidate(to_source(_expression(root)))
    used = sorted({n.index for n in walk(e.root) if isinstance(n, Param)})
    assert used == list(range(e.n_params))
