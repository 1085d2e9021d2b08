import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plotsr.expr import DimensionMismatch
from plotsr.kan import (
    DisabledEdge,
    KanModel,
    KanTrainConfig,
    bspline_basis,
    edge_dataset,
    edge_scores,
    greville,
    kan_forward,
    kan_prune,
    kan_train,
    loss_and_grads,
    shrink,
    zero_disabled,
)
from plotsr.numfit import Dataset


def identity_model(lo=-1.0, hi=1.0) -> KanModel:
    m = KanModel.create([1, 1], ranges=[(lo, hi)])
    layer = m.layers[0]
    layer.coef[0, 0] = greville(lo, hi, layer.grid_size)
    layer.base_w[:] = 0.0
    layer.spline_w[:] = 1.0
    return m


@given(st.floats(-3, 3), st.floats(0.1, 5), st.integers(1, 12))
def test_partition_of_unity(lo, span, G):
    t = np.linspace(lo, lo + span, 101)[:, None]
    B, dB = bspline_basis(t, np.array([lo]), np.array([lo + span]), G)
    assert np.all(np.abs(B.sum(axis=-1) - 1.0) <= 1e-9)
    assert np.all(np.abs(dB.sum(axis=-1)) <= 1e-9)
    assert np.all(B >= -1e-15)


def test_basis_derivative_matches_finite_difference():
    lo, hi = np.array([0.0]), np.array([2.0])
    t = np.linspace(0.01, 1.99, 37)[:, None]
    h = 1e-6
    B, dB = bspline_basis(t, lo, hi, 5)
    Bp, _ = bspline_basis(t + h, lo, hi, 5)
    Bm, _ = bspline_basis(t - h, lo, hi, 5)
    assert np.allclose((Bp - Bm) / (2 * h), dB, atol=1e-6)


def test_zero_model_outputs_zero():
    m = KanModel.create([2, 3, 1])
    for layer in m.layers:
        for a in (layer.coef, layer.base_w, layer.spline_w):
            a[:] = 0.0
    out, _ = kan_forward(m, np.random.default_rng(0).normal(size=(50, 2)))
    assert np.all(out == 0.0)


def test_identity_edge():
    m = identity_model()
    x = np.linspace(-0.99, 0.99, 200)
    out, _ = kan_forward(m, x[:, None])
    assert np.max(np.abs(out[:, 0] - x)) < 1e-6


def test_linear_extrapolation():
    m = identity_model()
    x = np.array([-3.0, 2.5])
    out, _ = kan_forward(m, x[:, None])
    assert np.allclose(out[:, 0], x, atol=1e-9)


def test_shapes_and_dimension_check():
    m = KanModel.create([2, 4, 4, 1])
    out, caches = kan_forward(m, np.zeros((10_000, 2)))
    assert out.shape == (10_000, 1)
    assert [c.outputs.shape for c in caches] == [(10_000, 2, 4), (10_000, 4, 4), (10_000, 4, 1)]
    with pytest.raises(DimensionMismatch):
        kan_forward(m, np.zeros((5, 3)))


@pytest.mark.parametrize("l1", [0.0, 1e-2])
def test_gradient_check(l1):
    rng = np.random.default_rng(3)
    m = KanModel.create([2, 3, 1], grid_size=4, seed=1, noise=0.5)
    for layer in m.layers:
        layer.bias[:] = rng.normal(size=layer.n_out)
    X = rng.uniform(-1.2, 1.2, size=(40, 2))
    y = np.sin(X[:, 0]) * X[:, 1]
    _, grads = loss_and_grads(m, X, y, l1)
    h = 1e-6
    for p, g in zip(m.parameters(), grads):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = loss_and_grads(m, X, y, l1)
            p[idx] = old - h
            down, _ = loss_and_grads(m, X, y, l1)
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        scale = np.maximum(np.abs(num), 1e-3 * np.max(np.abs(num)) + 1e-8)
        assert np.max(np.abs(g - num) / scale) < 1e-4


def _xy(n=2000, seed=0):
    X = np.random.default_rng(seed).uniform(1, 2, size=(n, 2))
    return Dataset(X, X[:, 0] * X[:, 1], ((1.0, 2.0), (1.0, 2.0)))


def test_training_reduces_loss_and_is_deterministic():
    data = _xy(500)
    cfg = KanTrainConfig(steps=60)
    m = KanModel.create([2, 1, 1], ranges=data.input_ranges)
    a, ha = kan_train(m, data, cfg)
    b, hb = kan_train(m, data, cfg)
    assert ha.train_loss[-1] < ha.train_loss[0]
    assert ha.train_loss == hb.train_loss and ha.val_mse == hb.val_mse
    assert len(ha.val_mse) == 60
    with pytest.raises(ValueError):
        KanTrainConfig(split=1.0)


@pytest.fixture(scope="module")
def trained():
    data = _xy(2000)
    m = KanModel.create([2, 3, 1], ranges=data.input_ranges, seed=2)
    m, _ = kan_train(m, data, KanTrainConfig(steps=200, l1=1e-2))
    _, caches = kan_forward(m, data.inputs)
    return m, caches, data


def test_prune_threshold_zero_is_identity(trained):
    m, caches, _ = trained
    pruned, report = kan_prune(m, caches, 0.0)
    assert [l.mask.tolist() for l in pruned.layers] == [l.mask.tolist() for l in m.layers]
    assert report.suggested_widths == m.widths


def test_dead_node_pruned(trained):
    m, _, data = trained
    m = m.copy()
    layer = m.layers[0]
    layer.coef[:, 1] = 0.0
    layer.base_w[:, 1] = 0.0
    _, caches = kan_forward(m, data.inputs)
    pruned, report = kan_prune(m, caches, 1e-12)
    assert not pruned.layers[0].mask[:, 1].any()
    assert not pruned.layers[1].mask[1, :].any()
    assert report.suggested_widths[1] <= 2


@settings(max_examples=15)
@given(st.floats(0.0, 2.0))
def test_prune_monotone_and_idempotent(trained, threshold):
    m, caches, _ = trained
    once, r1 = kan_prune(m, caches, threshold)
    twice, r2 = kan_prune(once, caches, threshold)
    assert all(a <= b for a, b in zip(r1.suggested_widths, m.widths))
    assert r1.suggested_widths == r2.suggested_widths
    assert [l.mask.tolist() for l in once.layers] == [l.mask.tolist() for l in twice.layers]
    assert all(np.all(s >= 0) for s in r1.scores)


def test_pruned_forward_equals_zeroed(trained):
    m, caches, data = trained
    # a threshold between the smallest and largest node scores removes something
    raw = edge_scores(m, caches)[0].max(axis=0)
    pruned, _ = kan_prune(m, caches, float(np.sort(raw)[0]) * 1.0001)
    assert pruned.enabled_edges() != m.enabled_edges()
    a, _ = kan_forward(pruned, data.inputs)
    b, _ = kan_forward(zero_disabled(pruned), data.inputs)
    assert np.array_equal(a, b)
    c, _ = kan_forward(shrink(pruned), data.inputs)
    assert np.allclose(a, c, rtol=0, atol=1e-12)
    assert shrink(pruned).widths[1] < m.widths[1]


def test_linearity_report():
    m = identity_model(0.0, 2.0)
    x = np.linspace(0, 2, 100)[:, None]
    _, caches = kan_forward(m, x)
    _, report = kan_prune(m, caches)
    assert report.linearity[0][0, 0] < 1e-9
    assert report.linear_edges() == [(0, 0, 0)]
    assert report.strippable_layers == [0]


def test_edge_dataset():
    m = identity_model(0.0, 5.0)
    x = np.random.default_rng(0).uniform(0, 5, 300)
    _, caches = kan_forward(m, x[:, None])
    ds = edge_dataset(m, caches, (0, 0, 0))
    assert ds.n == 300
    assert np.array_equal(ds.x, np.sort(x))
    assert np.all(np.diff(ds.x) > 0)


def test_edge_dataset_ties_averaged_and_disabled():
    m = identity_model(0.0, 5.0)
    m.layers[0].base_w[:] = 1.0
    x = np.array([1.0, 1.0, 2.0, 3.0])
    _, caches = kan_forward(m, x[:, None])
    ds = edge_dataset(m, caches, (0, 0, 0))
    assert ds.x.tolist() == [1.0, 2.0, 3.0]
    m.layers[0].mask[:] = False
    with pytest.raises(DisabledEdge):
        edge_dataset(m, caches, (0, 0, 0))


def test_checkpoint_round_trip(tmp_path, trained):
    m, _, data = trained
    pruned, _ = kan_prune(m, kan_forward(m, data.inputs)[1], 0.05)
    path = tmp_path / "kan.json"
    pruned.save(path)
    back = KanModel.load(path)
    assert back.widths == pruned.widths
    for a, b in zip(back.parameters(), pruned.parameters()):
        assert np.array_equal(a, b)
    assert np.array_equal(kan_forward(back, data.inputs)[0], kan_forward(pruned, data.inputs)[0])
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        KanModel.load(path)
