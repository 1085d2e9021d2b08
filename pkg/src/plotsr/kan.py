"""A small Kolmogorov-Arnold network in numpy.

Every edge carries phi(t) = w_b * silu(t) + w_s * sum_m c_m B_m(t) with a
uniform cubic B-spline basis over a fixed grid.  Outside the grid the spline
part continues linearly from the boundary value and slope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expr import DimensionMismatch
from .numfit import Dataset

ORDER = 3
CHECKPOINT_FORMAT = "plotsr-kan"
CHECKPOINT_VERSION = 1


class DisabledEdge(ValueError):
    pass


# ---------------------------------------------------------------------------
# Spline basis


def bspline_basis(t: np.ndarray, lo: np.ndarray, hi: np.ndarray, G: int):
    """Values and t-derivatives of the G+3 cubic bases, shape (N, n, G+3).

    ``t`` has shape (N, n) and is expected inside [lo, hi] per column.
    """
    h = (hi - lo) / G
    u_all = (t - lo) / h
    j = np.clip(np.floor(u_all), 0, G - 1).astype(int)
    u = u_all - j
    u2, u3 = u * u, u * u * u
    one = 1.0 - u
    vals = np.stack(
        [one**3 / 6.0, (3 * u3 - 6 * u2 + 4) / 6.0, (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0, u3 / 6.0],
        axis=-1,
    )
    ders = np.stack([-0.5 * one**2, (3 * u2 - 4 * u) / 2.0, (-3 * u2 + 2 * u + 1) / 2.0, 0.5 * u2], axis=-1)
    ders = ders / h[..., None] if np.ndim(h) else ders / h
    N, n = t.shape
    M = G + ORDER
    flat = (np.arange(N * n).reshape(N, n) * M + j)[..., None] + np.arange(4)
    B = np.zeros(N * n * M)
    dB = np.zeros(N * n * M)
    B[flat.ravel()] = vals.ravel()
    dB[flat.ravel()] = ders.ravel()
    return B.reshape(N, n, M), dB.reshape(N, n, M)


def greville(lo: float, hi: float, G: int) -> np.ndarray:
    """Coefficients that make the spline part reproduce phi(t) = t exactly."""
    h = (hi - lo) / G
    return lo + (np.arange(G + ORDER) - 1) * h


def _contract(B: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """sum_m B[n, i, m] * coef[i, o, m] -> (N, n_in, n_out), as a batched matmul."""
    return np.matmul(B.transpose(1, 0, 2), coef.transpose(0, 2, 1)).transpose(1, 0, 2)


def silu(t):
    return t / (1.0 + np.exp(-t))


def silu_grad(t):
    s = 1.0 / (1.0 + np.exp(-t))
    return s * (1.0 + t * (1.0 - s))


# ---------------------------------------------------------------------------
# Model


@dataclass
class KanLayer:
    coef: np.ndarray  # (n_in, n_out, G+3)
    base_w: np.ndarray  # (n_in, n_out)
    spline_w: np.ndarray  # (n_in, n_out)
    mask: np.ndarray  # (n_in, n_out) bool
    lo: np.ndarray  # (n_in,)
    hi: np.ndarray  # (n_in,)
    bias: np.ndarray | None = None  # (n_out,) added at each output node

    def __post_init__(self):
        if self.bias is None:
            self.bias = np.zeros(self.coef.shape[1])

    @property
    def n_in(self) -> int:
        return self.coef.shape[0]

    @property
    def n_out(self) -> int:
        return self.coef.shape[1]

    @property
    def grid_size(self) -> int:
        return self.coef.shape[2] - ORDER

    def copy(self) -> "KanLayer":
        return KanLayer(*(a.copy() for a in (self.coef, self.base_w, self.spline_w, self.mask, self.lo, self.hi, self.bias)))


@dataclass
class KanModel:
    widths: list[int]
    layers: list[KanLayer]

    @classmethod
    def create(cls, widths, grid_size: int = 5, seed: int = 0, ranges=None, noise: float = 0.1) -> "KanModel":
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need at least two layers of width >= 1")
        rng = np.random.default_rng(seed)
        layers = []
        for ell, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if ell == 0 and ranges is not None:
                lo = np.array([r[0] for r in ranges], float)
                hi = np.array([r[1] for r in ranges], float)
            else:
                lo, hi = -np.ones(n_in), np.ones(n_in)
            M = grid_size + ORDER
            coef = rng.normal(0.0, noise, size=(n_in, n_out, M)) * ((hi - lo) / 2.0)[:, None, None]
            base_w = rng.uniform(-1.0, 1.0, size=(n_in, n_out)) / np.sqrt(n_in)
            spline_w = np.ones((n_in, n_out))
            layers.append(KanLayer(coef, base_w, spline_w, np.ones((n_in, n_out), bool), lo, hi))
        return cls(widths, layers)

    def copy(self) -> "KanModel":
        return KanModel(list(self.widths), [layer.copy() for layer in self.layers])

    def edges(self):
        for ell, layer in enumerate(self.layers):
            for i in range(layer.n_in):
                for j in range(layer.n_out):
                    yield (ell, i, j)

    def enabled_edges(self):
        return [e for e in self.edges() if self.layers[e[0]].mask[e[1], e[2]]]

    def parameters(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in (layer.coef, layer.base_w, layer.spline_w, layer.bias)]

    # -- checkpoints -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "order": ORDER,
            "widths": list(self.widths),
            "layers": [
                {
                    "grid_size": layer.grid_size,
                    "lo": layer.lo.tolist(),
                    "hi": layer.hi.tolist(),
                    "coef": layer.coef.tolist(),
                    "base_w": layer.base_w.tolist(),
                    "spline_w": layer.spline_w.tolist(),
                    "mask": layer.mask.astype(int).tolist(),
                    "bias": layer.bias.tolist(),
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KanModel":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unrecognised KAN checkpoint")
        layers = [
            KanLayer(
                np.array(L["coef"], float),
                np.array(L["base_w"], float),
                np.array(L["spline_w"], float),
                np.array(L["mask"], bool),
                np.array(L["lo"], float),
                np.array(L["hi"], float),
                np.array(L["bias"], float),
            )
            for L in d["layers"]
        ]
        return cls(list(d["widths"]), layers)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "KanModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LayerCache:
    inputs: np.ndarray  # (N, n_in)
    outputs: np.ndarray  # (N, n_in, n_out) per-edge phi values
    clamped: np.ndarray | None = None
    B: np.ndarray | None = None
    dB: np.ndarray | None = None
    spline: np.ndarray | None = None


def _layer_forward(layer: KanLayer, t: np.ndarray, keep: bool) -> tuple[np.ndarray, LayerCache]:
    tc = np.clip(t, layer.lo, layer.hi)
    B, dB = bspline_basis(tc, layer.lo, layer.hi, layer.grid_size)
    # linear continuation outside the grid: basis weights B(tc) + (t - tc) B'(tc)
    Bx = B + (t - tc)[..., None] * dB
    spline = _contract(Bx, layer.coef)
    phi = layer.base_w * silu(t)[:, :, None] + layer.spline_w * spline
    out = np.sum(np.where(layer.mask, phi, 0.0), axis=1) + layer.bias
    cache = LayerCache(t, phi)
    if keep:
        cache.clamped, cache.B, cache.dB, cache.spline = tc, Bx, dB, spline
    return out, cache


def kan_forward(model: KanModel, inputs, keep: bool = False) -> tuple[np.ndarray, list[LayerCache]]:
    """Outputs (N, n_L) and per-layer caches of every edge's input/output samples."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != model.widths[0]:
        raise DimensionMismatch(f"expected inputs of shape (N, {model.widths[0]}), got {x.shape}")
    caches = []
    with np.errstate(over="ignore"):
        for layer in model.layers:
            x, cache = _layer_forward(layer, x, keep)
            caches.append(cache)
    return x, caches


def edge_scores(model: KanModel, caches: list[LayerCache]) -> list[np.ndarray]:
    """Mean |phi| per edge; disabled edges score 0."""
    return [np.where(layer.mask, np.mean(np.abs(c.outputs), axis=0), 0.0) for layer, c in zip(model.layers, caches)]


def loss_and_grads(model: KanModel, X: np.ndarray, y: np.ndarray, l1: float = 0.0):
    """MSE + l1 * sum of edge scores, with gradients for every parameter array."""
    out, caches = kan_forward(model, X, keep=True)
    N = X.shape[0]
    resid = out - y.reshape(N, -1)
    loss = float(np.mean(resid**2))
    if l1:
        loss += l1 * float(sum(s.sum() for s in edge_scores(model, caches)))
    g_out = 2.0 * resid / resid.size
    grads: list[np.ndarray] = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        g_bias = g_out.sum(axis=0)
        g_phi = np.where(layer.mask, g_out[:, None, :], 0.0)
        if l1:
            g_phi = g_phi + np.where(layer.mask, l1 * np.sign(cache.outputs) / N, 0.0)
        t = cache.inputs
        s = silu(t)
        g_base = np.einsum("nio,ni->io", g_phi, s)
        g_sw = np.sum(g_phi * cache.spline, axis=0)
        g_spline = g_phi * layer.spline_w
        g_coef = np.matmul(g_spline.transpose(1, 2, 0), cache.B.transpose(1, 0, 2))
        dspline = _contract(cache.dB, layer.coef)
        dphi_dt = layer.base_w * silu_grad(t)[:, :, None] + layer.spline_w * dspline
        g_out = np.sum(g_phi * dphi_dt, axis=2)
        grads.extend([g_bias, g_sw, g_base, g_coef])
    grads.reverse()
    return loss, grads


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class KanTrainConfig:
    steps: int = 2000
    lr: float = 1e-2
    l1: float = 1e-3
    grid_size: int = 5
    seed: int = 0
    split: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)


def split_indices(n: int, split: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, min(n - 1, int(round(split * n))))
    return np.sort(perm[:k]), np.sort(perm[k:])


def set_grids(model: KanModel, X: np.ndarray, ranges=None, pad: float = 0.0) -> None:
    """Fix every layer's grid range from the data flowing into it."""
    x = X
    for ell, layer in enumerate(model.layers):
        if ell == 0 and ranges is not None:
            lo = np.array([r[0] for r in ranges], float)
            hi = np.array([r[1] for r in ranges], float)
        else:
            lo, hi = x.min(axis=0), x.max(axis=0)
        span = hi - lo
        lo, hi = lo - pad * span, hi + pad * span
        flat = hi - lo < 1e-8
        lo = np.where(flat, lo - 0.5, lo)
        hi = np.where(flat, hi + 0.5, hi)
        # keep the coefficients' shape relative to the new grid
        scale = ((hi - lo) / (layer.hi - layer.lo))[:, None, None]
        layer.coef = layer.coef * scale
        layer.lo, layer.hi = lo.astype(float), hi.astype(float)
        x, _ = _layer_forward(layer, x, keep=False)


def kan_train(model: KanModel, data: Dataset, cfg: KanTrainConfig = KanTrainConfig()) -> tuple[KanModel, TrainHistory]:
    """Full-batch Adam on MSE + L1 edge sparsity; returns a trained copy."""
    if data.d != model.widths[0] or model.widths[-1] != 1:
        raise DimensionMismatch("dataset dimensions do not match the model")
    model = model.copy()
    X, y = data.inputs, data.targets
    tr, va = split_indices(data.n, cfg.split, cfg.seed)
    Xtr, ytr, Xva, yva = X[tr], y[tr], X[va], y[va]
    set_grids(model, Xtr, data.input_ranges)
    params = model.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    hist = TrainHistory()
    for step in range(1, cfg.steps + 1):
        loss, grads = loss_and_grads(model, Xtr, ytr, cfg.l1)
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= cfg.beta1
            mi += (1 - cfg.beta1) * g
            vi *= cfg.beta2
            vi += (1 - cfg.beta2) * g * g
            mhat = mi / (1 - cfg.beta1**step)
            vhat = vi / (1 - cfg.beta2**step)
            p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        hist.train_loss.append(loss)
        pred, _ = kan_forward(model, Xva)
        hist.val_mse.append(float(np.mean((pred[:, 0] - yva) ** 2)))
    return model, hist


# ---------------------------------------------------------------------------
# Pruning and inspection


@dataclass
class EdgeReport:
    scores: list[np.ndarray]
    linearity: list[np.ndarray]  # relative RMS residual of the best affine fit per edge
    suggested_widths: list[int]
    strippable_layers: list[int]
    linear_tol: float = 0.01

    def linear_edges(self) -> list[tuple[int, int, int]]:
        out = []
        for ell, res in enumerate(self.linearity):
            for i, j in zip(*np.nonzero(res < self.linear_tol)):
                out.append((ell, int(i), int(j)))
        return out


def affine_residual(t: np.ndarray, phi: np.ndarray) -> float:
    """RMS residual of the least-squares affine fit, relative to std(phi)."""
    A = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, phi, rcond=None)
    resid = phi - A @ coef
    spread = float(np.std(phi))
    if spread < 1e-14:
        return 0.0
    return float(np.sqrt(np.mean(resid**2)) / spread)


def kan_prune(model: KanModel, caches: list[LayerCache], threshold: float = 1e-2, linear_tol: float = 0.01):
    """Disable hidden nodes whose best incoming or outgoing edge scores below threshold.

    Node removal is iterated to a fixed point, so pruning again with the same
    cache and threshold changes nothing.
    """
    pruned = model.copy()
    raw = [np.mean(np.abs(c.outputs), axis=0) for c in caches]
    L = len(pruned.layers)
    while True:
        changed = False
        for ell in range(1, L):  # hidden layers sit between layer ell-1 and ell
            into, out_of = pruned.layers[ell - 1], pruned.layers[ell]
            s_in = np.where(into.mask, raw[ell - 1], 0.0)
            s_out = np.where(out_of.mask, raw[ell], 0.0)
            for node in range(into.n_out):
                alive = into.mask[:, node].any() or out_of.mask[node, :].any()
                if not alive:
                    continue
                if s_in[:, node].max(initial=0.0) < threshold or s_out[node, :].max(initial=0.0) < threshold:
                    into.mask[:, node] = False
                    out_of.mask[node, :] = False
                    changed = True
        if not changed:
            break
    scores = edge_scores(pruned, caches)
    linearity = []
    for layer, c in zip(pruned.layers, caches):
        res = np.full((layer.n_in, layer.n_out), np.inf)
        for i in range(layer.n_in):
            for j in range(layer.n_out):
                if layer.mask[i, j]:
                    res[i, j] = affine_residual(c.inputs[:, i], c.outputs[:, i, j])
        linearity.append(res)
    widths = [pruned.widths[0]]
    for ell in range(1, L):
        alive = pruned.layers[ell - 1].mask.any(axis=0) | pruned.layers[ell].mask.any(axis=1)
        widths.append(max(1, int(alive.sum())))
    widths.append(pruned.widths[-1])
    strippable = [
        ell
        for ell, (layer, res) in enumerate(zip(pruned.layers, linearity))
        if layer.mask.any() and np.all(res[layer.mask] < linear_tol)
    ]
    return pruned, EdgeReport(scores, linearity, widths, strippable, linear_tol)


def shrink(model: KanModel) -> KanModel:
    """Physically drop disabled hidden nodes, keeping the surviving edges' parameters."""
    keep = [np.arange(model.widths[0])]
    for ell in range(1, len(model.layers)):
        alive = model.layers[ell - 1].mask.any(axis=0) | model.layers[ell].mask.any(axis=1)
        idx = np.nonzero(alive)[0]
        keep.append(idx if idx.size else np.array([0]))
    keep.append(np.arange(model.widths[-1]))
    layers = []
    for ell, layer in enumerate(model.layers):
        rows, cols = keep[ell], keep[ell + 1]
        sub = np.ix_(rows, cols)
        layers.append(
            KanLayer(
                layer.coef[rows][:, cols].copy(),
                layer.base_w[sub].copy(),
                layer.spline_w[sub].copy(),
                layer.mask[sub].copy(),
                layer.lo[rows].copy(),
                layer.hi[rows].copy(),
                layer.bias[cols].copy(),
            )
        )
    return KanModel([len(k) for k in keep], layers)


def zero_disabled(model: KanModel) -> KanModel:
    """Same architecture with every disabled edge re-enabled but zeroed."""
    out = model.copy()
    for layer in out.layers:
        off = ~layer.mask
        layer.coef[off] = 0.0
        layer.base_w[off] = 0.0
        layer.spline_w[off] = 0.0
        layer.mask[:] = True
    return out


def edge_dataset(model: KanModel, caches: list[LayerCache], edge: tuple[int, int, int]) -> Dataset:
    """The edge's (input, phi(input)) samples, ascending in input; ties averaged."""
    ell, i, j = edge
    if not model.layers[ell].mask[i, j]:
        raise DisabledEdge(f"edge {edge} is disabled")
    t = caches[ell].inputs[:, i]
    phi = caches[ell].outputs[:, i, j]
    uniq, inv = np.unique(t, return_inverse=True)
    if uniq.size < t.size:
        sums = np.bincount(inv, weights=phi)
        counts = np.bincount(inv)
        phi = sums / counts
        t = uniq
    else:
        order = np.argsort(t, kind="stable")
        t, phi = t[order], phi[order]
    return Dataset(t, phi)
