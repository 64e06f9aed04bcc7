"""A small layer-graph engine in numpy.

Models are ordered lists of :class:`LayerSpec` plus explicit residual edges.
The forward pass can record the per-component input contributions of the
linear layers (Dense, Conv2D and the down projection inside FFNBlock); these
are the raw material for component similarity matrices.

Weight conventions follow an (out, in) layout everywhere:

* ``Dense.weight``     : ``(out_features, in_features)``; inputs are flattened
* ``Conv2D.weight``    : ``(c_out, c_in, k, k)``; stride 1, same padding, odd k
* ``FFNBlock.w_up``    : ``(d_ff, d)`` and ``FFNBlock.w_down``: ``(d, d_ff)``

Normalization layers use the unit-norm form ``gamma * z / ||z|| + beta`` with
``z = M x`` (``M`` the centering projection for LayerNorm, identity for
RMSNorm), applied over the last axis.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import Divergence, FormatError, NonFiniteActivation, ShapeMismatch

FORMAT_VERSION = 1

KINDS = (
    "Dense",
    "Conv2D",
    "BatchNorm2D",
    "LayerNorm",
    "RMSNorm",
    "ReLU",
    "GELU",
    "AvgPool2D",
    "ResidualAdd",
    "FFNBlock",
)
TAPPABLE = ("Dense", "Conv2D", "FFNBlock")
NORM_KINDS = ("LayerNorm", "RMSNorm")

# parameters updated by the optimizer; everything else in ``params`` is a buffer
LEARNABLE = {
    "Dense": ("weight", "bias"),
    "Conv2D": ("weight", "bias"),
    "BatchNorm2D": ("gamma", "beta"),
    "LayerNorm": ("gamma", "beta"),
    "RMSNorm": ("gamma", "beta"),
    "FFNBlock": ("norm_gamma", "norm_beta", "w_up", "b_up", "w_down", "b_down"),
}

BN_EPS = 1e-5


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeMismatch(f"unknown layer kind {self.kind!r}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}


@dataclass
class ModelGraph:
    layers: list
    class_count: int
    input_shape: tuple
    residual_edges: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.residual_edges = [(int(s), int(t)) for s, t in self.residual_edges]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def __len__(self):
        return len(self.layers)

    def residual_source(self, target: int) -> int:
        srcs = [s for s, t in self.residual_edges if t == target]
        if len(srcs) != 1:
            raise ShapeMismatch(f"ResidualAdd at {target} needs exactly one residual edge, has {len(srcs)}")
        return srcs[0]


@dataclass
class Contributions:
    """Input contributions of one tapped layer for a batch.

    ``values[n, c, i, :]`` is the contribution of input component ``i`` to
    output channel ``c`` for sample ``n``, flattened over the spatial or
    sequence positions. Summing over ``i`` and adding ``bias[c]`` recovers the
    layer's linear output.
    """

    layer: int
    values: np.ndarray
    bias: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:3]

    def tap(self, c: int, i: int) -> np.ndarray:
        return self.values[:, c, i, :]

    def output(self) -> np.ndarray:
        """Linear layer output per channel, ``(N, c_out, positions)``."""
        return self.values.sum(axis=2) + self.bias[None, :, None]


# ---------------------------------------------------------------- primitives


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def _conv_windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)


def _norm_forward(x, gamma, beta, centered, eps):
    z = x - x.mean(axis=-1, keepdims=True) if centered else x
    n = np.sqrt(np.sum(z * z, axis=-1, keepdims=True) + eps)
    if np.any(n == 0):
        raise NonFiniteActivation("normalization input has zero norm")
    u = z / n
    return gamma * u + beta, (z, n, u)


def _norm_backward(dy, gamma, cache, centered):
    z, n, u = cache
    du = dy * gamma
    dz = du / n - z * np.sum(z * du, axis=-1, keepdims=True) / n**3
    dx = dz - dz.mean(axis=-1, keepdims=True) if centered else dz
    red = tuple(range(dy.ndim - 1))
    return dx, np.sum(dy * u, axis=red), np.sum(dy, axis=red)


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, ndim):
    return v[None, :] if ndim == 2 else v[None, :, None, None]


# ----------------------------------------------------------- layer forwards


def _fwd_dense(layer, x, ctx):
    xf = x.reshape(x.shape[0], -1)
    W, b = layer.params["weight"], layer.params["bias"]
    if xf.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"Dense expects {W.shape[1]} features, got {xf.shape[1]}")
    return xf @ W.T + b, (x.shape, xf)


def _bwd_dense(layer, dy, cache):
    shape, xf = cache
    W = layer.params["weight"]
    return (dy @ W).reshape(shape), {"weight": dy.T @ xf, "bias": dy.sum(0)}


def _fwd_conv(layer, x, ctx):
    W, b = layer.params["weight"], layer.params["bias"]
    if x.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"Conv2D expects (N, {W.shape[1]}, H, W), got {x.shape}")
    win = _conv_windows(x, W.shape[2])
    y = np.einsum("nchwij,ocij->nohw", win, W, optimize=True) + b[None, :, None, None]
    return y, (x.shape, win)


def _bwd_conv(layer, dy, cache):
    shape, win = cache
    W = layer.params["weight"]
    k = W.shape[2]
    p = k // 2
    N, C, H, Wd = shape
    dW = np.einsum("nohw,nchwij->ocij", dy, win, optimize=True)
    dxp = np.zeros((N, C, H + 2 * p, Wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + H, j : j + Wd] += np.einsum("nohw,oc->nchw", dy, W[:, :, i, j], optimize=True)
    return dxp[:, :, p : p + H, p : p + Wd], {"weight": dW, "bias": dy.sum((0, 2, 3))}


def _fwd_bn(layer, x, ctx):
    P = layer.params
    eps = layer.attrs.get("eps", BN_EPS)
    axes = _bn_axes(x)
    if ctx["training"]:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if ctx.get("update_stats", True):
            m = layer.attrs.get("momentum", 0.1)
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            P["running_mean"] = (1 - m) * P["running_mean"] + m * mean
            P["running_var"] = (1 - m) * P["running_var"] + m * unbiased
    else:
        mean, var = P["running_mean"], P["running_var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv, x.ndim)
    y = _bn_view(P["gamma"], x.ndim) * xhat + _bn_view(P["beta"], x.ndim)
    return y, (xhat, inv, ctx["training"])


def _bwd_bn(layer, dy, cache):
    xhat, inv, training = cache
    axes = _bn_axes(dy)
    g = _bn_view(layer.params["gamma"], dy.ndim)
    grads = {"gamma": np.sum(dy * xhat, axis=axes), "beta": np.sum(dy, axis=axes)}
    dxhat = dy * g
    if not training:
        return dxhat * _bn_view(inv, dy.ndim), grads
    m = dy.size // dy.shape[1]
    s1 = _bn_view(np.sum(dxhat, axis=axes), dy.ndim)
    s2 = _bn_view(np.sum(dxhat * xhat, axis=axes), dy.ndim)
    dx = _bn_view(inv, dy.ndim) / m * (m * dxhat - s1 - xhat * s2)
    return dx, grads


def _fwd_norm(layer, x, ctx):
    P = layer.params
    y, cache = _norm_forward(x, P["gamma"], P["beta"], layer.kind == "LayerNorm", layer.attrs.get("eps", 0.0))
    return y, cache


def _bwd_norm(layer, dy, cache):
    dx, dg, db = _norm_backward(dy, layer.params["gamma"], cache, layer.kind == "LayerNorm")
    return dx, {"gamma": dg, "beta": db}


def _fwd_relu(layer, x, ctx):
    return np.maximum(x, 0.0), x > 0


def _bwd_relu(layer, dy, cache):
    return dy * cache, {}


def _fwd_gelu(layer, x, ctx):
    return gelu(x), x


def _bwd_gelu(layer, dy, cache):
    return dy * gelu_grad(cache), {}


def _pool_size(layer, shape):
    size = layer.attrs.get("size")
    H, W = shape[2], shape[3]
    ph, pw = (H, W) if size is None else (int(size), int(size))
    if H % ph or W % pw:
        raise ShapeMismatch(f"AvgPool2D size {size} does not tile {H}x{W}")
    return ph, pw


def _fwd_pool(layer, x, ctx):
    if x.ndim != 4:
        raise ShapeMismatch(f"AvgPool2D expects NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    ph, pw = _pool_size(layer, x.shape)
    y = x.reshape(N, C, H // ph, ph, W // pw, pw).mean(axis=(3, 5))
    return y, (ph, pw)


def _bwd_pool(layer, dy, cache):
    ph, pw = cache
    dx = np.repeat(np.repeat(dy, ph, axis=2), pw, axis=3) / (ph * pw)
    return dx, {}


def _fwd_residual(layer, x, ctx):
    other = ctx["residual"]
    if other.shape != x.shape:
        raise ShapeMismatch(f"residual shapes differ: {x.shape} vs {other.shape}")
    return x + other, None


def _bwd_residual(layer, dy, cache):
    return dy, {}


def _fwd_ffn(layer, x, ctx):
    P = layer.params
    if x.ndim != 3 or x.shape[-1] != P["w_up"].shape[1]:
        raise ShapeMismatch(f"FFNBlock expects (N, T, {P['w_up'].shape[1]}), got {x.shape}")
    centered = layer.attrs.get("norm", "LayerNorm") == "LayerNorm"
    nx, ncache = _norm_forward(x, P["norm_gamma"], P["norm_beta"], centered, layer.attrs.get("eps", 0.0))
    h = nx @ P["w_up"].T + P["b_up"]
    g = gelu(h)
    y = g @ P["w_down"].T + P["b_down"]
    return x + y, (ncache, nx, h, g, centered)


def _bwd_ffn(layer, dy, cache):
    P = layer.params
    ncache, nx, h, g, centered = cache
    grads = {
        "w_down": np.einsum("ntc,nti->ci", dy, g),
        "b_down": dy.sum((0, 1)),
    }
    dh = (dy @ P["w_down"]) * gelu_grad(h)
    grads["w_up"] = np.einsum("ntf,ntd->fd", dh, nx)
    grads["b_up"] = dh.sum((0, 1))
    dnx = dh @ P["w_up"]
    dx, grads["norm_gamma"], grads["norm_beta"] = _norm_backward(dnx, P["norm_gamma"], ncache, centered)
    return dy + dx, grads


_FORWARD = {
    "Dense": (_fwd_dense, _bwd_dense),
    "Conv2D": (_fwd_conv, _bwd_conv),
    "BatchNorm2D": (_fwd_bn, _bwd_bn),
    "LayerNorm": (_fwd_norm, _bwd_norm),
    "RMSNorm": (_fwd_norm, _bwd_norm),
    "ReLU": (_fwd_relu, _bwd_relu),
    "GELU": (_fwd_gelu, _bwd_gelu),
    "AvgPool2D": (_fwd_pool, _bwd_pool),
    "ResidualAdd": (_fwd_residual, _bwd_residual),
    "FFNBlock": (_fwd_ffn, _bwd_ffn),
}


# ------------------------------------------------------------------- taps


def component_weight_name(layer: LayerSpec) -> str:
    if layer.kind == "FFNBlock":
        return "w_down"
    if layer.kind in ("Dense", "Conv2D"):
        return "weight"
    raise ShapeMismatch(f"{layer.kind} layers have no input contributions")


def component_shape(layer: LayerSpec) -> tuple:
    """``(c_out, c_in)`` of the component grid of a tappable layer."""
    W = layer.params[component_weight_name(layer)]
    return W.shape[0], W.shape[1]


def _contributions(layer, x, index):
    """Input contributions of ``layer`` for input ``x``."""
    P = layer.params
    if layer.kind == "Dense":
        xf = x.reshape(x.shape[0], -1)
        vals = xf[:, None, :] * P["weight"][None, :, :]
        return Contributions(index, vals[..., None], P["bias"])
    if layer.kind == "Conv2D":
        win = _conv_windows(x, P["weight"].shape[2])
        vals = np.einsum("nchwij,ocij->nochw", win, P["weight"], optimize=True)
        N, O, C, H, W = vals.shape
        return Contributions(index, vals.reshape(N, O, C, H * W), P["bias"])
    if layer.kind == "FFNBlock":
        centered = layer.attrs.get("norm", "LayerNorm") == "LayerNorm"
        nx, _ = _norm_forward(x, P["norm_gamma"], P["norm_beta"], centered, layer.attrs.get("eps", 0.0))
        g = gelu(nx @ P["w_up"].T + P["b_up"])
        vals = np.einsum("nti,ci->ncit", g, P["w_down"], optimize=True)
        return Contributions(index, vals, P["b_down"])
    raise ShapeMismatch(f"layer {index} ({layer.kind}) cannot be tapped")


# ---------------------------------------------------------------- forward


def _run(model, x, training=False, update_stats=True, taps=(), keep_cache=False, stop_after=None):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    acts = {-1: x}
    caches = {}
    tapped = {}
    ctx = {"training": training, "update_stats": update_stats}
    h = x
    for idx, layer in enumerate(model.layers):
        if idx in taps:
            tapped[idx] = _contributions(layer, h, idx)
        if layer.kind == "ResidualAdd":
            ctx["residual"] = acts[model.residual_source(idx)]
        fwd = _FORWARD[layer.kind][0]
        h, cache = fwd(layer, h, ctx)
        if not np.all(np.isfinite(h)):
            raise NonFiniteActivation(f"non-finite output at layer {idx} ({layer.kind})")
        acts[idx] = h
        if keep_cache:
            caches[idx] = cache
        if stop_after is not None and idx >= stop_after:
            break
    return h, acts, caches, tapped


def forward(model: ModelGraph, x, taps=None, training: bool = False):
    """Evaluate ``model`` on a batch.

    Returns ``(logits, taps)`` where ``taps`` maps each requested layer index
    to its :class:`Contributions`. Pure for inference: two calls on the same
    batch give identical outputs.
    """
    taps = set(taps or ())
    for t in taps:
        if not 0 <= t < len(model.layers) or model.layers[t].kind not in TAPPABLE:
            raise ShapeMismatch(f"layer {t} is not tappable")
    out, _, _, tapped = _run(model, x, training=training, update_stats=False, taps=taps)
    return out, tapped


def activations(model: ModelGraph, x) -> dict:
    """All intermediate outputs in inference mode, keyed by layer index (-1 is the input)."""
    return _run(model, x)[1]


def layer_inputs(model: ModelGraph, x, index: int) -> np.ndarray:
    """Input of layer ``index`` in inference mode."""
    if index == 0:
        return np.asarray(x, dtype=np.float64)
    return _run(model, x, stop_after=index - 1)[1][index - 1]


def predict(model: ModelGraph, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    outs = [forward(model, x[s : s + batch_size])[0] for s in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, model.class_count))


def contributions(model: ModelGraph, x, index: int, batch_size: int = 64):
    """Yield :class:`Contributions` of layer ``index`` over ``x`` in batches."""
    x = np.asarray(x, dtype=np.float64)
    for s in range(0, len(x), batch_size):
        yield forward(model, x[s : s + batch_size], taps={index})[1][index]


def infer_shapes(model: ModelGraph) -> list:
    """Per-sample output shape of every layer, validating the chain."""
    probe = np.random.default_rng(0).standard_normal((2,) + model.input_shape)
    acts = _run(model, probe)[1]
    return [acts[i].shape[1:] for i in range(len(model.layers))]


def validate(model: ModelGraph) -> None:
    for s, t in model.residual_edges:
        if not (-1 <= s < t < len(model.layers)) or model.layers[t].kind != "ResidualAdd":
            raise ShapeMismatch(f"invalid residual edge ({s}, {t})")
    for idx, layer in enumerate(model.layers):
        if layer.kind == "ResidualAdd":
            model.residual_source(idx)
        if layer.kind == "BatchNorm2D" and np.any(layer.params["running_var"] <= 0):
            raise ShapeMismatch(f"layer {idx}: BatchNorm running variance must be positive")
    infer_shapes(model)


# --------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum in [0, 1) and weight_decay >= 0 required")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def cross_entropy(logits, y):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def backward(model: ModelGraph, x, dout, training: bool = True, update_stats: bool = False):
    """Gradients of ``sum(dout * forward(x))`` with respect to every learnable parameter.

    Returns a list with one dict per layer.
    """
    _, acts, caches, _ = _run(model, x, training=training, update_stats=update_stats, keep_cache=True)
    return _backprop(model, acts, caches, dout)[0]


def _backprop(model, acts, caches, dout):
    pending = {len(model.layers) - 1: dout}
    grads = [dict() for _ in model.layers]
    for idx in range(len(model.layers) - 1, -1, -1):
        dy = pending.pop(idx, None)
        if dy is None:
            continue
        layer = model.layers[idx]
        dx, g = _FORWARD[layer.kind][1](layer, dy, caches[idx])
        grads[idx] = g
        if layer.kind == "ResidualAdd":
            src = model.residual_source(idx)
            pending[src] = pending.get(src, 0) + dy
        pending[idx - 1] = pending.get(idx - 1, 0) + dx
    return grads, pending.get(-1)


def input_gradient(model: ModelGraph, x, dout, training: bool = False):
    _, acts, caches, _ = _run(model, x, training=training, update_stats=False, keep_cache=True)
    return _backprop(model, acts, caches, dout)[1]


def train(model: ModelGraph, data, config: TrainConfig, history: list | None = None) -> ModelGraph:
    """Cross-entropy training with momentum SGD and weight decay.

    ``data`` needs ``x`` and integer labels ``y``. Returns a trained copy;
    ``history`` (if given) receives the mean loss of every epoch.
    """
    if len(data.y) == 0:
        raise ValueError("empty dataset")
    if data.class_count != model.class_count:
        raise ShapeMismatch(f"dataset has {data.class_count} classes, model head {model.class_count}")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    x = np.asarray(data.x, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.int64)
    velocity = [{k: np.zeros_like(layer.params[k]) for k in LEARNABLE.get(layer.kind, ())} for layer in model.layers]
    n = len(y)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = max(config.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            if config.schedule == "cosine":
                lr = 0.5 * config.lr * (1 + math.cos(math.pi * step / total))
            else:
                lr = config.lr
            out, acts, caches, _ = _run(model, x[idx], training=True, keep_cache=True)
            loss, dout = cross_entropy(out, y[idx])
            if not math.isfinite(loss):
                raise Divergence(f"loss became {loss} at epoch {epoch}")
            grads = _backprop(model, acts, caches, dout)[0]
            for layer, g, v in zip(model.layers, grads, velocity):
                for k in v:
                    gk = g[k] + config.weight_decay * layer.params[k]
                    v[k] = config.momentum * v[k] + gk
                    layer.params[k] = layer.params[k] - lr * v[k]
            losses.append(loss * len(idx))
            step += 1
        if history is not None:
            history.append(sum(losses) / n)
    return model


def accuracy(model: ModelGraph, data) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    y = np.asarray(data.y)
    if len(y) == 0:
        return 0.0
    pred = np.argmax(predict(model, data.x), axis=1)
    return float(np.mean(pred == y))


def per_class_accuracy(model: ModelGraph, data) -> dict:
    y = np.asarray(data.y)
    pred = np.argmax(predict(model, data.x), axis=1)
    return {int(c): float(np.mean(pred[y == c] == c)) for c in np.unique(y)}


# --------------------------------------------------------------- builders


def dense(n_in, n_out, rng, gain=2.0):
    W = rng.standard_normal((n_out, n_in)) * math.sqrt(gain / n_in)
    return LayerSpec("Dense", {"weight": W, "bias": np.zeros(n_out)}, {"in_features": n_in, "out_features": n_out})


def conv2d(c_in, c_out, k, rng):
    W = rng.standard_normal((c_out, c_in, k, k)) * math.sqrt(2.0 / (c_in * k * k))
    return LayerSpec("Conv2D", {"weight": W, "bias": np.zeros(c_out)}, {"kernel": k})


def batchnorm(c):
    return LayerSpec(
        "BatchNorm2D",
        {"gamma": np.ones(c), "beta": np.zeros(c), "running_mean": np.zeros(c), "running_var": np.ones(c)},
        {"eps": BN_EPS, "momentum": 0.1},
    )


def norm_layer(kind, d, gamma=1.0, eps=0.0):
    return LayerSpec(kind, {"gamma": np.full(d, float(gamma)), "beta": np.zeros(d)}, {"eps": eps})


def ffn_block(d, d_ff, rng, norm="LayerNorm", gamma=None):
    g = math.sqrt(d) if gamma is None else gamma
    return LayerSpec(
        "FFNBlock",
        {
            "norm_gamma": np.full(d, float(g)),
            "norm_beta": np.zeros(d),
            "w_up": rng.standard_normal((d_ff, d)) * math.sqrt(2.0 / d),
            "b_up": np.zeros(d_ff),
            "w_down": rng.standard_normal((d, d_ff)) * math.sqrt(1.0 / d_ff),
            "b_down": np.zeros(d),
        },
        {"norm": norm, "eps": 0.0},
    )


def mlp(input_dim, hidden, class_count, seed=0, batchnorm_layers=False) -> ModelGraph:
    """Dense/ReLU stack with an optional BatchNorm after every hidden Dense."""
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for h in hidden:
        layers.append(dense(d, h, rng))
        if batchnorm_layers:
            layers.append(batchnorm(h))
        layers.append(LayerSpec("ReLU"))
        d = h
    layers.append(dense(d, class_count, rng, gain=1.0))
    return ModelGraph(layers, class_count, (input_dim,))


def cnn(input_shape, channels, class_count, seed=0, kernel=3, pool=None) -> ModelGraph:
    """Conv-BN-ReLU blocks followed by average pooling and a Dense head."""
    rng = np.random.default_rng(seed)
    c, H, W = input_shape
    layers = []
    for ch in channels:
        layers += [conv2d(c, ch, kernel, rng), batchnorm(ch), LayerSpec("ReLU")]
        c = ch
    layers.append(LayerSpec("AvgPool2D", attrs={"size": pool}))
    ph = H if pool is None else pool
    pw = W if pool is None else pool
    layers.append(dense(c * (H // ph) * (W // pw), class_count, rng, gain=1.0))
    return ModelGraph(layers, class_count, tuple(input_shape))


def ffn_classifier(seq_len, d, d_ff, class_count, blocks=2, seed=0, norm="LayerNorm") -> ModelGraph:
    """Pre-norm FFN blocks on ``(T, d)`` token matrices, a final norm and a Dense head."""
    rng = np.random.default_rng(seed)
    layers = [ffn_block(d, d_ff, rng, norm=norm) for _ in range(blocks)]
    layers.append(norm_layer(norm, d, gamma=math.sqrt(d)))
    layers.append(dense(seq_len * d, class_count, rng, gain=1.0))
    return ModelGraph(layers, class_count, (seq_len, d))


# --------------------------------------------------------------------- I/O


def model_to_dict(model: ModelGraph) -> dict:
    layers = []
    for layer in model.layers:
        arrays = {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in layer.params.items()
        }
        layers.append({"kind": layer.kind, "attrs": dict(layer.attrs), "arrays": arrays})
    return {
        "version": FORMAT_VERSION,
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "residual_edges": [list(e) for e in model.residual_edges],
        "layers": layers,
    }


def model_from_dict(doc: dict) -> ModelGraph:
    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise FormatError(f"{where}: missing field {key!r}")
        return obj[key]

    if need(doc, "version", "model") != FORMAT_VERSION:
        raise FormatError(f"model.version: unsupported version {doc['version']!r}")
    layers = []
    for li, ld in enumerate(need(doc, "layers", "model")):
        where = f"layers[{li}]"
        kind = need(ld, "kind", where)
        if kind not in KINDS:
            raise FormatError(f"{where}.kind: unknown layer kind {kind!r}")
        params = {}
        for name, spec in need(ld, "arrays", where).items():
            shape = need(spec, "shape", f"{where}.arrays.{name}")
            data = need(spec, "data", f"{where}.arrays.{name}")
            expected = int(np.prod(shape)) if shape else 1
            if len(data) != expected:
                raise FormatError(
                    f"{where}.arrays.{name}: declared shape {shape} needs {expected} values, found {len(data)}"
                )
            try:
                params[name] = np.asarray(data, dtype=np.float64).reshape(shape)
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{where}.arrays.{name}: {exc}") from None
        layers.append(LayerSpec(kind, params, dict(ld.get("attrs", {}))))
    model = ModelGraph(
        layers,
        int(need(doc, "class_count", "model")),
        tuple(need(doc, "input_shape", "model")),
        [tuple(e) for e in doc.get("residual_edges", [])],
    )
    try:
        validate(model)
    except (ShapeMismatch, KeyError) as exc:
        raise FormatError(f"model: inconsistent topology: {exc}") from None
    return model


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> ModelGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(doc)


def scale_components(model: ModelGraph, index: int, factors) -> ModelGraph:
    """Copy of ``model`` with ``W[c, i] *= factors[c, i]`` at a tappable layer.

    Covers masking (0/1 factors), compensation (delta) and negation (-1).
    """
    out = model.copy()
    layer = out.layers[index]
    name = component_weight_name(layer)
    W = layer.params[name]
    f = np.asarray(factors, dtype=np.float64)
    if f.shape != W.shape[:2]:
        raise ShapeMismatch(f"factors shape {f.shape} != component grid {W.shape[:2]}")
    layer.params[name] = W * f.reshape(f.shape + (1,) * (W.ndim - 2))
    return out


def tappable_layers(model: ModelGraph) -> list:
    return [i for i, layer in enumerate(model.layers) if layer.kind in TAPPABLE]


def parameter_count(model: ModelGraph) -> int:
    return int(sum(layer.params[k].size for layer in model.layers for k in LEARNABLE.get(layer.kind, ())))
