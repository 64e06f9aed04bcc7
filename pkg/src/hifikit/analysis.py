"""Lipschitz constants, local-to-global error checks and validation studies."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import fidelity as fid
from . import model as mdl
from .data import LabeledDataset, SyntheticSource, degrade, sample
from .errors import MissingRadius, ShapeMismatch, ZeroRadius
from .modify import PrunePlan, modhifi_prune
from .numerics import spearman_rank, spectral_norm
from .selection import topk_indices

# sup of d/dx [x * Phi(x)] is 1.12890... at x = sqrt(2)
GELU_LIPSCHITZ = 1.13
RELU_LIPSCHITZ = 1.0
MIN_RADIUS = 1e-12

HIFI = "hifi"
NON_HIFI = "nonhifi"
RANDOM = "random"
INPUT = "input"
ENTRY = "entry"


@dataclass
class RadiusStats:
    min: float
    median: float
    max: float


@dataclass
class BoundCheckResult:
    layer: int
    mask_kept: int
    mask_total: int
    global_error: float
    local_error: float
    ratio: float
    worst_case_c2: float
    satisfied: bool


# ------------------------------------------------------------- constants


def conv_operator(weight, in_shape) -> np.ndarray:
    """Explicit matrix of a stride-1, same-padded convolution on ``in_shape``."""
    C, H, W = in_shape
    layer = mdl.LayerSpec("Conv2D", {"weight": weight, "bias": np.zeros(weight.shape[0])})
    basis = np.eye(C * H * W).reshape(C * H * W, C, H, W)
    out, _ = mdl._fwd_conv(layer, basis, {})
    return out.reshape(C * H * W, -1).T


def _norm_constant(gamma, r):
    if r is None:
        raise MissingRadius("normalization layers need a pre-norm radius r")
    if r <= 0:
        raise ZeroRadius(f"radius must be positive, got {r}")
    return float(np.max(np.abs(gamma))) / r


def layer_lipschitz(layer: mdl.LayerSpec, r: float | None = None, in_shape=None) -> float:
    """Upper bound on the Lipschitz constant of one layer.

    ``r`` is the pre-norm radius (LayerNorm, RMSNorm, FFNBlock); ``in_shape``
    is the per-sample input shape, needed by Conv2D and AvgPool2D.
    """
    P = layer.params
    kind = layer.kind
    if kind == "Dense":
        return spectral_norm(P["weight"], iters=5000, tol=1e-13)
    if kind == "Conv2D":
        if in_shape is None:
            raise ShapeMismatch("Conv2D Lipschitz constant needs the input shape")
        return spectral_norm(conv_operator(P["weight"], in_shape), iters=5000, tol=1e-13)
    if kind == "BatchNorm2D":
        sd = np.sqrt(P["running_var"] + layer.attrs.get("eps", mdl.BN_EPS))
        return float(np.max(np.abs(P["gamma"]) / sd))
    if kind in mdl.NORM_KINDS:
        return _norm_constant(P["gamma"], r)
    if kind == "ReLU":
        return RELU_LIPSCHITZ
    if kind == "GELU":
        return GELU_LIPSCHITZ
    if kind == "AvgPool2D":
        if in_shape is None:
            raise ShapeMismatch("AvgPool2D Lipschitz constant needs the input shape")
        ph, pw = mdl._pool_size(layer, (1,) + tuple(in_shape))
        return 1.0 / math.sqrt(ph * pw)
    if kind == "ResidualAdd":
        return 1.0
    if kind == "FFNBlock":
        branch = (
            _norm_constant(P["norm_gamma"], r)
            * spectral_norm(P["w_up"], iters=5000, tol=1e-13)
            * GELU_LIPSCHITZ
            * spectral_norm(P["w_down"], iters=5000, tol=1e-13)
        )
        return 1.0 + branch
    raise ShapeMismatch(f"no Lipschitz rule for {kind}")


def norm_layers(model: mdl.ModelGraph) -> list:
    return [i for i, l in enumerate(model.layers) if l.kind in mdl.NORM_KINDS or l.kind == "FFNBlock"]


def layer_constants(model: mdl.ModelGraph, radii=None, start: int = 0) -> list:
    """Lipschitz bound of every layer from ``start`` on (None before ``start``)."""
    radii = radii or {}
    shapes = mdl.infer_shapes(model)
    out = []
    for j, layer in enumerate(model.layers):
        if j < start:
            out.append(None)
            continue
        in_shape = model.input_shape if j == 0 else shapes[j - 1]
        r = radii.get(j)
        if isinstance(r, RadiusStats):
            r = r.min
        out.append(layer_lipschitz(layer, r, in_shape))
    return out


def worst_case_Cl(model: mdl.ModelGraph, l: int, radii=None) -> float:
    """Lipschitz bound of the map from layer ``l``'s linear output to the logits.

    For a plain chain this is the product of the constants of the layers after
    ``l``. A residual edge adds the bound of its source path (zero when the
    source precedes ``l``, since that path is unaffected).
    """
    if not 0 <= l < len(model.layers):
        raise ValueError(f"layer {l} out of range")
    consts = layer_constants(model, radii, start=l + 1)
    lip = {l: 1.0}
    for j in range(l + 1, len(model.layers)):
        if model.layers[j].kind == "ResidualAdd":
            src = model.residual_source(j)
            lip[j] = lip[j - 1] + (lip[src] if src >= l else 0.0)
        else:
            lip[j] = consts[j] * lip[j - 1]
    return lip[len(model.layers) - 1]


def _prenorm_vectors(model, x, index):
    h = mdl.layer_inputs(model, x, index)
    layer = model.layers[index]
    centered = layer.kind == "LayerNorm" or (layer.kind == "FFNBlock" and layer.attrs.get("norm", "LayerNorm") == "LayerNorm")
    z = h - h.mean(axis=-1, keepdims=True) if centered else h
    return np.linalg.norm(z, axis=-1).ravel()


def min_prenorm_radius(model: mdl.ModelGraph, data) -> dict:
    """Distribution of ``||M phi||`` at every normalization layer (min/median/max over samples and tokens)."""
    x = data.x if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no samples")
    out = {}
    for j in norm_layers(model):
        norms = _prenorm_vectors(model, x, j)
        if norms.min() < MIN_RADIUS:
            raise ZeroRadius(f"layer {j}: pre-norm input with norm {norms.min():.3e}")
        out[j] = RadiusStats(float(norms.min()), float(np.median(norms)), float(norms.max()))
    return out


def lipschitz_report(model: mdl.ModelGraph, data=None) -> dict:
    radii = min_prenorm_radius(model, data) if data is not None and norm_layers(model) else {}
    consts = layer_constants(model, radii)
    tapped = mdl.tappable_layers(model)
    return {
        "layers": [
            {"layer": j, "kind": l.kind, "lipschitz": consts[j]} for j, l in enumerate(model.layers)
        ],
        "radii": {str(j): asdict(r) for j, r in radii.items()},
        "worst_case_Cl": {str(l): worst_case_Cl(model, l, radii) for l in tapped},
    }


# -------------------------------------------------------------- bound check


def bound_check(model: mdl.ModelGraph, l: int, masks, data, radii=None) -> list:
    """Compare global output error with ``C_l^2`` times the local masked energy.

    ``masks`` are ``(c_out, c_in)`` keep grids for layer ``l``. When the
    model has normalization layers after ``l`` and ``radii`` is not given, the
    radius for each mask is the smallest pre-norm norm seen on either the
    original or the masked model, so both arguments of each norm layer lie in
    the region its constant covers.
    """
    x = data.x if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)
    csms = fid.estimate_csms(model, x, l, variant=fid.PLAIN)
    ref = mdl.predict(model, x)
    needs_radius = any(j > l for j in norm_layers(model))
    ref_norms = {j: _prenorm_vectors(model, x, j).min() for j in norm_layers(model) if j > l} if needs_radius and radii is None else {}
    fixed_c = None if needs_radius and radii is None else worst_case_Cl(model, l, radii)
    results = []
    for mask in masks:
        mask = np.asarray(mask, dtype=np.float64)
        masked = mdl.scale_components(model, l, mask)
        out = mdl.predict(masked, x)
        global_err = float(np.mean(np.sum((ref - out) ** 2, axis=1)))
        local = float(sum(fid.masked_energy(c, mask[c.channel]) for c in csms))
        if fixed_c is None:
            rr = {j: min(v, _prenorm_vectors(masked, x, j).min()) for j, v in ref_norms.items()}
            if any(v < MIN_RADIUS for v in rr.values()):
                raise ZeroRadius("pre-norm radius collapsed under masking")
            c_l = worst_case_Cl(model, l, rr)
        else:
            c_l = fixed_c
        c2 = c_l**2
        ratio = global_err / local if local > 0 else 0.0
        ok = global_err <= c2 * local * (1 + 1e-9) + 1e-300
        results.append(BoundCheckResult(l, int(mask.sum()), int(mask.size), global_err, local, ratio, c2, bool(ok)))
    return results


def random_masks(shape, count, seed=0, keep_range=(0.1, 0.9)) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        p = rng.uniform(*keep_range)
        out.append((rng.random(shape) < p).astype(np.float64))
    return out


# ------------------------------------------------------- validation studies


def component_scores(model: mdl.ModelGraph, layer: int, data) -> np.ndarray:
    """Singleton fidelities ``(c_out, c_in)`` of a layer estimated on ``data``."""
    x = data.x if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)
    return fid.layer_scores(fid.estimate_csms(model, x, layer))


def select_components(scores, kind: str, per_channel: int, seed: int = 0, level: str = INPUT) -> np.ndarray:
    """Boolean ``(c_out, c_in)`` grid of ``per_channel`` components per output channel.

    At ``level="input"`` whole input components are ranked by their mean
    singleton fidelity over output channels, so every output channel gets the
    same set. At ``level="entry"`` each output channel is ranked separately.
    """
    scores = np.asarray(scores, dtype=np.float64)
    c_out, c_in = scores.shape
    if not 0 <= per_channel <= c_in:
        raise ValueError(f"per_channel must be in [0, {c_in}]")
    if level not in (INPUT, ENTRY):
        raise ValueError(f"unknown selection level {level!r}")
    sel = np.zeros((c_out, c_in), dtype=bool)
    if per_channel == 0:
        return sel
    rng = np.random.default_rng(seed)
    rows = [scores.mean(axis=0)] if level == INPUT else list(scores)
    for c, row in enumerate(rows):
        if kind == HIFI:
            idx = topk_indices(row, per_channel)
        elif kind == NON_HIFI:
            idx = topk_indices(-row, per_channel)
        elif kind == RANDOM:
            idx = rng.choice(c_in, size=per_channel, replace=False)
        else:
            raise ValueError(f"unknown component set {kind!r}")
        if level == INPUT:
            sel[:, idx] = True
        else:
            sel[c, idx] = True
    return sel


def noise_experiment(model, layer, scores, sigma, fraction, target, seed, data, level: str = INPUT) -> float:
    """Accuracy change after adding ``N(0, sigma^2)`` to a fraction of a layer's components.

    The selected components are the top (``hifi``) or bottom (``nonhifi``)
    ``round(fraction * c_in)`` by singleton fidelity, or a random set of that
    size (``random``); see :func:`select_components` for ``level``.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    scores = np.asarray(scores)
    per = int(round(fraction * scores.shape[1]))
    sel = select_components(scores, target, per, seed, level)
    base = mdl.accuracy(model, data)
    if sigma == 0 or per == 0:
        return 0.0
    noisy = model.copy()
    lay = noisy.layers[layer]
    name = mdl.component_weight_name(lay)
    W = lay.params[name]
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(W.shape) * sigma
    noise *= sel.reshape(sel.shape + (1,) * (W.ndim - 2))
    lay.params[name] = W + noise
    return mdl.accuracy(noisy, data) - base


def counterfactual_removal(model, layer, scores, kind, size, seed, data, level: str = INPUT) -> float:
    """Accuracy change after zeroing ``size`` components per output channel."""
    scores = np.asarray(scores)
    sel = select_components(scores, kind, size, seed, level)
    if size == 0:
        return 0.0
    base = mdl.accuracy(model, data)
    removed = mdl.scale_components(model, layer, (~sel).astype(np.float64))
    return mdl.accuracy(removed, data) - base


def mfs_curves(model, layer, data, ks=None, method="monte_carlo", channels=None, n_samples=None, seed=0, lam=fid.DEFAULT_LAMBDA) -> list:
    """Maximum-fidelity-vs-size rows for the channels of one layer."""
    from .selection import mfs_sweep

    x = data.x if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)
    csms = fid.estimate_csms(model, x, layer)
    if channels is not None:
        csms = [csms[c] for c in channels]
    rows = []
    for c in csms:
        rows += mfs_sweep(c, ks, (method,), lam, n_samples=n_samples, seed=seed)
    return rows


def quality_ablation(model, plan: PrunePlan, source: SyntheticSource, noise_scales, eval_data) -> list:
    """Prune with progressively noisier calibration sources."""
    rows = []
    for s in noise_scales:
        pruned, rep = modhifi_prune(model, plan, degrade(source, s), eval_data)
        rows.append(
            {
                "noise_scale": s,
                "accuracy": rep["metrics_after"].get("accuracy"),
                "params": rep["metrics_after"]["params"],
                "flops": rep["metrics_after"]["flops"],
            }
        )
    return rows


def sample_size_robustness(model, layer, source: SyntheticSource, sizes, reference_size, seeds=(0, 1, 2)) -> list:
    """Rank agreement of singleton scores at small sample sizes with a large-sample reference."""
    ref = component_scores(model, layer, sample(source, reference_size, seed=10_000)).ravel()
    rows = []
    for n in sizes:
        for sd in seeds:
            s = component_scores(model, layer, sample(source, n, seed=sd)).ravel()
            rows.append({"n_per_class": n, "seed": sd, "spearman": spearman_rank(s, ref)})
    return rows


def heuristic_agreement(model, layer, data, lam=fid.DEFAULT_LAMBDA) -> list:
    """Per-channel rank correlation of the Cholesky row-norm heuristic with exact singleton scores."""
    x = data.x if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)
    rows = []
    for c in fid.estimate_csms(model, x, layer):
        exact = fid.singleton_scores(c).s
        approx = fid.cholesky_heuristic(c, lam)
        try:
            rho = spearman_rank(approx, exact)
        except Exception:
            rho = float("nan")
        rows.append({"layer": layer, "channel": c.channel, "spearman": rho})
    return rows


def write_csv(rows, path) -> None:
    rows = list(rows)
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
