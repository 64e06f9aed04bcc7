"""Model modification from high-fidelity components.

Pruning keeps, for every output channel, its top-k input components by
singleton fidelity; input components outside the union of those sets are
removed from the whole layer and the surviving weights of each output channel
are rescaled by the optimal compensation. Unlearning computes the same scores
on forget-class samples only and zeroes (or negates) the top components.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fidelity as fid
from . import model as mdl
from .data import LabeledDataset, SyntheticSource, sample
from .errors import ConfigError, DegenerateLayer, InconsistentCoupling, ShapeMismatch, WrongClassData
from .selection import topk_indices

UNION = "union"
BUDGET = "budget"
ZERO = "zero"
NEGATE = "negate"

# layers a channel passes through unchanged in count between two linear layers
_CHANNELWISE = ("BatchNorm2D", "ReLU", "GELU", "AvgPool2D")


@dataclass
class ModificationMask:
    layer: int
    factors: np.ndarray  # (c_out, c_in); 0/1 for masks, delta for compensation
    mode: str = "prune"

    @property
    def kept_inputs(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.factors != 0, axis=0))


@dataclass
class PrunePlan:
    layers: list
    keep_fraction: float = 0.7
    lam: float = fid.DEFAULT_LAMBDA
    recalibrate: bool = True
    compensate: bool = True
    mode: str = UNION
    iterations: int = 1
    n_per_class: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("keep_fraction must lie in (0, 1]")
        if self.mode not in (UNION, BUDGET):
            raise ConfigError(f"unknown prune mode {self.mode!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")


@dataclass
class UnlearnPlan:
    forget_class: int
    layers: list
    k: int | None = None
    fraction: float = 0.1
    variant: str = ZERO

    def __post_init__(self):
        if self.variant not in (ZERO, NEGATE):
            raise ConfigError(f"unknown unlearning variant {self.variant!r}")
        if self.k is None and not 0 <= self.fraction <= 1:
            raise ConfigError("fraction must lie in [0, 1]")

    def k_for(self, c_in: int) -> int:
        if self.k is not None:
            return min(int(self.k), c_in)
        return min(int(math.ceil(self.fraction * c_in)), c_in)


# ------------------------------------------------------------------ helpers


def _calibration_x(data, n_per_class, seed):
    if isinstance(data, SyntheticSource):
        return sample(data, n_per_class, seed=seed).x
    if isinstance(data, LabeledDataset):
        return data.x
    return np.asarray(data, dtype=np.float64)


def _check_target(model, index):
    if not 0 <= index < len(model.layers) or model.layers[index].kind not in mdl.TAPPABLE:
        raise ConfigError(f"layer {index} is not a Dense, Conv2D or FFNBlock layer")


def _live_inputs(model, index):
    W = model.layers[index].params[mdl.component_weight_name(model.layers[index])]
    return np.any(W.reshape(W.shape[0], W.shape[1], -1) != 0, axis=(0, 2))


def _union_keep(scores, dead_channels, live, k):
    keep = np.zeros(scores.shape[1], dtype=bool)
    s = np.where(live[None, :], scores, -np.inf)
    for c in range(scores.shape[0]):
        if dead_channels[c]:
            continue
        keep[topk_indices(s[c], k)] = True
    return keep & live


def _select_keep(scores, dead_channels, live, fraction, mode):
    n_live = int(live.sum())
    target = max(1, int(math.ceil(fraction * n_live)))
    if mode == UNION:
        return _union_keep(scores, dead_channels, live, target)
    # largest per-channel k whose union still fits the layer budget
    best = _union_keep(scores, dead_channels, live, 1)
    lo, hi = 1, n_live
    while lo < hi:
        mid = (lo + hi + 1) // 2
        cand = _union_keep(scores, dead_channels, live, mid)
        if cand.sum() <= target:
            lo, best = mid, cand
        else:
            hi = mid - 1
    return best


def _channel_delta(csm, keep, lam, compensate):
    """Compensation for one output channel restricted to its live kept inputs."""
    delta = keep.astype(np.float64)
    if not compensate:
        return delta, None
    d = np.diag(csm.q)
    tiny = 1e-14 * max(float(np.max(np.abs(d))), 0.0)
    live = keep & (d > tiny)
    if not live.any() or fid._energy_is_dead(csm.q, csm.total_energy):
        return delta, None
    # components with no energy on this channel are irrelevant to its output;
    # folding them out keeps the solve well posed when lam == 0
    res = fid.subset_fidelity(csm, np.flatnonzero(live), lam)
    delta[live] = res.delta[live]
    return delta, res.fidelity


def _linear_output(model, x, index):
    return np.concatenate([t.output() for t in mdl.contributions(model, x, index)])


def recalibrate_batchnorm(model: mdl.ModelGraph, x) -> mdl.ModelGraph:
    """Re-estimate every BatchNorm's running statistics on ``x``, front to back."""
    model = model.copy()
    for idx, layer in enumerate(model.layers):
        if layer.kind != "BatchNorm2D":
            continue
        h = mdl.layer_inputs(model, x, idx)
        axes = (0,) if h.ndim == 2 else (0, 2, 3)
        count = h.size // h.shape[1]
        layer.params["running_mean"] = h.mean(axis=axes)
        layer.params["running_var"] = np.maximum(h.var(axis=axes) * count / max(count - 1, 1), 1e-12)
    return model


def evaluate(model: mdl.ModelGraph, data: LabeledDataset | None) -> dict:
    out = flop_param_report(model)["total"]
    metrics = {"flops": out["macs"], "params": out["params"]}
    if data is not None:
        metrics["accuracy"] = mdl.accuracy(model, data)
        metrics["per_class_accuracy"] = {str(k): v for k, v in mdl.per_class_accuracy(model, data).items()}
    return metrics


# ------------------------------------------------------------------ pruning


def prune_layer(model, index, x, keep_fraction, lam=fid.DEFAULT_LAMBDA, compensate=True, mode=UNION):
    """One pruning step on one layer. Returns ``(model', layer_report)``."""
    _check_target(model, index)
    csms = fid.estimate_csms(model, x, index)
    scores = fid.layer_scores(csms)
    dead = np.array([fid._energy_is_dead(c.q, c.total_energy) for c in csms])
    if dead.all():
        raise DegenerateLayer(f"layer {index}: every output channel is dead on the calibration data")
    live = _live_inputs(model, index)
    keep = _select_keep(scores, dead, live, keep_fraction, mode)
    c_out, c_in = scores.shape
    factors = np.zeros((c_out, c_in))
    fs = []
    for c, csm in enumerate(csms):
        factors[c], f = _channel_delta(csm, keep, lam, compensate)
        if f is not None:
            fs.append(f)
    out = mdl.scale_components(model, index, factors)
    y0 = _linear_output(model, x, index)
    y_mask = _linear_output(mdl.scale_components(model, index, np.broadcast_to(keep, factors.shape)), x, index)
    y1 = _linear_output(out, x, index)
    report = {
        "layer": index,
        "kept": int(keep.sum()),
        "removed": int(live.sum() - keep.sum()),
        "kept_indices": np.flatnonzero(keep).tolist(),
        "dead_channels": int(dead.sum()),
        "variant": csms[0].variant,
        "fs_stats": _stats(fs),
        "mse_mask_only": _output_mse(y0, y_mask, csms[0].variant),
        "mse_compensated": _output_mse(y0, y1, csms[0].variant),
    }
    return out, report


def _output_mse(y0, y1, variant):
    # a following BatchNorm absorbs per-channel mean shifts, so the centered
    # variant is judged on the centered difference
    diff = y0 - y1
    if variant == fid.CENTERED:
        axes = (0,) + tuple(range(2, diff.ndim))
        diff = diff - diff.mean(axis=axes, keepdims=True)
    return float(np.mean(diff**2))


def _stats(vals):
    if not vals:
        return {"min": None, "mean": None, "max": None}
    v = np.asarray(vals)
    return {"min": float(v.min()), "mean": float(v.mean()), "max": float(v.max())}


def modhifi_prune(model: mdl.ModelGraph, plan: PrunePlan, source, eval_data: LabeledDataset | None = None):
    """Structured pruning with compensation and BatchNorm recalibration.

    ``source`` is a :class:`SyntheticSource` (sampled with ``plan.n_per_class``
    and ``plan.seed``), a dataset, or a raw sample array; labels are never used.
    Layers are processed in the order given, each scored on the current
    (already modified) model.
    """
    for idx in plan.layers:
        _check_target(model, idx)
    x = _calibration_x(source, plan.n_per_class, plan.seed)
    before = evaluate(model, eval_data)
    current = model
    layer_reports = []
    removed_any = False
    for it in range(plan.iterations):
        for idx in plan.layers:
            current, rep = prune_layer(current, idx, x, plan.keep_fraction, plan.lam, plan.compensate, plan.mode)
            rep["iteration"] = it
            removed_any |= rep["removed"] > 0
            layer_reports.append(rep)
    if plan.recalibrate and removed_any:
        current = recalibrate_batchnorm(current, x)
    report = {
        "task": "prune",
        "per_layer": layer_reports,
        "metrics_before": before,
        "metrics_after": evaluate(current, eval_data),
        "seeds": {"calibration": plan.seed},
        "config": asdict(plan),
    }
    return current, report


# ---------------------------------------------------------------- unlearning


def unlearning_factors(model, plan: UnlearnPlan, x) -> dict:
    """Per-layer factor grids: 1 everywhere except 0 (or -1) on the forget-class HiFi sets."""
    out = {}
    for idx in plan.layers:
        _check_target(model, idx)
        layer = model.layers[idx]
        if plan.variant == NEGATE and layer.kind != "FFNBlock":
            raise ConfigError(f"negation needs a residual path; layer {idx} is {layer.kind}")
        csms = fid.estimate_csms(model, x, idx)
        scores = fid.layer_scores(csms)
        c_out, c_in = scores.shape
        k = plan.k_for(c_in)
        factors = np.ones((c_out, c_in))
        if k > 0:
            for c, csm in enumerate(csms):
                if fid._energy_is_dead(csm.q, csm.total_energy):
                    continue
                factors[c, topk_indices(scores[c], k)] = 0.0 if plan.variant == ZERO else -1.0
        out[idx] = factors
    return out


def modhifi_unlearn(model: mdl.ModelGraph, plan: UnlearnPlan, forget_data: LabeledDataset, eval_data: LabeledDataset | None = None):
    """Class unlearning by removing forget-class high-fidelity components.

    No compensation and no BatchNorm recalibration are applied.
    """
    y = np.asarray(forget_data.y)
    if len(y) == 0 or np.any(y != plan.forget_class):
        raise WrongClassData(f"forget data must contain only class {plan.forget_class}")
    if not 0 <= plan.forget_class < model.class_count:
        raise ConfigError(f"forget class {plan.forget_class} outside model head")
    factors = unlearning_factors(model, plan, forget_data.x)
    current = model
    per_layer = []
    for idx, f in factors.items():
        current = mdl.scale_components(current, idx, f)
        per_layer.append({"layer": idx, "modified": int(np.sum(f != 1)), "k": plan.k_for(f.shape[1])})

    def split(m):
        if eval_data is None:
            return {}
        forget = eval_data.subset([plan.forget_class])
        retain = eval_data.subset([c for c in range(eval_data.class_count) if c != plan.forget_class])
        metrics = evaluate(m, eval_data)
        metrics["forget_accuracy"] = mdl.accuracy(m, forget)
        metrics["retain_accuracy"] = mdl.accuracy(m, retain)
        return metrics

    report = {
        "task": "unlearn",
        "per_layer": per_layer,
        "metrics_before": split(model),
        "metrics_after": split(current),
        "seeds": {},
        "config": asdict(plan),
    }
    return current, report


# ---------------------------------------------------------------- compaction


def _producer(model, consumer):
    """Index of the linear layer feeding ``consumer`` through channelwise layers, or None."""
    j = consumer - 1
    while j >= 0 and model.layers[j].kind in _CHANNELWISE:
        j -= 1
    if j < 0 or model.layers[j].kind not in ("Dense", "Conv2D"):
        return None
    return j


def _zero_input_channels(model, consumer, channels, features_per_channel):
    W = model.layers[consumer].params["weight"]
    if model.layers[consumer].kind == "Conv2D":
        return np.flatnonzero(~np.any(W != 0, axis=(0, 2, 3)))
    cols = ~np.any(W != 0, axis=0)
    return np.flatnonzero(cols.reshape(channels, features_per_channel).all(axis=1))


def compact(model: mdl.ModelGraph, strict: bool = False) -> mdl.ModelGraph:
    """Physically remove channels whose every outgoing weight is zero.

    Handles Dense/Conv2D producers feeding Dense/Conv2D consumers through
    BatchNorm, activation and pooling layers, and the hidden units of FFN
    blocks. Paths touched by residual edges are left alone; with
    ``strict=True`` a removable channel on such a path raises
    :class:`InconsistentCoupling`.
    """
    out = model.copy()
    shapes = mdl.infer_shapes(out)
    coupled = {s for s, _ in out.residual_edges}
    for j, layer in enumerate(out.layers):
        if layer.kind == "FFNBlock":
            P = layer.params
            keep = np.any(P["w_down"] != 0, axis=0)
            if not keep.all() and keep.any():
                P["w_up"], P["b_up"], P["w_down"] = P["w_up"][keep], P["b_up"][keep], P["w_down"][:, keep]
            continue
        if layer.kind not in ("Dense", "Conv2D"):
            continue
        p = _producer(out, j)
        if p is None:
            continue
        act_shape = shapes[j - 1]
        channels = act_shape[0]
        fpc = int(np.prod(act_shape[1:])) if len(act_shape) > 1 else 1
        zero = _zero_input_channels(out, j, channels, fpc)
        if zero.size == 0 or zero.size == channels:
            continue
        if any(k in coupled for k in range(p, j)):
            if strict:
                raise InconsistentCoupling(f"channels {zero.tolist()} between layers {p} and {j} feed a residual edge")
            continue
        keep = np.setdiff1d(np.arange(channels), zero)
        prod = out.layers[p]
        prod.params["weight"] = prod.params["weight"][keep]
        prod.params["bias"] = prod.params["bias"][keep]
        if prod.kind == "Dense":
            prod.attrs["out_features"] = int(keep.size)
        for k in range(p + 1, j):
            mid = out.layers[k]
            for name in ("gamma", "beta", "running_mean", "running_var"):
                if name in mid.params:
                    mid.params[name] = mid.params[name][keep]
        cons = out.layers[j]
        if cons.kind == "Conv2D":
            cons.params["weight"] = cons.params["weight"][:, keep]
        else:
            cols = (keep[:, None] * fpc + np.arange(fpc)[None, :]).ravel()
            cons.params["weight"] = cons.params["weight"][:, cols]
            cons.attrs["in_features"] = int(cols.size)
        shapes = mdl.infer_shapes(out)
    return out


def flop_param_report(model: mdl.ModelGraph, batch: int = 1) -> dict:
    """Multiply-accumulate and learnable-parameter counts from shapes alone."""
    shapes = mdl.infer_shapes(model)
    rows = []
    for j, layer in enumerate(model.layers):
        in_shape = model.input_shape if j == 0 else shapes[j - 1]
        P = layer.params
        params = int(sum(P[k].size for k in mdl.LEARNABLE.get(layer.kind, ())))
        if layer.kind == "Dense":
            macs = P["weight"].shape[0] * P["weight"].shape[1]
        elif layer.kind == "Conv2D":
            o, c, k, _ = P["weight"].shape
            macs = o * c * k * k * in_shape[1] * in_shape[2]
        elif layer.kind == "FFNBlock":
            macs = in_shape[0] * (P["w_up"].size + P["w_down"].size)
        else:
            macs = 0
        rows.append({"layer": j, "kind": layer.kind, "macs": int(macs * batch), "params": params})
    total = {"macs": sum(r["macs"] for r in rows), "params": sum(r["params"] for r in rows)}
    return {"per_layer": rows, "total": total}
