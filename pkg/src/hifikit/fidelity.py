"""Component similarity matrices and subset fidelity.

For one output channel ``c`` of a linear layer the CSM is
``Q[i, j] = E <A_ci, A_cj>`` (Frobenius inner product over positions). Every
fidelity quantity is a function of ``Q`` alone: the output energy is
``1' Q 1``, and the residual of reconstructing the channel from a subset ``C``
with per-component rescaling ``delta`` is ``u' Q u`` with ``u = 1 - delta``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from .errors import EmptyAccumulator, FormatError, TapMismatch
from .numerics import cholesky_regularized, solve_spd, symmetrize

DEFAULT_LAMBDA = 1e-4
PLAIN = "plain"
CENTERED = "centered"


@dataclass
class CSMAccumulator:
    """Running sums for the CSMs of all output channels of one layer.

    ``qsum[c]`` accumulates per-sample Gram matrices of the contributions to
    channel ``c`` and ``msum[c]`` the contributions themselves (for the
    centered variant). Accumulators over disjoint sample sets combine with
    :func:`merge`.
    """

    layer: int
    c_out: int
    c_in: int
    positions: int
    qsum: np.ndarray = None
    msum: np.ndarray = None
    count: int = 0

    def __post_init__(self):
        if self.qsum is None:
            self.qsum = np.zeros((self.c_out, self.c_in, self.c_in))
        if self.msum is None:
            self.msum = np.zeros((self.c_out, self.c_in, self.positions))


@dataclass
class CSM:
    q: np.ndarray
    variant: str = PLAIN
    layer: int = -1
    channel: int = -1
    n_samples: int = 0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    @property
    def total_energy(self) -> float:
        return float(self.q.sum())


@dataclass
class SingletonScores:
    s: np.ndarray
    alpha: np.ndarray


@dataclass
class SubsetFidelityResult:
    subset: tuple
    fidelity: float
    delta: np.ndarray
    residual: float
    dead: bool = False


def new_accumulator(layer: int, c_out: int, c_in: int, positions: int) -> CSMAccumulator:
    return CSMAccumulator(layer, c_out, c_in, positions)


def accumulate(acc: CSMAccumulator, taps) -> CSMAccumulator:
    """Add one batch of contributions (``model.Contributions`` or a raw
    ``(N, c_out, c_in, positions)`` array) to ``acc`` in place."""
    vals = taps.values if isinstance(taps, mdl.Contributions) else np.asarray(taps, dtype=np.float64)
    if isinstance(taps, mdl.Contributions) and taps.layer != acc.layer:
        raise TapMismatch(f"taps from layer {taps.layer} fed to accumulator of layer {acc.layer}")
    if vals.ndim == 3:
        vals = vals[..., None]
    if vals.shape[1:] != (acc.c_out, acc.c_in, acc.positions):
        raise TapMismatch(f"taps shape {vals.shape[1:]} != ({acc.c_out}, {acc.c_in}, {acc.positions})")
    acc.qsum += np.einsum("ncip,ncjp->cij", vals, vals, optimize=True)
    acc.msum += vals.sum(axis=0)
    acc.count += vals.shape[0]
    return acc


def merge(a: CSMAccumulator, b: CSMAccumulator) -> CSMAccumulator:
    if (a.layer, a.c_out, a.c_in, a.positions) != (b.layer, b.c_out, b.c_in, b.positions):
        raise TapMismatch("accumulators describe different layers")
    return CSMAccumulator(a.layer, a.c_out, a.c_in, a.positions, a.qsum + b.qsum, a.msum + b.msum, a.count + b.count)


def finalize(acc: CSMAccumulator, variant: str = PLAIN, channels=None) -> list:
    """Turn running sums into per-channel :class:`CSM` objects.

    ``centered`` subtracts ``<E A_ci, E A_cj>`` from the plain second moment.
    """
    if acc.count < 1:
        raise EmptyAccumulator(f"layer {acc.layer}: no samples accumulated")
    if variant not in (PLAIN, CENTERED):
        raise ValueError(f"unknown CSM variant {variant!r}")
    channels = range(acc.c_out) if channels is None else channels
    out = []
    for c in channels:
        q = acc.qsum[c] / acc.count
        if variant == CENTERED:
            mean = acc.msum[c] / acc.count
            q = q - mean @ mean.T
        out.append(CSM(symmetrize(q), variant, acc.layer, int(c), acc.count))
    return out


def default_variant(model: mdl.ModelGraph, index: int) -> str:
    """Centered when the layer feeds straight into a BatchNorm, plain otherwise."""
    nxt = index + 1
    if nxt < len(model.layers) and model.layers[nxt].kind == "BatchNorm2D":
        return CENTERED
    return PLAIN


def estimate_csms(model: mdl.ModelGraph, x, index: int, variant: str | None = None, batch_size: int = 64) -> list:
    """CSMs of every output channel of layer ``index`` from samples ``x``."""
    layer = model.layers[index]
    c_out, c_in = mdl.component_shape(layer)
    acc = None
    for taps in mdl.contributions(model, x, index, batch_size):
        if acc is None:
            acc = new_accumulator(index, c_out, c_in, taps.values.shape[-1])
        accumulate(acc, taps)
    if acc is None:
        raise EmptyAccumulator(f"layer {index}: no samples given")
    return finalize(acc, variant or default_variant(model, index))


def _energy_is_dead(q: np.ndarray, total: float) -> bool:
    scale = max(float(np.trace(np.abs(q))), 0.0)
    return total <= 0.0 or total <= 1e-14 * scale or scale == 0.0


def subset_fidelity(csm, subset, lam: float = DEFAULT_LAMBDA) -> SubsetFidelityResult:
    """Fidelity of ``subset`` with the closed-form optimal compensation.

    ``delta_C = 1 + (Q[C, C] + lam I)^-1 Q[C, ~C] 1`` and zero outside ``C``.
    A channel with zero output energy is dead: every subset has fidelity 1.
    If regularization makes the residual exceed the output energy the
    compensation falls back to zero, which gives fidelity 0.
    """
    Q = csm.q if isinstance(csm, CSM) else np.asarray(csm, dtype=np.float64)
    n = Q.shape[0]
    C = np.unique(np.asarray(list(subset), dtype=np.int64))
    if C.size == 0 or C[0] < 0 or C[-1] >= n:
        raise ValueError(f"subset must be a non-empty subset of range({n})")
    total = float(Q.sum())
    delta = np.zeros(n)
    if _energy_is_dead(Q, total):
        delta[C] = 1.0
        return SubsetFidelityResult(tuple(C.tolist()), 1.0, delta, 0.0, dead=True)
    if C.size == n:
        delta[:] = 1.0
        return SubsetFidelityResult(tuple(C.tolist()), 1.0, delta, 0.0)
    rest = np.setdiff1d(np.arange(n), C)
    rhs = Q[np.ix_(C, rest)].sum(axis=1)
    delta[C] = 1.0 + solve_spd(Q[np.ix_(C, C)], rhs, lam)
    u = 1.0 - delta
    residual = float(u @ Q @ u)
    if residual > total:
        delta[:] = 0.0
        return SubsetFidelityResult(tuple(C.tolist()), 0.0, delta, total)
    fs = min(max(1.0 - residual / total, 0.0), 1.0)
    return SubsetFidelityResult(tuple(C.tolist()), fs, delta, max(residual, 0.0))


def singleton_scores(csm) -> SingletonScores:
    """Singleton fidelities ``s_i = (Q1)_i^2 / (Q_ii 1'Q1)`` and ``alpha_i = (Q1)_i / Q_ii``."""
    Q = csm.q if isinstance(csm, CSM) else np.asarray(csm, dtype=np.float64)
    r = Q.sum(axis=1)
    d = np.diag(Q).copy()
    total = float(Q.sum())
    s = np.zeros_like(d)
    alpha = np.zeros_like(d)
    live = d > 0
    if total > 0:
        alpha[live] = r[live] / d[live]
        s[live] = r[live] ** 2 / (d[live] * total)
    return SingletonScores(np.clip(s, 0.0, 1.0), alpha)


def saliency(csm) -> np.ndarray:
    """``E <Y_c, A_ci>`` for every component, i.e. the row sums of ``Q``."""
    Q = csm.q if isinstance(csm, CSM) else np.asarray(csm, dtype=np.float64)
    return Q.sum(axis=1)


def cholesky_heuristic(csm, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Squared row norms of the regularized Cholesky factor of ``Q``.

    Note ``||L_i||^2 == Q_ii + lam``, so this ranks components by their own
    energy.
    """
    Q = csm.q if isinstance(csm, CSM) else np.asarray(csm, dtype=np.float64)
    L = cholesky_regularized(Q, lam)
    return np.sum(L * L, axis=1)


def residual_energy(csm, delta) -> float:
    """``E ||Y_c - sum_i delta_i A_ci||^2`` for an arbitrary rescaling vector."""
    Q = csm.q if isinstance(csm, CSM) else np.asarray(csm, dtype=np.float64)
    u = 1.0 - np.asarray(delta, dtype=np.float64)
    return float(u @ Q @ u)


def masked_energy(csm, mask) -> float:
    """Local quadratic form ``(1 - m)' Q (1 - m)`` for a keep mask ``m``."""
    return residual_energy(csm, mask)


def layer_scores(csms) -> np.ndarray:
    """Stack singleton fidelities of a layer into ``(c_out, c_in)``."""
    return np.stack([singleton_scores(c).s for c in csms])


# --------------------------------------------------------------------- I/O


def csm_to_dict(csm: CSM) -> dict:
    iu = np.triu_indices(csm.dim)
    return {
        "layer": int(csm.layer),
        "channel": int(csm.channel),
        "variant": csm.variant,
        "dim": int(csm.dim),
        "q": [float(v) for v in csm.q[iu]],
        "n_samples": int(csm.n_samples),
    }


def csm_from_dict(doc: dict) -> CSM:
    try:
        dim = int(doc["dim"])
        vals = np.asarray(doc["q"], dtype=np.float64)
        if vals.size != dim * (dim + 1) // 2:
            raise FormatError(f"csm.q: expected {dim * (dim + 1) // 2} upper-triangle values, found {vals.size}")
        q = np.zeros((dim, dim))
        q[np.triu_indices(dim)] = vals
        q = q + np.triu(q, 1).T
        return CSM(q, doc.get("variant", PLAIN), int(doc.get("layer", -1)), int(doc.get("channel", -1)), int(doc.get("n_samples", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"csm: malformed field {exc}") from None


def save_csms(csms, path) -> None:
    Path(path).write_text(json.dumps([csm_to_dict(c) for c in csms]))


def load_csms(path) -> list:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if isinstance(doc, dict):
        doc = [doc]
    return [csm_from_dict(d) for d in doc]
