"""Parameter-importance analysis of adversarial examples.

Importance of parameter i for a loss L at a fixed input is ``H_ii * theta_i**2``
(second-order sensitivity) or its first-order surrogate ``(g_i * theta_i)**2``.
The loss is :func:`rapa.attacks.loss_value` (target logit, or cross-entropy to
the target), evaluated on the surrogate in eval mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nets
from . import rng as rngmod
from . import tensor as T
from .attacks import loss_value
from .masking import MaskPlan, apply_masks, sample_masks
from .nets import ModelGraph, ParamStore


@dataclass
class ImportanceVector:
    values: np.ndarray
    method: str  # "first_order" | "hessian_fd"
    layer_slices: dict[str, slice]
    indices: np.ndarray | None = None  # global indices when only a subset was evaluated

    def layer(self, name: str) -> np.ndarray:
        if self.indices is not None:
            raise ValueError("per-layer slices need a full importance vector")
        return self.values[self.layer_slices[name]]


# -- importance ------------------------------------------------------------------

def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def param_gradient(graph: ModelGraph, params: ParamStore, x, y_tar, loss: str = "logit") -> np.ndarray:
    """Flat gradient of the summed loss w.r.t. all trainable parameters."""
    tape = T.Tape()
    leaves = {k: (tape.leaf(v, name=k) if k in params.trainable else v) for k, v in params.arrays.items()}
    z = nets.forward(graph, leaves, _as_batch(x))
    out = T.sum(loss_value(loss, z, np.atleast_1d(y_tar)))
    grads = T.backward(tape, out)
    tape.release()
    return np.concatenate([grads[leaves[k].id].ravel() for k in params.trainable])


def first_order_from_grad(grad, theta) -> np.ndarray:
    return (np.asarray(grad) * np.asarray(theta)) ** 2


def importance_first_order(graph, params, x_adv, y_tar, loss: str = "logit") -> ImportanceVector:
    g = param_gradient(graph, params, x_adv, y_tar, loss)
    return ImportanceVector(first_order_from_grad(g, params.flat()), "first_order", params.layer_slices())


def hessian_diag_fd(fn: Callable[[np.ndarray], float], theta, h: float = 1e-3,
                    indices=None, relative: bool = True) -> np.ndarray:
    """Central second differences ``(f(θ+δe_i) - 2f(θ) + f(θ-δe_i)) / δ²``.

    With ``relative`` the step is ``δ_i = h * (|θ_i| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    idx = np.arange(theta.size) if indices is None else np.asarray(indices)
    f0 = float(fn(theta))
    if not np.isfinite(f0):
        raise ValueError("non-finite loss at base point")
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        d = h * (abs(theta[i]) + 1e-8) if relative else h
        orig = theta[i]
        theta[i] = orig + d
        fp = float(fn(theta))
        theta[i] = orig - d
        fm = float(fn(theta))
        theta[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite loss while perturbing index {i}")
        out[j] = (fp - 2.0 * f0 + fm) / (d * d)
    return out


def _locate(params: ParamStore, i: int):
    for name, sl in params.slices().items():
        if sl.start <= i < sl.stop:
            return name, i - sl.start
    raise IndexError(i)


def importance_hessian_fd(graph, params, x_adv, y_tar, loss: str = "logit", h: float = 1e-3,
                          indices=None) -> ImportanceVector:
    """Finite-difference ``H_ii * θ_i²``; O(len(indices)) forward passes."""
    x = _as_batch(x_adv)
    yt = np.atleast_1d(y_tar)
    work = params.copy()
    idx = np.arange(params.n_trainable) if indices is None else np.asarray(indices)
    located = [_locate(params, int(i)) for i in idx]

    def f() -> float:
        return float(loss_value(loss, nets.forward(graph, work.arrays, x).data, yt).data.sum())

    f0 = f()
    if not np.isfinite(f0):
        raise ValueError("non-finite loss at base point")
    hess = np.empty(len(idx))
    theta = np.empty(len(idx))
    for j, (name, off) in enumerate(located):
        arr = work.arrays[name].reshape(-1)
        orig = arr[off]
        d = h * (abs(orig) + 1e-8)
        arr[off] = orig + d
        fp = f()
        arr[off] = orig - d
        fm = f()
        arr[off] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite loss while perturbing {name}[{off}]")
        hess[j] = (fp - 2.0 * f0 + fm) / (d * d)
        theta[j] = orig
    values = hess * theta ** 2
    return ImportanceVector(values, "hessian_fd", params.layer_slices(),
                            None if indices is None else idx)


# -- pruning -------------------------------------------------------------------------

def prune_by_importance(params: ParamStore, importance, fraction: float, end: str = "top") -> ParamStore:
    """Zero the ceil(fraction * n) most (``top``) or least (``bottom``) important parameters.

    Ties go to the lower global index.
    """
    vals = importance.values if isinstance(importance, ImportanceVector) else np.asarray(importance)
    n = params.n_trainable
    if vals.shape != (n,):
        raise ValueError(f"importance length {vals.size} does not match {n} parameters")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    if end not in ("top", "bottom"):
        raise ValueError("end must be 'top' or 'bottom'")
    k = math.ceil(round(fraction * n, 9))
    if k == 0:
        return params.copy()
    order = np.argsort(-vals if end == "top" else vals, kind="stable")
    flat = params.flat()
    flat[order[:k]] = 0.0
    return params.with_flat(flat)


# -- Gini ----------------------------------------------------------------------------

def gini_of_values(values) -> float:
    """Gini of a non-negative vector: sum_i (2i - n - 1) v_(i) / (n * sum v), ascending sort."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ValueError("empty vector")
    if v[0] < 0:
        raise ValueError("Gini needs non-negative values")
    total = math.fsum(v)
    if total <= 0:
        raise ValueError("Gini undefined for an all-zero vector")
    if v[0] == v[-1]:
        return 0.0
    coef = 2 * np.arange(1, n + 1) - n - 1
    return math.fsum(coef * v) / (n * total)


def gini_layer(importance_slice) -> float:
    """Min-max normalize to [0, 1], exponentiate, then Gini.  Constant slices give 0."""
    s = np.asarray(importance_slice, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("layer needs at least two parameters")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return 0.0
    return gini_of_values(np.exp((s - lo) / (hi - lo)))


@dataclass
class GiniReport:
    per_layer: dict[str, float]
    per_type: dict[str, float | None]  # conv / norm / linear; None when the model has none
    all_layers: float
    normalization: str = "min-max per layer before exp scaling"

    def to_dict(self) -> dict:
        return {"per_layer": self.per_layer, "per_type": self.per_type,
                "all_layers": self.all_layers, "normalization": self.normalization}


def gini_report(graph: ModelGraph, params: ParamStore, importance) -> GiniReport:
    vals = importance.values if isinstance(importance, ImportanceVector) else np.asarray(importance)
    if vals.size != params.n_trainable:
        raise ValueError("importance does not cover all parameters")
    slices = params.layer_slices()
    per_layer, by_type = {}, {"conv": [], "norm": [], "linear": []}
    for ly in graph.layers:
        if ly.layer_type is None:
            continue
        g = gini_layer(vals[slices[ly.name]])
        per_layer[ly.name] = g
        by_type[ly.layer_type].append(g)
    per_type = {k: (float(np.mean(v)) if v else None) for k, v in by_type.items()}
    return GiniReport(per_layer, per_type, float(np.mean(list(per_layer.values()))))


def mean_gini_report(graph, params, importances) -> GiniReport:
    """Average per-layer Gini over several importance vectors (one per example)."""
    reports = [gini_report(graph, params, imp) for imp in importances]
    per_layer = {k: float(np.mean([r.per_layer[k] for r in reports])) for k in reports[0].per_layer}
    per_type = {}
    for t in ("conv", "norm", "linear"):
        vals = [r.per_type[t] for r in reports]
        per_type[t] = None if vals[0] is None else float(np.mean(vals))
    return GiniReport(per_layer, per_type, float(np.mean([r.all_layers for r in reports])))


# -- masked-loss expectation -----------------------------------------------------------

def model_objective(graph, x, y_tar, loss: str = "logit") -> Callable[[ParamStore], float]:
    x = _as_batch(x)
    yt = np.atleast_1d(y_tar)
    return lambda p: float(loss_value(loss, nets.forward(graph, p.arrays, x).data, yt).data.sum())


def expected_masked_loss_mc(graph, params, plan: MaskPlan, objective: Callable[[ParamStore], float],
                            n_draws: int, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of ``objective(mask ⊙ θ)`` over independent draws."""
    if n_draws < 1:
        raise ValueError("need at least one draw")
    vals = np.empty(n_draws)
    for k in range(n_draws):
        draw = sample_masks(plan, graph, params, seed, rngmod.MC, k)
        vals[k] = objective(apply_masks(params, draw))
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_draws)) if n_draws > 1 else float("nan")
    return mean, se


def synthetic_quadratic(a, theta):
    """Toy model whose loss is ``sum a_i θ_i²`` with θ stored as a maskable dense weight.

    Returns ``(graph, params, objective, grad, hess_diag)`` at θ.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if a.shape != theta.shape:
        raise ValueError("a and theta must have the same length")
    layer = nets.LayerSpec("Dense", name="q", in_features=a.size, out_features=1)
    graph = ModelGraph("quadratic", [layer])
    params = ParamStore({"q.weight": theta[:, None].copy(), "q.bias": np.zeros(1)},
                        ["q.weight", "q.bias"], None, {})

    def objective(p: ParamStore) -> float:
        return math.fsum(a * p["q.weight"].ravel() ** 2)

    return graph, params, objective, 2 * a * theta, 2 * a


def taylor_penalty(theta, grads, hess_diag, p: float, form: str = "paper") -> float:
    """Second-order correction to the loss under Bernoulli(1-p) masking (base loss excluded).

    ``paper``: p(1-p)/2 * sum H_ii θ_i².  ``exact_moment``: uses E[Δ_i] = -pθ_i and
    E[Δ_i²] = pθ_i², giving -p * sum g_i θ_i + p/2 * sum H_ii θ_i².
    """
    theta, grads, hess = (np.asarray(a, dtype=np.float64).ravel() for a in (theta, grads, hess_diag))
    if not theta.shape == grads.shape == hess.shape:
        raise ValueError("theta, grads and hess_diag must align")
    curv = math.fsum(hess * theta ** 2)
    if form == "paper":
        return p * (1 - p) / 2 * curv
    if form == "exact_moment":
        return -p * math.fsum(grads * theta) + p / 2 * curv
    raise ValueError(f"unknown form {form!r}")


# -- variant diversity / utility -----------------------------------------------------------

@dataclass
class VariantStats:
    p_grid: list[float]
    diversity: list[float]
    utility: list[float]
    n_variants: int
    n_inputs: int
    base_accuracy: float = field(default=float("nan"))


def _log_probs(graph, params, x, batch=512):
    return np.concatenate([T.PRIMITIVES["log_softmax"][0](nets.forward(graph, params.arrays, x[i:i + batch]).data)
                           for i in range(0, len(x), batch)])


def mean_pairwise_kl(log_probs: np.ndarray) -> np.ndarray:
    """(V, N, C) log-probabilities -> (N,) mean KL(P_a || P_b) over ordered pairs a != b."""
    v = log_probs.shape[0]
    probs = np.exp(log_probs)
    acc = np.zeros(log_probs.shape[1])
    for a in range(v):
        for b in range(v):
            if a != b:
                acc += (probs[a] * (log_probs[a] - log_probs[b])).sum(axis=-1)
    return acc / (v * (v - 1))


def variant_diversity_utility(graph, params, plan: MaskPlan, p_grid, images, labels,
                              n_variants: int = 8, seed: int = 0) -> VariantStats:
    """Diversity (mean pairwise KL) and utility (mean top-1 accuracy) of masked variants.

    Variant k uses the same uniform draws at every p, so masks are nested across
    the grid (common random numbers).
    """
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    if n_variants < 2:
        raise ValueError("diversity needs at least two variants")
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    base_acc = float(np.mean(_log_probs(graph, params, x).argmax(-1) == labels))
    div, util = [], []
    for p in p_grid:
        plan_p = MaskPlan(plan.dense, plan.norm, plan.conv, float(p), float(p))
        lps = np.stack([
            _log_probs(graph, apply_masks(params, sample_masks(plan_p, graph, params, seed,
                                                               rngmod.VARIANT, k)), x)
            for k in range(n_variants)
        ])
        div.append(float(mean_pairwise_kl(lps).mean()))
        util.append(float(np.mean(lps.argmax(-1) == labels[None])))
    return VariantStats([float(p) for p in p_grid], div, util, n_variants, len(x), base_acc)


# -- pilot pruning study ------------------------------------------------------------------

@dataclass
class PilotReport:
    fraction: float
    loss: str
    asr_none: float
    asr_top: float
    asr_bottom: float
    success_none: np.ndarray
    success_top: np.ndarray
    success_bottom: np.ndarray
    pruning: str = "elementwise zeroing of the ranked parameters (no structural grouping)"

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "loss": self.loss, "asr_none": self.asr_none,
                "asr_top": self.asr_top, "asr_bottom": self.asr_bottom,
                "n_samples": int(self.success_none.size), "pruning": self.pruning}


def pilot_prune(graph, params, x_adv, y_tar, fraction: float = 0.005, loss: str = "logit") -> PilotReport:
    """Per adversarial example: rank parameters by first-order importance at that
    example, zero the top or bottom ``fraction`` and check whether the example
    still hits its target on the pruned surrogate."""
    x = _as_batch(x_adv)
    yt = np.atleast_1d(y_tar)
    if len(x) != len(yt):
        raise ValueError("x_adv and y_tar lengths differ")
    none = nets.predict(graph, params, x) == yt
    top = np.empty(len(x), dtype=bool)
    bottom = np.empty(len(x), dtype=bool)
    for i in range(len(x)):
        imp = importance_first_order(graph, params, x[i], yt[i], loss)
        for out, end in ((top, "top"), (bottom, "bottom")):
            pruned = prune_by_importance(params, imp, fraction, end)
            out[i] = nets.predict(graph, pruned, x[i:i + 1])[0] == yt[i]
    return PilotReport(fraction, loss, float(none.mean()), float(top.mean()), float(bottom.mean()),
                       none, top, bottom)
