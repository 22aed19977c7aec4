"""Targeted iterative sign-gradient attacks with optional random parameter masking.

The driver :func:`run_attack` covers I-FGSM, MI, TI smoothing, DI/RDI/SI input
diversity, and per-inference DropConnect masking of the surrogate.  All random
choices come from substreams addressed by ``(seed, t, s, ...)`` and shared by the
whole batch, so splitting samples into chunks or workers never changes results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container, nets
from . import rng as rngmod
from . import tensor as T
from .masking import MaskPlan, sample_masks, apply_masks

MAGIC = b"RPAB"
IMAGE = nets.INPUT_SHAPE[0]
DEFAULT_TI_KERNEL = 5


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"  # identity | di | rdi | si
    ratio: float = 1.25
    prob: float = 0.7
    copies: int = 5

    def __post_init__(self):
        if self.kind not in ("identity", "di", "rdi", "si"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.ratio < 1:
            raise ValueError("enlarge ratio must be >= 1")
        if not 0 <= self.prob <= 1:
            raise ValueError("apply probability must be in [0, 1]")
        if self.copies < 1:
            raise ValueError("si needs at least one copy")


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 16 / 255
    alpha: float = 2 / 255
    steps: int = 300
    inferences: int = 5
    mu: float = 1.0
    loss: str = "logit"
    transform: TransformSpec = TransformSpec()
    ti_kernel_size: int = 0
    mask_plan: MaskPlan | None = None
    seed: int = 0

    def validate(self) -> None:
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 1:
            raise ValueError("steps (T) must be >= 1")
        if self.inferences < 1:
            raise ValueError("inferences (S) must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.loss not in ("logit", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.ti_kernel_size < 0 or (self.ti_kernel_size and self.ti_kernel_size % 2 == 0):
            raise ValueError("ti_kernel_size must be 0 or an odd positive integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["transform"] = TransformSpec(**d.get("transform", {}))
        if d.get("mask_plan") is not None:
            d["mask_plan"] = MaskPlan(**d["mask_plan"])
        return cls(**d)


# -- losses -------------------------------------------------------------------

def loss_value(kind: str, logits, y_tar):
    """Per-sample loss: logit loss ``z[y_tar]`` or cross-entropy ``-log softmax(z)[y_tar]``.

    Works on Tensors (differentiable) and on arrays; a 1-D input is one sample.
    """
    if kind == "logit":
        return T.gather(logits, y_tar)
    if kind == "cross_entropy":
        return T.mul(T.gather(T.log_softmax(logits), y_tar), -1.0)
    raise ValueError(f"unknown loss {kind!r}")


def attack_objective(kind: str, logits, y_tar):
    """Quantity the targeted attack ascends: the target logit, or minus cross-entropy."""
    if kind == "logit":
        return loss_value(kind, logits, y_tar)
    return T.mul(loss_value(kind, logits, y_tar), -1.0)


# -- input transforms ------------------------------------------------------------

def scale_copies(x, k: int) -> list:
    if k < 1:
        raise ValueError("k must be >= 1")
    return [x if j == 0 else T.mul(x, 1.0 / 2 ** j) for j in range(k)]


def input_transform(spec: TransformSpec, x, rng: np.random.Generator | None = None, index: int = 0):
    """Differentiable transform of a batch (N, H, W, C).

    di: with probability ``prob`` resize to a random side in [H, ceil(H*ratio)] and
    zero-pad at a random offset onto the ceil(H*ratio) canvas.  rdi additionally
    resizes back to H x W.  si returns copy ``index mod copies`` (x / 2**j).
    """
    if spec.kind == "identity":
        return x
    if spec.kind == "si":
        j = index % spec.copies
        return x if j == 0 else T.mul(x, 1.0 / 2 ** j)
    h = x.shape[1]
    canvas = math.ceil(h * spec.ratio)
    # draw every variate even when not applied so the stream layout is fixed
    u = rng.random()
    rnd = int(rng.integers(h, canvas + 1))
    top = int(rng.integers(0, canvas - rnd + 1))
    left = int(rng.integers(0, canvas - rnd + 1))
    if u >= spec.prob:
        return x
    out = T.resize_bilinear(x, rnd, rnd)
    out = T.pad2d(out, top, canvas - rnd - top, left, canvas - rnd - left)
    if spec.kind == "rdi":
        out = T.resize_bilinear(out, h, x.shape[2])
    return out


# -- gradient post-processing and update ---------------------------------------------

def gaussian_kernel(size: int) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    sigma = size / 3.0
    r = np.arange(size) - size // 2
    k1 = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(k1, k1)
    return k / k.sum()


def ti_smooth(grad: np.ndarray, kernel_size: int) -> np.ndarray:
    """Zero-padded 2-D Gaussian smoothing of a (N, H, W, C) gradient, per channel."""
    if kernel_size < 0 or (kernel_size and kernel_size % 2 == 0):
        raise ValueError("kernel size must be 0 or odd")
    if kernel_size <= 1:
        return grad
    k = gaussian_kernel(kernel_size)
    n, h, w, c = grad.shape
    per_channel = grad.transpose(0, 3, 1, 2).reshape(n * c, h, w, 1)
    out = T.PRIMITIVES["conv2d"][0](per_channel, k[:, :, None, None], kernel_size // 2)
    return out.reshape(n, c, h, w).transpose(0, 2, 3, 1)


def mi_update(m, g, mu: float, per_sample: bool = False):
    """m' = mu * m + g / ||g||_1 (per leading-axis sample when ``per_sample``)."""
    g = np.asarray(g, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if per_sample:
        norm = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
    else:
        norm = np.abs(g).sum()
    safe = np.where(norm > 0, norm, 1.0)
    return mu * m + np.where(norm > 0, g / safe, 0.0)


def step_and_project(x_adv, direction, alpha, x_clean, eps):
    x = np.asarray(x_adv) + alpha * np.sign(direction)
    x = np.clip(x, x_clean - eps, x_clean + eps)
    return np.clip(x, 0.0, 1.0)


# -- driver ------------------------------------------------------------------------

@dataclass
class AdvBatch:
    x_adv: np.ndarray
    x_clean: np.ndarray
    y: np.ndarray
    y_tar: np.ndarray
    trace_loss: np.ndarray  # (N, T) objective averaged over the S inferences
    trace_grad_inf: np.ndarray  # (N, T) L-inf norm of the averaged gradient
    config: dict = field(default_factory=dict)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)  # iteration -> x_adv

    def __len__(self):
        return len(self.y)


def _accepts(graph, shape) -> bool:
    try:
        s = tuple(shape)
        for i, ly in enumerate(graph.layers):
            s = nets._out_shape(ly, s, i)
        return True
    except ValueError:
        return False


def run_attack(graph, params, batch, config: AttackConfig, chunk_size: int = 256,
               workers: int = 1, snapshot_every: int = 0) -> AdvBatch:
    """Craft targeted adversarial examples for ``batch`` (a Dataset with targets).

    With ``snapshot_every`` > 0 the iterate is kept every that many steps.
    """
    config.validate()
    if batch.targets is None:
        raise ValueError("batch has no target labels")
    if config.transform.kind == "di":
        canvas = math.ceil(IMAGE * config.transform.ratio)
        if config.transform.prob > 0 and not _accepts(graph, (canvas, canvas, 1)):
            raise ValueError(f"di yields {canvas}x{canvas} inputs that {graph.name} cannot take; "
                             "use rdi for fixed-size models")
    x = np.asarray(batch.images, dtype=np.float64)
    y_tar = np.asarray(batch.targets)
    chunks = [slice(i, i + chunk_size) for i in range(0, len(x), chunk_size)]
    job = lambda sl: _attack_chunk(graph, params, x[sl], y_tar[sl], config, snapshot_every)  # noqa: E731
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(job, chunks))
    else:
        parts = [job(sl) for sl in chunks]
    return AdvBatch(
        x_adv=np.concatenate([p[0] for p in parts]),
        x_clean=x.copy(),
        y=np.asarray(batch.labels).copy(),
        y_tar=y_tar.copy(),
        trace_loss=np.concatenate([p[1] for p in parts]),
        trace_grad_inf=np.concatenate([p[2] for p in parts]),
        config=config.to_dict(),
        snapshots={t: np.concatenate([p[3][t] for p in parts]) for t in parts[0][3]},
    )


def input_gradient(graph, params, x_in, y_tar, loss: str, transform=None, rng=None, index=0):
    """Gradient of the summed per-sample objective w.r.t. ``x_in``, and per-sample objective values."""
    tape = T.Tape()
    leaf = tape.leaf(x_in, name="x_adv")
    xt = leaf if transform is None else input_transform(transform, leaf, rng, index)
    obj = attack_objective(loss, nets.forward(graph, params, xt), y_tar)
    g = T.backward(tape, T.sum(obj))[leaf.id]
    tape.release()
    return g, obj.data


def _attack_chunk(graph, params, x, y_tar, cfg: AttackConfig, snapshot_every: int = 0):
    n = len(x)
    S = cfg.inferences
    x_adv = x.copy()
    m = np.zeros_like(x)
    trace_loss = np.empty((n, cfg.steps))
    trace_ginf = np.empty((n, cfg.steps))
    plan = cfg.mask_plan
    snaps = {}
    for t in range(1, cfg.steps + 1):
        total = None
        obj_total = None
        for s in range(1, S + 1):
            view = params
            if plan is not None:
                view = apply_masks(params, sample_masks(plan, graph, params, cfg.seed, t, s))
            rng = rngmod.substream(cfg.seed, rngmod.TRANSFORM, t, s)
            g, obj = input_gradient(graph, view, x_adv, y_tar, cfg.loss, cfg.transform, rng, s - 1)
            total = g if total is None else total + g
            obj_total = obj if obj_total is None else obj_total + obj
        g = total / S
        trace_loss[:, t - 1] = obj_total / S
        trace_ginf[:, t - 1] = np.abs(g).reshape(n, -1).max(axis=1)
        if cfg.ti_kernel_size > 1:
            g = ti_smooth(g, cfg.ti_kernel_size)
        m = mi_update(m, g, cfg.mu, per_sample=True)
        x_adv = step_and_project(x_adv, m, cfg.alpha, x, cfg.eps)
        if np.abs(x_adv - x).max() > cfg.eps + 1e-9 or x_adv.min() < 0 or x_adv.max() > 1:
            raise AssertionError(f"projection invariant violated at iteration {t}")
        if snapshot_every and t % snapshot_every == 0:
            snaps[t] = x_adv.copy()
    return x_adv, trace_loss, trace_ginf, snaps


def save_advbatch(adv: AdvBatch, path, extra_header: dict | None = None) -> None:
    tensors = [("x_adv", "f64", adv.x_adv), ("x_clean", "f64", adv.x_clean),
               ("y", "i64", adv.y), ("y_tar", "i64", adv.y_tar),
               ("trace_loss", "f64", adv.trace_loss), ("trace_grad_inf", "f64", adv.trace_grad_inf)]
    tensors += [(f"snap_{t}", "f64", v) for t, v in sorted(adv.snapshots.items())]
    header = {"format": "rapa-advbatch", "config": adv.config, **(extra_header or {})}
    container.write(path, MAGIC, header, tensors)


def load_advbatch(path) -> AdvBatch:
    header, a = container.read(path, MAGIC)
    snaps = {int(k[5:]): v for k, v in a.items() if k.startswith("snap_")}
    return AdvBatch(a["x_adv"], a["x_clean"], a["y"], a["y_tar"], a["trace_loss"],
                    a["trace_grad_inf"], header.get("config", {}), snaps)
