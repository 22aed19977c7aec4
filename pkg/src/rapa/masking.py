"""DropConnect masks over selected layers' parameters.

Each entry is kept (1) when its uniform draw ``u >= p``, so keep ~ Bernoulli(1 - p).
Kept weights are not rescaled by 1/(1-p).  BatchNorm running statistics are
never masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .nets import ModelGraph, ParamStore

_KIND_INDEX = {"weight": 0, "bias": 1, "gamma": 2, "beta": 3}


@dataclass(frozen=True)
class MaskPlan:
    dense: bool = True
    norm: bool = True
    conv: bool = False
    p_w: float = 0.05
    p_b: float | None = None  # defaults to p_w

    def __post_init__(self):
        for p in (self.p_w, self.prob_b):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"drop probability {p} outside [0, 1]")
        if not (self.dense or self.norm or self.conv):
            raise ValueError("mask plan selects no layer type")

    @property
    def prob_b(self) -> float:
        return self.p_w if self.p_b is None else self.p_b

    @classmethod
    def from_layers(cls, layers: str | list[str], p: float, p_b: float | None = None) -> "MaskPlan":
        if isinstance(layers, str):
            layers = [s.strip() for s in layers.split(",") if s.strip()]
        unknown = set(layers) - {"dense", "norm", "conv"}
        if unknown:
            raise ValueError(f"unknown mask layer types {sorted(unknown)}")
        return cls("dense" in layers, "norm" in layers, "conv" in layers, p, p_b)

    def layer_flags(self) -> list[str]:
        return [n for n, on in (("dense", self.dense), ("norm", self.norm), ("conv", self.conv)) if on]

    def targets(self, graph: ModelGraph) -> list[tuple[int, str, float]]:
        """(layer index, parameter name, drop probability) for every masked tensor."""
        wanted = {"linear": self.dense, "norm": self.norm, "conv": self.conv}
        out = []
        for i, ly in enumerate(graph.layers):
            if ly.layer_type is None or not wanted[ly.layer_type]:
                continue
            if ly.layer_type == "norm":
                out += [(i, f"{ly.name}.gamma", self.p_w), (i, f"{ly.name}.beta", self.prob_b)]
            else:
                out += [(i, f"{ly.name}.weight", self.p_w), (i, f"{ly.name}.bias", self.prob_b)]
        return out


@dataclass
class MaskDraw:
    masks: dict[str, np.ndarray]
    coords: tuple[int, ...] = field(default_factory=tuple)


def sample_masks(plan: MaskPlan, graph: ModelGraph, params: ParamStore, seed: int,
                 *coords: int) -> MaskDraw:
    """One mask set; tensor k of layer i uses substream ``(seed, MASK, *coords, i, k)``."""
    masks = {}
    for layer_idx, name, p in plan.targets(graph):
        kind = _KIND_INDEX[name.rsplit(".", 1)[1]]
        g = rngmod.substream(seed, rngmod.MASK, *coords, layer_idx, kind)
        u = g.random(params[name].shape)
        masks[name] = (u >= p).astype(np.float64)
    return MaskDraw(masks, (seed, *coords))


def apply_masks(params: ParamStore, draw: MaskDraw) -> ParamStore:
    """New store with ``mask * value`` for masked tensors; the source store is not touched."""
    upd = {}
    for name, m in draw.masks.items():
        if name not in params:
            raise ValueError(f"mask for unknown parameter {name}")
        if m.shape != params[name].shape:
            raise ValueError(f"mask shape {m.shape} != parameter {name} shape {params[name].shape}")
        upd[name] = m * params[name]
    return params.replace(**upd)


class VariantStream:
    """Masked views of one base model addressed by (t, s)."""

    def __init__(self, plan: MaskPlan, graph: ModelGraph, params: ParamStore, seed: int):
        self.plan, self.graph, self.params, self.seed = plan, graph, params, seed

    def draw(self, t: int, s: int) -> MaskDraw:
        return sample_masks(self.plan, self.graph, self.params, self.seed, t, s)

    def view(self, t: int, s: int) -> ParamStore:
        return apply_masks(self.params, self.draw(t, s))

    def __getitem__(self, ts):
        return self.view(*ts)


def variant_stream(plan: MaskPlan, graph: ModelGraph, params: ParamStore, seed: int) -> VariantStream:
    return VariantStream(plan, graph, params, seed)
