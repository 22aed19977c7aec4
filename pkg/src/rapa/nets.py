"""Small classifiers over 16x16x1 inputs: presets, init, SGD training, checkpoints.

Flat parameter order (the global index of each trainable scalar): layers in graph
order; within a layer ``weight``, ``bias``, ``gamma``, ``beta``; row-major within
each array.  Dense weights are ``(d_in, d_out)``; conv kernels ``(k, k, c_in, c_out)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import tensor as T

INPUT_SHAPE = (16, 16, 1)
N_CLASSES = 8
MAGIC = b"RPAC"

KINDS = ("Dense", "Conv2d", "BatchNorm", "LayerNorm", "ReLU", "AvgPool", "Flatten")
LAYER_TYPE = {"Dense": "linear", "Conv2d": "conv", "BatchNorm": "norm", "LayerNorm": "norm"}
_PREFIX = {"Dense": "dense", "Conv2d": "conv", "BatchNorm": "bn", "LayerNorm": "ln",
           "ReLU": "relu", "AvgPool": "pool", "Flatten": "flatten"}


@dataclass
class LayerSpec:
    kind: str
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    num_features: int | None = None
    size: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def layer_type(self) -> str | None:
        """'linear', 'conv', 'norm', or None for parameter-free layers."""
        return LAYER_TYPE.get(self.kind)


def Dense(i, o): return LayerSpec("Dense", in_features=i, out_features=o)
def Conv2d(i, o, k=3): return LayerSpec("Conv2d", in_channels=i, out_channels=o, kernel_size=k)
def BatchNorm(c): return LayerSpec("BatchNorm", num_features=c)
def LayerNorm(c): return LayerSpec("LayerNorm", num_features=c)
def ReLU(): return LayerSpec("ReLU")
def AvgPool(s=2): return LayerSpec("AvgPool", size=s)
def Flatten(): return LayerSpec("Flatten")


def _cnn(norm, c1=8, c2=16, hidden=64):
    return [Conv2d(1, c1), norm(c1), ReLU(), Conv2d(c1, c2), norm(c2), ReLU(), AvgPool(2),
            Flatten(), Dense(64 * c2, hidden), ReLU(), Dense(hidden, N_CLASSES)]


PRESETS = {
    "cnn_bn": lambda: _cnn(BatchNorm),
    "cnn_ln": lambda: _cnn(LayerNorm),
    "mlp": lambda: [Flatten(), Dense(256, 128), ReLU(), Dense(128, N_CLASSES)],
    "cnn_wide": lambda: _cnn(BatchNorm, 16, 32),
}


@dataclass
class ModelGraph:
    name: str
    layers: list[LayerSpec]
    input_shape: tuple[int, ...] = INPUT_SHAPE
    n_classes: int = N_CLASSES

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered name -> shape for trainable parameters and normalization buffers."""
        shapes = {}
        for ly in self.layers:
            if ly.kind == "Dense":
                shapes[f"{ly.name}.weight"] = (ly.in_features, ly.out_features)
                shapes[f"{ly.name}.bias"] = (ly.out_features,)
            elif ly.kind == "Conv2d":
                k = ly.kernel_size
                shapes[f"{ly.name}.weight"] = (k, k, ly.in_channels, ly.out_channels)
                shapes[f"{ly.name}.bias"] = (ly.out_channels,)
            elif ly.kind in ("BatchNorm", "LayerNorm"):
                shapes[f"{ly.name}.gamma"] = (ly.num_features,)
                shapes[f"{ly.name}.beta"] = (ly.num_features,)
                if ly.kind == "BatchNorm":
                    shapes[f"{ly.name}.running_mean"] = (ly.num_features,)
                    shapes[f"{ly.name}.running_var"] = (ly.num_features,)
        return shapes

    def trainable_names(self) -> list[str]:
        return [n for n in self.param_shapes() if not n.endswith(("running_mean", "running_var"))]

    def n_params(self) -> int:
        shapes = self.param_shapes()
        return sum(math.prod(shapes[n]) for n in self.trainable_names())

    def layer(self, name: str) -> LayerSpec:
        for ly in self.layers:
            if ly.name == name:
                return ly
        raise KeyError(name)

    def descriptor(self) -> dict:
        return {"name": self.name, "layers": [asdict(ly) for ly in self.layers]}


def build_model(arch) -> ModelGraph:
    """``arch`` is a preset name, a list of LayerSpecs, or a descriptor dict."""
    if isinstance(arch, str):
        if arch not in PRESETS:
            raise ValueError(f"unknown preset {arch!r}; choose from {sorted(PRESETS)}")
        name, layers = arch, PRESETS[arch]()
    elif isinstance(arch, dict):
        name, layers = arch["name"], [LayerSpec(**d) for d in arch["layers"]]
    else:
        name, layers = "custom", [LayerSpec(**asdict(ly)) for ly in arch]

    counters: dict[str, int] = {}
    shape = INPUT_SHAPE
    for i, ly in enumerate(layers):
        counters[ly.kind] = counters.get(ly.kind, 0) + 1
        if ly.name is None:
            ly.name = f"{_PREFIX[ly.kind]}{counters[ly.kind]}"
        shape = _out_shape(ly, shape, i)
    if shape != (N_CLASSES,):
        raise ValueError(f"final output shape {shape}, expected ({N_CLASSES},)")
    names = [ly.name for ly in layers]
    if len(set(names)) != len(names):
        raise ValueError("layer names must be unique")
    return ModelGraph(name, layers)


def _out_shape(ly: LayerSpec, shape, i):
    def bad(msg):
        return ValueError(f"layer {i} ({ly.kind}): {msg}, input shape {shape}")

    if ly.kind == "Conv2d":
        if len(shape) != 3 or shape[2] != ly.in_channels:
            raise bad(f"expects (H, W, {ly.in_channels})")
        if ly.kernel_size % 2 == 0:
            raise bad("kernel size must be odd")
        return (shape[0], shape[1], ly.out_channels)
    if ly.kind in ("BatchNorm", "LayerNorm"):
        if shape[-1] != ly.num_features:
            raise bad(f"expects {ly.num_features} channels")
        return shape
    if ly.kind == "AvgPool":
        if len(shape) != 3 or shape[0] % ly.size or shape[1] % ly.size:
            raise bad(f"pool size {ly.size} does not divide spatial dims")
        return (shape[0] // ly.size, shape[1] // ly.size, shape[2])
    if ly.kind == "Flatten":
        return (math.prod(shape),)
    if ly.kind == "Dense":
        if shape != (ly.in_features,):
            raise bad(f"expects ({ly.in_features},)")
        return (ly.out_features,)
    return shape


class ParamStore:
    """Ordered named arrays: trainable parameters plus normalization buffers."""

    def __init__(self, arrays: dict[str, np.ndarray], trainable, arch: dict | None = None,
                 meta: dict | None = None):
        self.arrays = dict(arrays)
        self.trainable = list(trainable)
        self.arch = arch
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def names(self):
        return list(self.arrays)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.arrays.items()}, self.trainable,
                          self.arch, self.meta)

    def replace(self, **updates) -> "ParamStore":
        """Shallow copy with some arrays swapped; untouched arrays are shared read-only."""
        arrays = dict(self.arrays)
        arrays.update(updates)
        return ParamStore(arrays, self.trainable, self.arch, self.meta)

    @property
    def n_trainable(self) -> int:
        return sum(self.arrays[n].size for n in self.trainable)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for n in self.trainable:
            size = self.arrays[n].size
            out[n] = slice(start, start + size)
            start += size
        return out

    def layer_slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        for n, sl in self.slices().items():
            layer = n.split(".")[0]
            out[layer] = slice(out[layer].start, sl.stop) if layer in out else sl
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.trainable])

    def with_flat(self, vec) -> "ParamStore":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_trainable:
            raise ValueError(f"flat vector length {vec.size} != {self.n_trainable}")
        upd = {n: vec[sl].reshape(self.arrays[n].shape).copy() for n, sl in self.slices().items()}
        return self.replace(**upd)

    def equal(self, other: "ParamStore") -> bool:
        return (self.names() == other.names()
                and all(self.arrays[k].tobytes() == other.arrays[k].tobytes() for k in self.arrays))


def init_params(graph: ModelGraph, seed: int = 0) -> ParamStore:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in graph.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = math.prod(shape[:-1])
            bound = math.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif kind in ("gamma", "running_var"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParamStore(arrays, graph.trainable_names(), graph.descriptor(), {"init_seed": seed})


def forward(graph: ModelGraph, params, x, training: bool = False, bn_stats: dict | None = None):
    """Logits for a batch ``x`` of shape (N, 16, 16, 1).

    ``params`` maps names to arrays or Tensors (Tensors when parameter gradients
    are wanted).  In training mode BatchNorm uses batch statistics and, if
    ``bn_stats`` is given, stores them there keyed by layer name.
    """
    h = x
    for ly in graph.layers:
        n = ly.name
        if ly.kind == "Conv2d":
            h = T.add(T.conv2d(h, params[f"{n}.weight"], padding=ly.kernel_size // 2),
                      params[f"{n}.bias"])
        elif ly.kind == "Dense":
            h = T.add(T.matmul(h, params[f"{n}.weight"]), params[f"{n}.bias"])
        elif ly.kind == "BatchNorm":
            if training and bn_stats is not None:
                arr = h.data if isinstance(h, T.Tensor) else np.asarray(h)
                axes = tuple(range(arr.ndim - 1))
                bn_stats[n] = (arr.mean(axis=axes), arr.var(axis=axes), arr.size // arr.shape[-1])
            h = T.batch_norm(h, params[f"{n}.gamma"], params[f"{n}.beta"],
                             _raw(params[f"{n}.running_mean"]), _raw(params[f"{n}.running_var"]),
                             training=training)
        elif ly.kind == "LayerNorm":
            h = T.layer_norm(h, params[f"{n}.gamma"], params[f"{n}.beta"])
        elif ly.kind == "ReLU":
            h = T.relu(h)
        elif ly.kind == "AvgPool":
            h = T.avg_pool(h, ly.size)
        elif ly.kind == "Flatten":
            h = T.flatten(h)
    return h


def _raw(v):
    return v.data if isinstance(v, T.Tensor) else v


def logits(graph: ModelGraph, params: ParamStore, x) -> np.ndarray:
    """Eval-mode logits; accepts one image (16, 16, 1) or a batch (N, 16, 16, 1)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == INPUT_SHAPE
    if single:
        x = x[None]
    if x.shape[1:] != INPUT_SHAPE:
        raise ValueError(f"expected input shape {INPUT_SHAPE}, got {x.shape[1:]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    out = forward(graph, params, x).data
    return out[0] if single else out


def predict(graph, params, x, batch_size: int = 512) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([logits(graph, params, x[i:i + batch_size]).argmax(axis=-1)
                           for i in range(0, len(x), batch_size)])


def accuracy(graph, params, dataset) -> float:
    return float(np.mean(predict(graph, params, dataset.images) == dataset.labels))


@dataclass
class TrainHyper:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 0.05
    seed: int = 0
    bn_momentum: float = 0.1


@dataclass
class TrainMetrics:
    train_accuracy: float
    test_accuracy: float | None
    losses: list[float] = field(default_factory=list)


def train(graph: ModelGraph, params: ParamStore, dataset, hyper: TrainHyper, test_set=None):
    """Plain minibatch SGD on mean cross-entropy; returns ``(params, metrics)``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels.min() < 0 or dataset.labels.max() >= graph.n_classes:
        raise ValueError("labels out of range")
    params = params.copy()
    trainable = params.trainable
    losses = []
    n = len(dataset)
    for epoch in range(hyper.epochs):
        order = np.random.default_rng([hyper.seed, epoch]).permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            tape = T.Tape()
            leaves = {k: (tape.leaf(v, name=k) if k in trainable else v)
                      for k, v in params.arrays.items()}
            stats: dict = {}
            z = forward(graph, leaves, xb, training=True, bn_stats=stats)
            loss = T.mul(T.sum(T.gather(T.log_softmax(z), yb)), -1.0 / len(idx))
            grads = T.backward(tape, loss)
            tape.release()
            for k in trainable:
                params.arrays[k] = params.arrays[k] - hyper.lr * grads[leaves[k].id]
            for ln, (mu, var, m) in stats.items():
                unbiased = var * m / max(m - 1, 1)
                mom = hyper.bn_momentum
                params.arrays[f"{ln}.running_mean"] = (1 - mom) * params[f"{ln}.running_mean"] + mom * mu
                params.arrays[f"{ln}.running_var"] = (1 - mom) * params[f"{ln}.running_var"] + mom * unbiased
            losses.append(loss.item())
    params.meta.update({"train_seed": hyper.seed, "epochs": hyper.epochs, "lr": hyper.lr,
                        "batch_size": hyper.batch_size})
    train_acc = accuracy(graph, params, dataset)
    test_acc = accuracy(graph, params, test_set) if test_set is not None else None
    params.meta["train_accuracy"] = train_acc
    if test_acc is not None:
        params.meta["test_accuracy"] = test_acc
    return params, TrainMetrics(train_acc, test_acc, losses)


def save_checkpoint(params: ParamStore, path) -> None:
    tensors = [(k, "f32", v) for k, v in params.arrays.items()]
    header = {"format": "rapa-checkpoint", "arch": params.arch, "trainable": params.trainable,
              "meta": params.meta}
    container.write(path, MAGIC, header, tensors)


def load_checkpoint(path) -> ParamStore:
    header, arrays = container.read(path, MAGIC)
    arrays = {k: v.astype(np.float64) for k, v in arrays.items()}
    missing = [n for n in header["trainable"] if n not in arrays]
    if missing:
        raise container.ContainerError(f"checkpoint missing tensors {missing}")
    if header.get("arch"):
        shapes = build_model(header["arch"]).param_shapes()
        for k, shp in shapes.items():
            if k not in arrays or arrays[k].shape != shp:
                raise container.ContainerError(f"tensor {k} does not match architecture")
    return ParamStore(arrays, header["trainable"], header.get("arch"), header.get("meta"))


def to_stored_precision(params: ParamStore) -> ParamStore:
    """Round every array through float32, i.e. what a checkpoint round-trip yields."""
    return ParamStore({k: v.astype(np.float32).astype(np.float64) for k, v in params.arrays.items()},
                      params.trainable, params.arch, params.meta)


def graph_of(params: ParamStore) -> ModelGraph:
    return build_model(params.arch)
