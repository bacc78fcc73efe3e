"""Feed-forward networks with hand-written backward passes.

Only the layer kinds the attack needs are supported: fully connected, 2-D
convolution, batch normalization, ReLU and flatten. Every model ends in a
fully connected classification layer (the FCL); its input is the embedding
and its output the logits.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

TRAIN = "train"
EVAL = "eval"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind = "fully_connected"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        bound = 1.0 / np.sqrt(self.in_features)
        return {name: rng.uniform(-bound, bound, size=shape) for name, shape in self.param_shapes().items()}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"expects input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, params, x, train):
        return x @ params["weight"].T + params["bias"], x

    def backward(self, params, cache, dout, need_dx):
        x = cache
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        dx = dout @ params["weight"] if need_dx else None
        return dx, grads


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    kind = "conv2d"

    def param_shapes(self):
        k = self.kernel
        return {"weight": (self.out_channels, self.in_channels, k, k), "bias": (self.out_channels,)}

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.in_channels * self.kernel * self.kernel)
        return {name: rng.uniform(-bound, bound, size=shape) for name, shape in self.param_shapes().items()}

    def _out_hw(self, h, w):
        return (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"expects input ({self.in_channels}, H, W), got {tuple(in_shape)}")
        oh, ow = self._out_hw(in_shape[1], in_shape[2])
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {self.kernel} larger than input {tuple(in_shape)}")
        return (self.out_channels, oh, ow)

    def _columns(self, x):
        k, s = self.kernel, self.stride
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        b, c, oh, ow = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)
        return cols, (b, oh, ow)

    def forward(self, params, x, train):
        cols, (b, oh, ow) = self._columns(x)
        w = params["weight"].reshape(self.out_channels, -1)
        out = (cols @ w.T + params["bias"]).reshape(b, oh, ow, self.out_channels)
        return out.transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, params, cache, dout, need_dx):
        cols, x_shape = cache
        k, s = self.kernel, self.stride
        b, o, oh, ow = dout.shape
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
        grads = {
            "weight": (d2.T @ cols).reshape(params["weight"].shape),
            "bias": d2.sum(axis=0),
        }
        if not need_dx:
            return None, grads
        dcols = (d2 @ params["weight"].reshape(o, -1)).reshape(b, oh, ow, self.in_channels, k, k)
        dx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, grads


@dataclass(frozen=True)
class BatchNorm:
    features: int
    epsilon: float = 1e-5
    kind = "batch_norm"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("batch_norm epsilon must be positive")

    def param_shapes(self):
        return {"gamma": (self.features,), "beta": (self.features,)}

    def init_params(self, rng):
        return {"gamma": np.ones(self.features), "beta": np.zeros(self.features)}

    def init_state(self):
        return {"running_mean": np.zeros(self.features), "running_var": np.ones(self.features)}

    def output_shape(self, in_shape):
        if in_shape[0] != self.features:
            raise ShapeError(f"expects {self.features} features/channels, got {tuple(in_shape)}")
        return tuple(in_shape)

    def forward(self, params, x, train, state=None):
        if train:
            out, cache = _bn_train(x, params["gamma"], params["beta"], self.epsilon)
            return out, cache
        shape = _bn_param_shape(x)
        mean = state["running_mean"].reshape(shape)
        var = state["running_var"].reshape(shape)
        xhat = (x - mean) / np.sqrt(var + self.epsilon)
        return params["gamma"].reshape(shape) * xhat + params["beta"].reshape(shape), None

    def backward(self, params, cache, dout, need_dx):
        xhat, inv_std, axes, _, _ = cache
        shape = _bn_param_shape(dout)
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        if not need_dx:
            return None, grads
        count = dout.size // dout.shape[1]
        dxhat = dout * params["gamma"].reshape(shape)
        dx = (inv_std / count) * (
            count * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, grads


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, params, x, train):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, params, cache, dout, need_dx):
        return np.where(cache, dout, 0.0), {}


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout, need_dx):
        return dout.reshape(cache), {}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, BatchNorm, ReLU, Flatten)}


def _bn_param_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _bn_train(x, gamma, beta, epsilon):
    axes = (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))
    shape = _bn_param_shape(x)
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv_std
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, axes, mean.reshape(-1), var.reshape(-1))


def batchnorm_forward(x, gamma, beta, epsilon: float = 1e-5) -> np.ndarray:
    """Normalize each feature with its batch mean and biased batch variance, then scale and shift.

    ``x`` is ``(B, features)`` or ``(B, channels, H, W)``; statistics for the
    4-D case are taken over the batch and both spatial axes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[0] == 0:
        raise ValueError("batch norm needs a non-empty batch")
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"gamma/beta must have {x.shape[1]} entries")
    return _bn_train(x, gamma, beta, epsilon)[0]


# --------------------------------------------------------------------------
# models and gradients


def _freeze_dicts(dicts) -> tuple[dict[str, np.ndarray], ...]:
    return tuple({k: _frozen(v) for k, v in d.items()} for d in dicts)


@dataclass(frozen=True)
class Model:
    """An ordered layer list with its parameters.

    Parameter arrays are read-only; use :meth:`replace_params` or
    :meth:`apply_gradients` to get a modified copy.
    """

    layers: tuple
    params: tuple
    input_shape: tuple[int, ...]
    state: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "params", _freeze_dicts(self.params))
        if not self.state:
            state = [layer.init_state() if isinstance(layer, BatchNorm) else {} for layer in self.layers]
        else:
            state = self.state
        object.__setattr__(self, "state", _freeze_dicts(state))
        if len(self.params) != len(self.layers):
            raise ShapeError("one parameter dict per layer required")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            for name, pshape in layer.param_shapes().items():
                if self.params[i][name].shape != pshape:
                    raise ShapeError(f"layer {i} ({layer.kind}) {name}: expected {pshape}, got {self.params[i][name].shape}")
        if not isinstance(self.layers[-1], Dense):
            raise ShapeError("last layer must be fully connected")

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_features

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].in_features

    @property
    def fcl_index(self) -> int:
        return len(self.layers) - 1

    @property
    def n_params(self) -> int:
        return sum(v.size for d in self.params for v in d.values())

    def layout(self):
        return tuple(tuple((name, d[name].shape) for name in d) for d in self.params)

    def flat_params(self) -> np.ndarray:
        return flatten_dicts(self.params)

    def replace_params(self, index: int, **arrays) -> "Model":
        params = [dict(d) for d in self.params]
        for name, value in arrays.items():
            if name not in params[index]:
                raise KeyError(f"layer {index} has no parameter {name!r}")
            params[index][name] = np.broadcast_to(np.asarray(value, dtype=np.float64), params[index][name].shape)
        return Model(self.layers, params, self.input_shape, self.state)

    def apply_gradients(self, grads: "GradientSet", scale: float) -> "Model":
        """Return a copy with ``param - scale * grad`` applied elementwise."""
        if grads.layout() != self.layout():
            raise ShapeError("gradient set does not mirror the model")
        params = [{k: p[k] - scale * g[k] for k in p} for p, g in zip(self.params, grads.grads)]
        return Model(self.layers, params, self.input_shape, self.state)


def flatten_dicts(dicts) -> np.ndarray:
    parts = [np.ravel(v) for d in dicts for v in d.values()]
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True)
class GradientSet:
    """Per-parameter gradients laid out exactly like a model's ``params``."""

    grads: tuple

    def __post_init__(self):
        object.__setattr__(self, "grads", _freeze_dicts(self.grads))

    @property
    def fcl_weight(self) -> np.ndarray:
        return self.grads[-1]["weight"]

    @property
    def fcl_bias(self) -> np.ndarray:
        return self.grads[-1]["bias"]

    @property
    def size(self) -> int:
        return sum(v.size for d in self.grads for v in d.values())

    def layout(self):
        return tuple(tuple((name, d[name].shape) for name in d) for d in self.grads)

    def flatten(self) -> np.ndarray:
        return flatten_dicts(self.grads)

    @classmethod
    def from_flat(cls, layout, flat) -> "GradientSet":
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        need = sum(int(np.prod(shape)) for entries in layout for _, shape in entries)
        if flat.size != need:
            raise ShapeError(f"flat vector has {flat.size} entries, layout needs {need}")
        out, pos = [], 0
        for entries in layout:
            d = {}
            for name, shape in entries:
                n = int(np.prod(shape))
                d[name] = flat[pos : pos + n].reshape(shape)
                pos += n
            out.append(d)
        if pos != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, layout needs {pos}")
        return cls(tuple(out))

    @classmethod
    def zeros(cls, layout) -> "GradientSet":
        return cls(tuple({name: np.zeros(shape) for name, shape in entries} for entries in layout))

    def map(self, fn) -> "GradientSet":
        return GradientSet.from_flat(self.layout(), fn(self.flatten()))

    def _check(self, other):
        if self.layout() != other.layout():
            raise ShapeError("gradient sets have different layouts")

    def __add__(self, other: "GradientSet") -> "GradientSet":
        self._check(other)
        return GradientSet(tuple({k: a[k] + b[k] for k in a} for a, b in zip(self.grads, other.grads)))

    def __sub__(self, other: "GradientSet") -> "GradientSet":
        self._check(other)
        return GradientSet(tuple({k: a[k] - b[k] for k in a} for a, b in zip(self.grads, other.grads)))

    def __mul__(self, scalar: float) -> "GradientSet":
        return GradientSet(tuple({k: v * scalar for k, v in d.items()} for d in self.grads))

    __rmul__ = __mul__


def sum_gradients(sets: Sequence[GradientSet]) -> GradientSet:
    if not sets:
        raise ValueError("nothing to sum")
    total = sets[0]
    for g in sets[1:]:
        total = total + g
    return total


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    layers: tuple
    mode: str
    inputs: list
    outputs: list
    caches: list
    bn_stats: dict = field(default_factory=dict)

    @property
    def embedding(self) -> np.ndarray:
        return self.inputs[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def forward(model: Model, batch_inputs, mode: str = TRAIN, start: int = 0) -> ForwardTrace:
    """Run ``batch_inputs`` through the model and record every intermediate.

    ``start`` feeds the batch in as the input of layer ``start`` instead of
    layer 0, which lets callers evaluate the tail of a network on a chosen
    activation.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(batch_inputs, dtype=np.float64)
    if start == 0 and x.shape[1:] != model.input_shape:
        raise ShapeError(f"layer 0 ({model.layers[0].kind}): expected per-sample shape {model.input_shape}, got {x.shape[1:]}")
    if x.shape[0] < 1:
        raise ShapeError("empty batch")
    train = mode == TRAIN
    trace = ForwardTrace(model.layers, mode, [], [], [])
    for i in range(start, len(model.layers)):
        layer = model.layers[i]
        try:
            if isinstance(layer, BatchNorm):
                out, cache = layer.forward(model.params[i], x, train, model.state[i])
                if train:
                    trace.bn_stats[i] = (cache[3], cache[4])
            else:
                out, cache = layer.forward(model.params[i], x, train)
        except ValueError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        trace.inputs.append(x)
        trace.outputs.append(out)
        trace.caches.append(cache)
        x = out
    if start:
        trace.inputs[:0] = [None] * start
        trace.outputs[:0] = [None] * start
        trace.caches[:0] = [None] * start
    return trace


def softmax(logits) -> np.ndarray:
    y = np.asarray(logits, dtype=np.float64)
    z = y - y.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy loss and the per-sample gradient w.r.t. the logits.

    The returned gradient is *not* divided by the batch size: row ``k`` is
    ``softmax(y_k) - onehot(c_k)``.
    """
    y = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, n = y.shape
    if labels.shape[0] != b:
        raise ShapeError(f"{labels.shape[0]} labels for {b} logit rows")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    z = y - y.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(b), labels]))
    grad = softmax(y)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad


def backward(model: Model, trace: ForwardTrace, labels) -> GradientSet:
    """Batch-averaged gradient of the mean cross-entropy loss for every parameter."""
    if trace.layers != model.layers or trace.mode != TRAIN or trace.inputs[0] is None:
        raise ContractError("trace was not produced by a full train-mode forward pass of this model")
    _, dy = softmax_xent(trace.logits, labels)
    dout = dy / trace.batch_size
    grads: list[dict] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dout, grads[i] = layer.backward(model.params[i], trace.caches[i], dout, need_dx=i > 0)
    return GradientSet(tuple(grads))


def loss_and_gradients(model: Model, inputs, labels) -> tuple[float, GradientSet]:
    trace = forward(model, inputs, TRAIN)
    loss, _ = softmax_xent(trace.logits, labels)
    return loss, backward(model, trace, labels)


def update_running_stats(model: Model, trace: ForwardTrace, momentum: float = 0.1) -> Model:
    state = [dict(s) for s in model.state]
    for i, (mean, var) in trace.bn_stats.items():
        state[i] = {
            "running_mean": (1 - momentum) * state[i]["running_mean"] + momentum * mean,
            "running_var": (1 - momentum) * state[i]["running_var"] + momentum * var,
        }
    return Model(model.layers, model.params, model.input_shape, tuple(state))


# --------------------------------------------------------------------------
# builders


def build_model(layers: Sequence, input_shape, rng: np.random.Generator) -> Model:
    params = [layer.init_params(rng) for layer in layers]
    return Model(tuple(layers), params, tuple(input_shape))


def fcn3(in_features: int, n_classes: int, hidden=(256, 128), rng=None) -> Model:
    """Three fully connected layers with ReLU between them."""
    rng = np.random.default_rng(rng)
    h1, h2 = hidden
    layers = [Dense(in_features, h1), ReLU(), Dense(h1, h2), ReLU(), Dense(h2, n_classes)]
    return build_model(layers, (in_features,), rng)


def cnn_bn(input_shape=(1, 8, 8), n_classes: int = 10, channels: int = 4, kernel: int = 3,
           stride: int = 1, hidden: int = 64, rng=None) -> Model:
    """conv2d -> batch_norm -> relu -> flatten -> fully_connected -> relu -> FCL."""
    rng = np.random.default_rng(rng)
    conv = Conv2d(input_shape[0], channels, kernel, stride)
    flat = int(np.prod(conv.output_shape(tuple(input_shape))))
    layers = [conv, BatchNorm(channels), ReLU(), Flatten(), Dense(flat, hidden), ReLU(), Dense(hidden, n_classes)]
    return build_model(layers, input_shape, rng)


# --------------------------------------------------------------------------
# serialization


def _layer_to_dict(layer) -> dict[str, Any]:
    return {"kind": layer.kind, **asdict(layer)}


def _layer_from_dict(d: dict[str, Any]):
    d = dict(d)
    return LAYER_KINDS[d.pop("kind")](**d)


def save_model(model: Model, path) -> None:
    """Write the model to an ``.npz`` archive; float64 arrays round-trip bit-exactly."""
    meta = {"input_shape": list(model.input_shape), "layers": [_layer_to_dict(l) for l in model.layers]}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, (p, s) in enumerate(zip(model.params, model.state)):
        arrays.update({f"param/{i}/{k}": v for k, v in p.items()})
        arrays.update({f"state/{i}/{k}": v for k, v in s.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        layers = [_layer_from_dict(d) for d in meta["layers"]]
        params = [{} for _ in layers]
        state = [{} for _ in layers]
        for key in data.files:
            if key == "__meta__":
                continue
            group, i, name = key.split("/")
            (params if group == "param" else state)[int(i)][name] = data[key]
    for i, layer in enumerate(layers):
        params[i] = {name: params[i][name] for name in layer.param_shapes()}
    return Model(tuple(layers), params, tuple(meta["input_shape"]), tuple(state))
