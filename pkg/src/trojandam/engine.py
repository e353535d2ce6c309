"""Small deterministic CNN engine: forward, backward and SGD on numpy arrays.

Activations are kept channels-last internally; images enter and leave the
public API as ``(batch, channels, height, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# role codes stored per flat coordinate
CONV_KERNEL = 0
BN_SCALE = 1
BN_BIAS = 2
LINEAR_WEIGHT = 3
LINEAR_BIAS = 4
ROLE_NAMES = {
    CONV_KERNEL: "conv-kernel",
    BN_SCALE: "bn-scale",
    BN_BIAS: "bn-bias",
    LINEAR_WEIGHT: "linear-weight",
    LINEAR_BIAS: "linear-bias",
}


class StructureMismatch(ValueError):
    """Two parameter containers do not share a layout."""


class NumericFailure(FloatingPointError):
    def __init__(self, layer: str, detail: str = "non-finite activation"):
        super().__init__(f"{detail} in layer {layer}")
        self.layer = layer


# ---------------------------------------------------------------------------
# network description


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


Layer = Union[Conv2d, BatchNorm, ReLU, GlobalAvgPool, Linear]


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple  # (channels, height, width)
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        c, h, w = self.input_shape
        spatial = True
        linears = [i for i, l in enumerate(self.layers) if isinstance(l, Linear)]
        if len(linears) != 1 or linears[0] != len(self.layers) - 1:
            raise ValueError("network must end with exactly one linear classifier layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if not spatial or layer.in_channels != c:
                    raise ValueError(f"layer {i}: conv expects {layer.in_channels} channels, got {c}")
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if not isinstance(nxt, BatchNorm) or nxt.channels != layer.out_channels:
                    raise ValueError(f"layer {i}: every conv must be followed by a matching batchnorm")
                k, s, p = layer.kernel_size, layer.stride, layer.padding
                h = (h + 2 * p - k) // s + 1
                w = (w + 2 * p - k) // s + 1
                if h < 1 or w < 1:
                    raise ValueError(f"layer {i}: spatial size collapsed")
                c = layer.out_channels
            elif isinstance(layer, BatchNorm):
                if layer.channels != c:
                    raise ValueError(f"layer {i}: batchnorm has {layer.channels} channels, input has {c}")
                if layer.eps <= 0 or not 0 <= layer.momentum <= 1:
                    raise ValueError(f"layer {i}: bad batchnorm eps/momentum")
            elif isinstance(layer, GlobalAvgPool):
                spatial = False
            elif isinstance(layer, Linear):
                if spatial or layer.in_features != c:
                    raise ValueError(f"layer {i}: linear expects {layer.in_features} features, got {c}")
                c = layer.out_features
            elif not isinstance(layer, ReLU):
                raise ValueError(f"layer {i}: unknown layer {layer!r}")

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_features

    def conv_bn_pairs(self):
        """Yield ``(conv_layer_index, bn_layer_index)`` for every conv."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                yield i, i + 1

    def to_dict(self) -> dict:
        out = []
        for layer in self.layers:
            d = {"type": type(layer).__name__}
            d.update(layer.__dict__)
            out.append(d)
        return {"input_shape": list(self.input_shape), "layers": out}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        kinds = {k.__name__: k for k in (Conv2d, BatchNorm, ReLU, GlobalAvgPool, Linear)}
        layers = []
        for item in d["layers"]:
            item = dict(item)
            layers.append(kinds[item.pop("type")](**item))
        return cls(tuple(d["input_shape"]), tuple(layers))


def small_cnn(in_channels: int = 3, n_classes: int = 10, image_size: int = 16,
              widths: Sequence[int] = (8, 16)) -> NetworkSpec:
    layers = []
    c = in_channels
    for width in widths:
        layers += [Conv2d(c, width, 3, 1, 1), BatchNorm(width), ReLU()]
        c = width
    layers += [GlobalAvgPool(), Linear(c, n_classes)]
    return NetworkSpec((in_channels, image_size, image_size), tuple(layers))


# ---------------------------------------------------------------------------
# flat parameter layout


@dataclass(frozen=True)
class Entry:
    name: str
    role: int
    layer: int
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamLayout:
    """Stable global flat indexing of the trainable parameters of a spec.

    ``kernel_of[i]`` is the kernel id owning coordinate ``i`` (conv filters and
    their batchnorm scale/bias share one id), or -1 for classifier coordinates.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        entries = []
        offset = 0
        kernels = []  # (conv layer, out channel)
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, Conv2d):
                shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
                entries.append(Entry(f"conv{i}.weight", CONV_KERNEL, i, shape, offset))
                offset += int(np.prod(shape))
                kernels += [(i, o) for o in range(layer.out_channels)]
            elif isinstance(layer, BatchNorm):
                for name, role in (("weight", BN_SCALE), ("bias", BN_BIAS)):
                    entries.append(Entry(f"bn{i}.{name}", role, i, (layer.channels,), offset))
                    offset += layer.channels
            elif isinstance(layer, Linear):
                entries.append(Entry(f"fc{i}.weight", LINEAR_WEIGHT, i,
                                     (layer.out_features, layer.in_features), offset))
                offset += layer.out_features * layer.in_features
                entries.append(Entry(f"fc{i}.bias", LINEAR_BIAS, i, (layer.out_features,), offset))
                offset += layer.out_features
        self.entries = tuple(entries)
        self.by_name = {e.name: e for e in entries}
        self.size = offset
        self.kernels = tuple(kernels)
        kernel_id = {k: j for j, k in enumerate(kernels)}

        role = np.empty(offset, dtype=np.int8)
        kernel_of = np.full(offset, -1, dtype=np.int64)
        for e in entries:
            sl = slice(e.offset, e.offset + e.size)
            role[sl] = e.role
            if e.role == CONV_KERNEL:
                per = e.size // e.shape[0]
                kernel_of[sl] = np.repeat([kernel_id[(e.layer, o)] for o in range(e.shape[0])], per)
            elif e.role in (BN_SCALE, BN_BIAS):
                conv_layer = e.layer - 1
                kernel_of[sl] = [kernel_id[(conv_layer, o)] for o in range(e.shape[0])]
        self.role = role
        self.kernel_of = kernel_of
        self.classifier = (role == LINEAR_WEIGHT) | (role == LINEAR_BIAS)
        self.n_feature = int((~self.classifier).sum())  # parameters excluding the classifier

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and other.spec == self.spec

    def __hash__(self):
        return hash(self.spec)

    def kernel_coords(self, kernel: int) -> np.ndarray:
        """Flat indices of one conv filter only (no batchnorm pair)."""
        return np.flatnonzero((self.kernel_of == kernel) & (self.role == CONV_KERNEL))


_LAYOUTS: dict = {}


def layout_for(spec: NetworkSpec) -> ParamLayout:
    if spec not in _LAYOUTS:
        _LAYOUTS[spec] = ParamLayout(spec)
    return _LAYOUTS[spec]


class ParameterSet:
    """Flat float32 vector over a :class:`ParamLayout`.

    Used for models, deltas, gradients and (as 0/1 data) masks alike.
    """

    __slots__ = ("layout", "data")

    def __init__(self, layout: ParamLayout, data: Optional[np.ndarray] = None):
        self.layout = layout
        if data is None:
            data = np.zeros(layout.size, dtype=DTYPE)
        data = np.asarray(data)
        if data.shape != (layout.size,):
            raise StructureMismatch(f"expected {layout.size} coordinates, got shape {data.shape}")
        self.data = data

    @classmethod
    def zeros(cls, spec_or_layout) -> "ParameterSet":
        layout = spec_or_layout if isinstance(spec_or_layout, ParamLayout) else layout_for(spec_or_layout)
        return cls(layout)

    def _check(self, other: "ParameterSet") -> None:
        if not isinstance(other, ParameterSet) or other.layout != self.layout:
            raise StructureMismatch("parameter sets built from different network specs")

    def __getitem__(self, name: str) -> np.ndarray:
        e = self.layout.by_name[name]
        return self.data[e.offset:e.offset + e.size].reshape(e.shape)

    def items(self):
        for e in self.layout.entries:
            yield e.name, ROLE_NAMES[e.role], self[e.name]

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.layout, self.data.copy())

    def __add__(self, other):
        self._check(other)
        return ParameterSet(self.layout, self.data + other.data)

    def __sub__(self, other):
        self._check(other)
        return ParameterSet(self.layout, self.data - other.data)

    def __mul__(self, s):
        return ParameterSet(self.layout, (self.data * s).astype(self.data.dtype, copy=False))

    __rmul__ = __mul__

    def __neg__(self):
        return ParameterSet(self.layout, -self.data)

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.data.astype(np.float64), self.data.astype(np.float64))))

    def equals(self, other: "ParameterSet") -> bool:
        self._check(other)
        return bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"ParameterSet(n={self.layout.size})"


def l2_distance(a: ParameterSet, b: ParameterSet) -> float:
    a._check(b)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.sqrt(np.dot(d, d)))


def sgd_step(params: ParameterSet, grad: ParameterSet, lr: float) -> ParameterSet:
    params._check(grad)
    return ParameterSet(params.layout, (params.data - DTYPE(lr) * grad.data).astype(params.data.dtype))


# ---------------------------------------------------------------------------
# batchnorm running statistics


def _bn_layers(spec: NetworkSpec):
    return [i for i, l in enumerate(spec.layers) if isinstance(l, BatchNorm)]


@dataclass
class BNSnapshot:
    layers: tuple
    means: list
    variances: list

    def copy(self) -> "BNSnapshot":
        return BNSnapshot(self.layers, [m.copy() for m in self.means], [v.copy() for v in self.variances])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([m, v]) for m, v in zip(self.means, self.variances)])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for j, m in enumerate(self.means):
            n = m.size
            self.means[j] = flat[pos:pos + n].astype(m.dtype)
            self.variances[j] = flat[pos + n:pos + 2 * n].astype(self.variances[j].dtype)
            pos += 2 * n

    def equals(self, other: "BNSnapshot") -> bool:
        return (self.layers == other.layers
                and all(np.array_equal(a, b) for a, b in zip(self.means, other.means))
                and all(np.array_equal(a, b) for a, b in zip(self.variances, other.variances)))


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    spec: NetworkSpec
    params: ParameterSet
    bn: BNSnapshot
    input_mean: np.ndarray = field(default=None)
    input_std: np.ndarray = field(default=None)

    def __post_init__(self):
        c = self.spec.input_shape[0]
        if self.input_mean is None:
            self.input_mean = np.zeros(c, dtype=DTYPE)
        if self.input_std is None:
            self.input_std = np.ones(c, dtype=DTYPE)

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    def copy(self) -> "Model":
        return Model(self.spec, self.params.copy(), self.bn.copy(),
                     self.input_mean.copy(), self.input_std.copy())

    def with_params(self, params: ParameterSet) -> "Model":
        return Model(self.spec, params, self.bn.copy(), self.input_mean, self.input_std)


def init_model(spec: NetworkSpec, rng: np.random.Generator, input_mean=None, input_std=None,
               dtype=DTYPE) -> Model:
    """Kaiming-uniform (fan-in) conv/linear weights, unit BN scale, zero biases."""
    layout = layout_for(spec)
    data = np.zeros(layout.size, dtype=dtype)
    params = ParameterSet(layout, data)
    for e in layout.entries:
        view = params[e.name]
        if e.role == CONV_KERNEL or e.role == LINEAR_WEIGHT:
            fan_in = int(np.prod(e.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            view[...] = rng.uniform(-bound, bound, size=e.shape)
        elif e.role == LINEAR_BIAS:
            fan_in = spec.layers[e.layer].in_features
            bound = 1.0 / np.sqrt(fan_in)
            view[...] = rng.uniform(-bound, bound, size=e.shape)
        elif e.role == BN_SCALE:
            view[...] = 1.0
    layers = tuple(_bn_layers(spec))
    bn = BNSnapshot(layers,
                    [np.zeros(spec.layers[i].channels, dtype=dtype) for i in layers],
                    [np.ones(spec.layers[i].channels, dtype=dtype) for i in layers])
    return Model(spec, params, bn,
                 None if input_mean is None else np.asarray(input_mean, dtype=dtype),
                 None if input_std is None else np.asarray(input_std, dtype=dtype))


def bn_snapshot(model: Model) -> BNSnapshot:
    return model.bn.copy()


def bn_restore(model: Model, snap: BNSnapshot) -> None:
    if snap.layers != model.bn.layers or any(
            a.shape != b.shape for a, b in zip(snap.means, model.bn.means)):
        raise StructureMismatch("batchnorm snapshot does not match the model's layers")
    model.bn = snap.copy()


# ---------------------------------------------------------------------------
# forward / backward


_LAYER_PREFIX = {Conv2d: "conv", BatchNorm: "bn", ReLU: "relu", GlobalAvgPool: "pool", Linear: "fc"}


def layer_name(layer, index: int) -> str:
    """Name used in parameter entries and error reports, e.g. ``conv0``."""
    return f"{_LAYER_PREFIX[type(layer)]}{index}"


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericFailure(name)


def _prepare_input(model: Model, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or tuple(images.shape[1:]) != model.spec.input_shape:
        raise ValueError(f"input shape {images.shape[1:]} does not match network input {model.spec.input_shape}")
    dt = model.params.data.dtype
    x = images.astype(dt, copy=False).transpose(0, 2, 3, 1)
    return (x - model.input_mean.astype(dt)) / model.input_std.astype(dt)


def forward(model: Model, images: np.ndarray, train: bool = False, update_stats: bool = True,
            keep_cache: bool = False):
    """Return logits of shape (batch, n_classes), plus a backward cache if ``keep_cache``.

    In train mode batchnorm normalises with batch statistics and, when
    ``update_stats`` is set, moves the model's running statistics in place.
    """
    x = _prepare_input(model, images)
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(model, x, train, update_stats, keep_cache)


def _forward(model, x, train, update_stats, keep_cache):
    params = model.params
    cache = []
    bn_pos = 0
    for i, layer in enumerate(model.spec.layers):
        if isinstance(layer, Conv2d):
            w = params[f"conv{i}.weight"]
            k, s, p = layer.kernel_size, layer.stride, layer.padding
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
            win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
            b, ho, wo = win.shape[:3]
            cols = win.reshape(b * ho * wo, -1)
            out = (cols @ w.reshape(w.shape[0], -1).T).reshape(b, ho, wo, -1)
            if keep_cache:
                cache.append((cols, xp.shape))
            x = out
        elif isinstance(layer, BatchNorm):
            gamma = params[f"bn{i}.weight"]
            beta = params[f"bn{i}.bias"]
            if train:
                n = x.shape[0] * x.shape[1] * x.shape[2]
                mean = x.mean(axis=(0, 1, 2))
                centered = x - mean
                var = (centered * centered).mean(axis=(0, 1, 2))
                if update_stats:
                    m = layer.momentum
                    unbiased = var * (n / max(n - 1, 1))
                    dt = model.bn.means[bn_pos].dtype
                    model.bn.means[bn_pos] = ((1 - m) * model.bn.means[bn_pos] + m * mean).astype(dt)
                    model.bn.variances[bn_pos] = ((1 - m) * model.bn.variances[bn_pos] + m * unbiased).astype(dt)
            else:
                mean = model.bn.means[bn_pos]
                var = model.bn.variances[bn_pos]
                centered = x - mean
            invstd = 1.0 / np.sqrt(var + layer.eps)
            xhat = centered * invstd.astype(x.dtype)
            if keep_cache:
                cache.append((xhat, invstd))
            x = xhat * gamma + beta
            bn_pos += 1
        elif isinstance(layer, ReLU):
            if keep_cache:
                cache.append(x > 0)
            x = np.maximum(x, 0)
        elif isinstance(layer, GlobalAvgPool):
            if keep_cache:
                cache.append(x.shape)
            x = x.mean(axis=(1, 2))
        elif isinstance(layer, Linear):
            w = params[f"fc{i}.weight"]
            if keep_cache:
                cache.append(x)
            x = x @ w.T + params[f"fc{i}.bias"]
        _check_finite(x, layer_name(layer, i))
    if keep_cache:
        return x, cache
    return x


def backward(model: Model, cache: list, dlogits: np.ndarray, train: bool = True) -> ParameterSet:
    params = model.params
    grad = ParameterSet(params.layout, np.zeros_like(params.data))
    dx = dlogits
    for i in range(len(model.spec.layers) - 1, -1, -1):
        layer = model.spec.layers[i]
        c = cache[i]
        if isinstance(layer, Linear):
            w = params[f"fc{i}.weight"]
            grad[f"fc{i}.weight"][...] = dx.T @ c
            grad[f"fc{i}.bias"][...] = dx.sum(axis=0)
            dx = dx @ w
        elif isinstance(layer, GlobalAvgPool):
            b, h, w_, ch = c
            dx = np.broadcast_to((dx / (h * w_))[:, None, None, :], c)
        elif isinstance(layer, ReLU):
            dx = dx * c
        elif isinstance(layer, BatchNorm):
            xhat, invstd = c
            gamma = params[f"bn{i}.weight"]
            grad[f"bn{i}.weight"][...] = (dx * xhat).sum(axis=(0, 1, 2))
            grad[f"bn{i}.bias"][...] = dx.sum(axis=(0, 1, 2))
            dxhat = dx * gamma
            if train:
                n = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
                s1 = dxhat.sum(axis=(0, 1, 2))
                s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
                dx = (dxhat - (s1 + xhat * s2) / n) * invstd.astype(dxhat.dtype)
            else:
                dx = dxhat * invstd.astype(dxhat.dtype)
        elif isinstance(layer, Conv2d):
            cols, xp_shape = c
            w = params[f"conv{i}.weight"]
            k, s, p = layer.kernel_size, layer.stride, layer.padding
            b, ho, wo, o = dx.shape
            dmat = dx.reshape(-1, o)
            grad[f"conv{i}.weight"][...] = (dmat.T @ cols).reshape(w.shape)
            if i == 0:
                break  # input gradient not needed
            dcols = (dmat @ w.reshape(o, -1)).reshape(b, ho, wo, layer.in_channels, k, k)
            dxp = np.zeros(xp_shape, dtype=dx.dtype)
            for a in range(k):
                for bb in range(k):
                    dxp[:, a:a + s * ho:s, bb:bb + s * wo:s, :] += dcols[..., a, bb]
            dx = dxp[:, p:xp_shape[1] - p, p:xp_shape[2] - p, :] if p else dxp
    return grad


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy (accumulated in float64) and its logit gradient."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    probs[np.arange(n), labels] -= 1.0
    return float(loss), (probs / n).astype(logits.dtype)


def compute_gradient(model: Model, images: np.ndarray, labels: np.ndarray, prox_lambda: float = 0.0,
                     anchor: Optional[ParameterSet] = None, squared_prox: bool = False,
                     train: bool = True, update_stats: bool = True):
    """Return ``(loss, gradient)`` for cross-entropy plus an optional proximal term.

    The proximal term is ``prox_lambda * ||w - anchor||`` (un-squared by default)
    whose subgradient at ``w == anchor`` is taken as zero.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if prox_lambda < 0:
        raise ValueError("proximal weight must be non-negative")
    if (prox_lambda > 0) != (anchor is not None):
        raise ValueError("an anchor model is required exactly when prox_lambda > 0")
    if labels.min() < 0 or labels.max() >= model.spec.n_classes:
        raise ValueError("labels outside the model's label space")
    logits, cache = forward(model, images, train=train, update_stats=update_stats, keep_cache=True)
    loss, dlogits = cross_entropy(logits, labels)
    grad = backward(model, cache, dlogits, train=train)
    if prox_lambda > 0:
        model.params._check(anchor)
        diff = model.params.data.astype(np.float64) - anchor.data.astype(np.float64)
        dist = float(np.sqrt(np.dot(diff, diff)))
        if squared_prox:
            loss += prox_lambda * dist * dist
            grad.data += (2 * prox_lambda * diff).astype(grad.data.dtype)
        else:
            loss += prox_lambda * dist
            if dist > 0:
                grad.data += (prox_lambda * diff / dist).astype(grad.data.dtype)
    return loss, grad


def loss_value(model: Model, images: np.ndarray, labels: np.ndarray, train: bool = True) -> float:
    logits = forward(model, images, train=train, update_stats=False)
    return cross_entropy(logits, np.asarray(labels))[0]


def predict(model: Model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode argmax labels; ``np.argmax`` resolves ties to the lowest index."""
    out = [np.argmax(forward(model, images[i:i + batch_size]), axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_sgd(model: Model, images: np.ndarray, labels: np.ndarray, lr: float, epochs: int,
              batch_size: int, rng: np.random.Generator, weight_decay: float = 0.0,
              grad_transform: Optional[Callable[[ParameterSet], ParameterSet]] = None,
              epoch_end: Optional[Callable[[Model], None]] = None) -> list:
    """Mini-batch SGD in place on ``model``; returns the per-step losses.

    Batches of size 1 are skipped in train mode since batchnorm needs a spread.
    """
    n = len(labels)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2 and n >= 2:
                continue
            loss, grad = compute_gradient(model, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise NumericFailure("loss", "non-finite loss")
            if weight_decay:
                grad.data += DTYPE(weight_decay) * model.params.data
            if grad_transform is not None:
                grad = grad_transform(grad)
            model.params = sgd_step(model.params, grad, lr)
            losses.append(loss)
        if epoch_end is not None:
            epoch_end(model)
    return losses
