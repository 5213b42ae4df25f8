"""Layer kinds used by the victim and generator networks.

All tensors are float64 numpy arrays with a leading batch axis and channels-last
(NHWC) layout for images. Each layer owns its parameters and knows how to run a
forward pass (returning a cache) and a backward pass from that cache.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = (
    "Dense",
    "Conv2D",
    "MaxPool2D",
    "Flatten",
    "Reshape",
    "Dropout",
    "Upsample2D",
    "ConvTranspose2D",
    "BatchNorm",
)
ACTIVATIONS = (None, "relu", "sigmoid", "tanh", "softmax")
PADDINGS = ("valid", "same")


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    filters: int | None = None
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] = (1, 1)
    padding: str = "valid"
    pool: tuple[int, int] | None = None
    rate: float = 0.0
    target_shape: tuple[int, ...] | None = None
    factor: tuple[int, int] | None = None
    activation: str | None = None
    momentum: float = 0.99
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"unknown padding {self.padding!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def to_dict(self) -> dict:
        default = LayerSpec(self.kind)
        out = {"kind": self.kind}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name != "kind" and value != getattr(default, f.name):
                out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def __str__(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def dense(units, activation=None):
    return LayerSpec("Dense", units=units, activation=activation)


def conv2d(filters, kernel, stride=1, padding="valid", activation=None):
    return LayerSpec(
        "Conv2D", filters=filters, kernel=_pair(kernel), stride=_pair(stride),
        padding=padding, activation=activation,
    )


def conv_transpose2d(filters, kernel, stride=1, padding="valid", activation=None):
    return LayerSpec(
        "ConvTranspose2D", filters=filters, kernel=_pair(kernel), stride=_pair(stride),
        padding=padding, activation=activation,
    )


def max_pool2d(pool=2):
    return LayerSpec("MaxPool2D", pool=_pair(pool))


def flatten():
    return LayerSpec("Flatten")


def reshape(*target_shape):
    return LayerSpec("Reshape", target_shape=tuple(target_shape))


def dropout(rate):
    return LayerSpec("Dropout", rate=rate)


def upsample2d(factor=2):
    return LayerSpec("Upsample2D", factor=_pair(factor))


def batch_norm(momentum=0.99, epsilon=1e-5):
    return LayerSpec("BatchNorm", momentum=momentum, epsilon=epsilon)


# -- activations ------------------------------------------------------------


def activate(z, kind):
    if kind is None:
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        # tanh form avoids overflow in exp for large |z|
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(kind)


def activation_backward(dout, z, a, kind):
    if kind is None:
        return dout
    if kind == "relu":
        return dout * (z > 0)
    if kind == "sigmoid":
        return dout * a * (1.0 - a)
    if kind == "tanh":
        return dout * (1.0 - a * a)
    if kind == "softmax":
        return a * (dout - (dout * a).sum(axis=-1, keepdims=True))
    raise ValueError(kind)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def same_padding(size, k, s):
    """Return (out, pad_before, pad_after); the odd extra pixel goes after."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


# -- layers -----------------------------------------------------------------


class Layer:
    """Base layer: a linear (or structural) map followed by an optional activation."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.input_shape: tuple[int, ...] | None = None
        self.output_shape: tuple[int, ...] | None = None

    @property
    def kind(self):
        return self.spec.kind

    def build(self, input_shape, rng) -> tuple[int, ...]:
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(self._build(self.input_shape, rng))
        return self.output_shape

    def _build(self, input_shape, rng):
        return input_shape

    def forward(self, x, training=False, rng=None):
        z, cache = self._forward(x, training, rng)
        a = activate(z, self.spec.activation)
        return a, (cache, z, a)

    def backward(self, dout, cache, need_dx=True):
        """Returns ``(dx, grads)``; ``dx`` is None when ``need_dx`` is off and the layer can skip it."""
        inner, z, a = cache
        dz = activation_backward(dout, z, a, self.spec.activation)
        return self.backward_preactivation(dz, cache, need_dx)

    def backward_preactivation(self, dz, cache, need_dx=True):
        """Backward pass starting from the gradient w.r.t. the pre-activation."""
        return self._backward(dz, cache[0], need_dx)

    def _forward(self, x, training, rng):
        raise NotImplementedError

    def _backward(self, dz, cache, need_dx=True):
        raise NotImplementedError


class Dense(Layer):
    """Fully connected layer; inputs of any rank are flattened per sample."""

    def _build(self, input_shape, rng):
        fan_in = int(np.prod(input_shape))
        units = self.spec.units
        self.params["W"] = glorot_uniform(rng, (fan_in, units), fan_in, units)
        self.params["b"] = np.zeros(units)
        return (units,)

    def _forward(self, x, training, rng):
        x2 = x.reshape(len(x), -1)
        return x2 @ self.params["W"] + self.params["b"], (x2, x.shape)

    def _backward(self, dz, cache, need_dx=True):
        x2, shape = cache
        grads = {"W": x2.T @ dz, "b": dz.sum(axis=0)}
        if not need_dx:
            return None, grads
        return (dz @ self.params["W"].T).reshape(shape), grads


class Conv2D(Layer):
    # kernel layout (kh, kw, in_channels, filters)

    def _build(self, input_shape, rng):
        if len(input_shape) != 3:
            raise ShapeError(f"Conv2D expects H x W x C input, got {input_shape}")
        h, w, c = input_shape
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        f = self.spec.filters
        if self.spec.padding == "same":
            ho, pt, pb = same_padding(h, kh, sh)
            wo, pl, pr = same_padding(w, kw, sw)
        else:
            if h < kh or w < kw:
                raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
            ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
            pt = pb = pl = pr = 0
        self._pads = ((pt, pb), (pl, pr))
        self._out_hw = (ho, wo)
        self.params["W"] = glorot_uniform(rng, (kh, kw, c, f), kh * kw * c, kh * kw * f)
        self.params["b"] = np.zeros(f)
        return (ho, wo, f)

    def _forward(self, x, training, rng):
        (pt, pb), (pl, pr) = self._pads
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        ho, wo = self._out_hw
        n, c = len(x), x.shape[-1]
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
        wm = self.params["W"].reshape(kh * kw * c, -1)
        z = (cols @ wm).reshape(n, ho, wo, -1) + self.params["b"]
        return z, (cols, xp.shape)

    def _backward(self, dz, cache, need_dx=True):
        cols, xp_shape = cache
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        (pt, _), (pl, _) = self._pads
        ho, wo = self._out_hw
        n, c = xp_shape[0], xp_shape[-1]
        f = dz.shape[-1]
        dz2 = dz.reshape(-1, f)
        wm = self.params["W"].reshape(kh * kw * c, f)
        grads = {"W": (cols.T @ dz2).reshape(self.params["W"].shape), "b": dz2.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (dz2 @ wm.T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += dcols[:, :, :, i, j]
        h, w = self.input_shape[:2]
        return dxp[:, pt : pt + h, pl : pl + w], grads


class ConvTranspose2D(Layer):
    # kernel layout (kh, kw, in_channels, filters)

    def _build(self, input_shape, rng):
        if len(input_shape) != 3:
            raise ShapeError(f"ConvTranspose2D expects H x W x C input, got {input_shape}")
        h, w, c = input_shape
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        f = self.spec.filters
        full_h, full_w = (h - 1) * sh + kh, (w - 1) * sw + kw
        if self.spec.padding == "same":
            ho, wo = h * sh, w * sw
            self._crop = (max(kh - sh, 0) // 2, max(kw - sw, 0) // 2)
        else:
            ho, wo = full_h, full_w
            self._crop = (0, 0)
        self._full = (max(full_h, self._crop[0] + ho), max(full_w, self._crop[1] + wo))
        self._out_hw = (ho, wo)
        self.params["W"] = glorot_uniform(rng, (kh, kw, c, f), kh * kw * f, kh * kw * c)
        self.params["b"] = np.zeros(f)
        return (ho, wo, f)

    def _wmat(self):
        kh, kw, c, f = self.params["W"].shape
        return self.params["W"].transpose(2, 0, 1, 3).reshape(c, kh * kw * f)

    def _forward(self, x, training, rng):
        n, h, w, c = x.shape
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        f = self.spec.filters
        x2 = x.reshape(n * h * w, c)
        cols = (x2 @ self._wmat()).reshape(n, h, w, kh, kw, f)
        full = np.zeros((n, *self._full, f))
        for i in range(kh):
            for j in range(kw):
                full[:, i : i + (h - 1) * sh + 1 : sh, j : j + (w - 1) * sw + 1 : sw] += cols[:, :, :, i, j]
        (ct, cl), (ho, wo) = self._crop, self._out_hw
        return full[:, ct : ct + ho, cl : cl + wo] + self.params["b"], x2

    def _backward(self, dz, cache, need_dx=True):
        x2 = cache
        h, w, c = self.input_shape
        n = len(dz)
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        f = self.spec.filters
        (ct, cl), (ho, wo) = self._crop, self._out_hw
        dfull = np.zeros((n, *self._full, f))
        dfull[:, ct : ct + ho, cl : cl + wo] = dz
        dcols = np.empty((n, h, w, kh, kw, f))
        for i in range(kh):
            for j in range(kw):
                dcols[:, :, :, i, j] = dfull[:, i : i + (h - 1) * sh + 1 : sh, j : j + (w - 1) * sw + 1 : sw]
        dcols = dcols.reshape(n * h * w, kh * kw * f)
        dw = (x2.T @ dcols).reshape(c, kh, kw, f).transpose(1, 2, 0, 3)
        if not need_dx:
            return None, {"W": dw, "b": dz.sum(axis=(0, 1, 2))}
        dx = (dcols @ self._wmat().T).reshape(n, h, w, c)
        return dx, {"W": dw, "b": dz.sum(axis=(0, 1, 2))}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties go to the first maximum in row-major order."""

    def _build(self, input_shape, rng):
        if len(input_shape) != 3:
            raise ShapeError(f"MaxPool2D expects H x W x C input, got {input_shape}")
        h, w, c = input_shape
        ph, pw = self.spec.pool
        if h < ph or w < pw:
            raise ShapeError(f"pool {ph}x{pw} larger than input {h}x{w}")
        return (h // ph, w // pw, c)

    def _forward(self, x, training, rng):
        n = len(x)
        ph, pw = self.spec.pool
        ho, wo, c = self.output_shape
        blocks = (
            x[:, : ho * ph, : wo * pw]
            .reshape(n, ho, ph, wo, pw, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, ho, wo, c, ph * pw)
        )
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, idx

    def _backward(self, dz, cache, need_dx=True):
        idx = cache
        n = len(dz)
        ph, pw = self.spec.pool
        ho, wo, c = self.output_shape
        routed = np.zeros((n, ho, wo, c, ph * pw))
        np.put_along_axis(routed, idx[..., None], dz[..., None], axis=-1)
        routed = routed.reshape(n, ho, wo, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros((n, *self.input_shape))
        dx[:, : ho * ph, : wo * pw] = routed.reshape(n, ho * ph, wo * pw, c)
        return dx, {}


class Flatten(Layer):
    def _build(self, input_shape, rng):
        return (int(np.prod(input_shape)),)

    def _forward(self, x, training, rng):
        return x.reshape(len(x), -1), None

    def _backward(self, dz, cache, need_dx=True):
        return dz.reshape(len(dz), *self.input_shape), {}


class Reshape(Layer):
    def _build(self, input_shape, rng):
        target = tuple(self.spec.target_shape)
        if int(np.prod(target)) != int(np.prod(input_shape)):
            raise ShapeError(f"cannot reshape {input_shape} to {target}")
        return target

    def _forward(self, x, training, rng):
        return x.reshape(len(x), *self.output_shape), None

    def _backward(self, dz, cache, need_dx=True):
        return dz.reshape(len(dz), *self.input_shape), {}


class Dropout(Layer):
    """Inverted dropout: kept activations are scaled by 1/keep at train time."""

    def _forward(self, x, training, rng):
        rate = self.spec.rate
        if not training or rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("Dropout in training mode needs a random generator")
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * mask, mask

    def _backward(self, dz, cache, need_dx=True):
        return (dz if cache is None else dz * cache), {}


class Upsample2D(Layer):
    """Nearest-neighbour upsampling by an integer factor per spatial axis."""

    def _build(self, input_shape, rng):
        h, w, c = input_shape
        fh, fw = self.spec.factor
        return (h * fh, w * fw, c)

    def _forward(self, x, training, rng):
        fh, fw = self.spec.factor
        return np.repeat(np.repeat(x, fh, axis=1), fw, axis=2), None

    def _backward(self, dz, cache, need_dx=True):
        h, w, c = self.input_shape
        fh, fw = self.spec.factor
        return dz.reshape(len(dz), h, fh, w, fw, c).sum(axis=(2, 4)), {}


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last.

    Training uses batch statistics and updates the running averages in place;
    inference uses the running averages.
    """

    def _build(self, input_shape, rng):
        c = input_shape[-1]
        self.params["gamma"] = np.ones(c)
        self.params["beta"] = np.zeros(c)
        self.buffers["running_mean"] = np.zeros(c)
        self.buffers["running_var"] = np.ones(c)
        return input_shape

    def _forward(self, x, training, rng):
        axes = tuple(range(x.ndim - 1))
        eps, m = self.spec.epsilon, self.spec.momentum
        if training:
            mean, var = x.mean(axis=axes), x.var(axis=axes)
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        return self.params["gamma"] * xhat + self.params["beta"], (xhat, inv_std, training)

    def _backward(self, dz, cache, need_dx=True):
        xhat, inv_std, training = cache
        axes = tuple(range(dz.ndim - 1))
        grads = {"gamma": (dz * xhat).sum(axis=axes), "beta": dz.sum(axis=axes)}
        dxhat = dz * self.params["gamma"]
        if not training:
            return dxhat * inv_std, grads
        count = dz.size // dz.shape[-1]
        dx = (inv_std / count) * (
            count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )
        return dx, grads


LAYER_TYPES = {
    "Dense": Dense,
    "Conv2D": Conv2D,
    "ConvTranspose2D": ConvTranspose2D,
    "MaxPool2D": MaxPool2D,
    "Flatten": Flatten,
    "Reshape": Reshape,
    "Dropout": Dropout,
    "Upsample2D": Upsample2D,
    "BatchNorm": BatchNorm,
}


def make_layer(spec: LayerSpec) -> Layer:
    return LAYER_TYPES[spec.kind](spec)
