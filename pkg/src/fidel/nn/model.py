"""Sequential model: an ordered stack of layers plus their parameters."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import LayerSpec, ShapeError, make_layer
from .losses import CCE, loss_gradient, loss_kind

# Parameters, gradients and updates share one layout: a list with one
# {name: array} dict per layer (empty for parameter-free layers).
ParamTree = list


@dataclass
class Trace:
    """Per-layer activations of one forward pass.

    ``activations[0]`` is the input and ``activations[i + 1]`` the output of
    layer ``i``.
    """

    activations: list
    caches: list = field(repr=False)
    training: bool = False

    @property
    def output(self):
        return self.activations[-1]


class Model:
    def __init__(self, specs, input_shape, seed: int = 0):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.layers = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer = make_layer(spec)
            try:
                shape = layer.build(shape, rng)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({spec.kind}): {e}") from None
            self.layers.append(layer)
        self.output_shape = shape
        self.dropout_rng = np.random.default_rng([self.seed, 0xD0])

    def __repr__(self):
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"Model(input={self.input_shape}, layers=[{kinds}])"

    # -- parameters ---------------------------------------------------------

    @property
    def params(self) -> ParamTree:
        return [layer.params for layer in self.layers]

    @property
    def buffers(self) -> ParamTree:
        return [layer.buffers for layer in self.layers]

    def set_params(self, tree: ParamTree):
        check_congruent(self.params, tree)
        for layer, p in zip(self.layers, tree):
            for name, value in p.items():
                layer.params[name] = np.array(value, dtype=np.float64, copy=True)
        return self

    def num_params(self) -> int:
        return sum(v.size for p in self.params for v in p.values())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def same_architecture(self, other: "Model") -> bool:
        return self.specs == other.specs and self.input_shape == other.input_shape

    # -- passes -------------------------------------------------------------

    def _check_input(self, x):
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            first = self.specs[0].kind if self.specs else "output"
            raise ShapeError(
                f"layer 0 ({first}): expected input (batch, {', '.join(map(str, self.input_shape))}),"
                f" got {x.shape}"
            )

    def forward(self, x, training=False, rng=None, stop=None) -> Trace:
        """Run layers ``[0, stop)`` (all by default) and keep every activation.

        Dropout masks are drawn from ``rng`` (or the model's own generator)
        only when ``training`` is set.
        """
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        if training and rng is None:
            rng = self.dropout_rng
        activations, caches = [x], []
        for layer in self.layers[:stop]:
            x, cache = layer.forward(x, training, rng)
            activations.append(x)
            caches.append(cache)
        return Trace(activations, caches, training)

    def predict(self, x, batch_size=256, stop=None):
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        outs = [self.forward(x[i : i + batch_size], stop=stop).output for i in range(0, len(x), batch_size)]
        if not outs:
            shape = self.output_shape if stop is None else self.layers[stop - 1].output_shape
            return np.zeros((0, *shape))
        return np.concatenate(outs)

    def backward(self, trace: Trace, target, loss=CCE, input_grad=False):
        """Gradients of the batch-mean loss w.r.t. every parameter.

        With ``input_grad`` the gradient w.r.t. the input is returned as well.
        """
        kind = loss_kind(loss)
        out = trace.output
        target = np.asarray(target, dtype=np.float64)
        if target.shape != out.shape:
            raise ShapeError(f"target shape {target.shape} != output shape {out.shape}")
        grads = [dict() for _ in self.layers]
        # layers before the first parameterized one need no gradient unless the input's is wanted
        first = 0 if input_grad else next((i for i, l in enumerate(self.layers) if l.params), 0)
        last = self.layers[-1]
        if kind == CCE and last.spec.activation == "softmax":
            # fused softmax + cross-entropy
            loss_gradient(out, target, kind)  # validates one-hot targets
            dz = (out - target) / len(out)
            dx, grads[-1] = last.backward_preactivation(dz, trace.caches[-1], input_grad or len(self.layers) - 1 > first)
        else:
            dz = loss_gradient(out, target, kind)
            dx, grads[-1] = last.backward(dz, trace.caches[-1], input_grad or len(self.layers) - 1 > first)
        for i in range(len(self.layers) - 2, first - 1, -1):
            dx, grads[i] = self.layers[i].backward(dx, trace.caches[i], input_grad or i > first)
        return (grads, dx) if input_grad else grads


# -- parameter-tree helpers ---------------------------------------------------


def check_congruent(a: ParamTree, b: ParamTree):
    if len(a) != len(b):
        raise ShapeError(f"parameter trees have {len(a)} and {len(b)} layers")
    for i, (pa, pb) in enumerate(zip(a, b)):
        if pa.keys() != pb.keys():
            raise ShapeError(f"layer {i}: parameter names {sorted(pa)} vs {sorted(pb)}")
        for name in pa:
            if np.shape(pa[name]) != np.shape(pb[name]):
                raise ShapeError(f"layer {i} {name}: shape {np.shape(pa[name])} vs {np.shape(pb[name])}")


def tree_map(fn, *trees) -> ParamTree:
    return [{k: fn(*(t[i][k] for t in trees)) for k in trees[0][i]} for i in range(len(trees[0]))]


def tree_sub(a, b):
    check_congruent(a, b)
    return tree_map(np.subtract, a, b)


def tree_add(a, b):
    check_congruent(a, b)
    return tree_map(np.add, a, b)


def tree_scale(a, c):
    return tree_map(lambda v: v * c, a)


def tree_zeros_like(a):
    return tree_map(np.zeros_like, a)


def tree_norm(a) -> float:
    return float(np.sqrt(sum(float(np.sum(v * v)) for p in a for v in p.values())))


def tree_max_abs(a) -> float:
    return max((float(np.max(np.abs(v))) for p in a for v in p.values() if v.size), default=0.0)


def tree_equal(a, b) -> bool:
    return len(a) == len(b) and all(
        pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa) for pa, pb in zip(a, b)
    )


def specs_from_dicts(items) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec.from_dict(d) for d in items)
