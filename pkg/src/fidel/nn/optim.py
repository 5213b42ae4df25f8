"""Plain SGD and Adadelta, updating a model's parameters in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model, ParamTree, check_congruent, tree_zeros_like


def sgd_step(model: Model, grads: ParamTree, lr: float) -> Model:
    """``p <- p - lr * g`` for every parameter."""
    check_congruent(model.params, grads)
    for layer, g in zip(model.layers, grads):
        for name, value in g.items():
            layer.params[name] = layer.params[name] - lr * value
    return model


@dataclass
class SGD:
    lr: float = 0.01

    def step(self, model: Model, grads: ParamTree) -> Model:
        return sgd_step(model, grads, self.lr)


@dataclass
class Adadelta:
    """Adadelta with the learning rate applied to the adaptive step.

    The accumulators track the unscaled step, so ``lr`` only scales how far the
    parameters move.
    """

    lr: float = 0.001
    rho: float = 0.95
    eps: float = 1e-7
    sq_grad: ParamTree | None = field(default=None, repr=False)
    sq_step: ParamTree | None = field(default=None, repr=False)

    def init(self, model: Model) -> "Adadelta":
        self.sq_grad = tree_zeros_like(model.params)
        self.sq_step = tree_zeros_like(model.params)
        return self

    def step(self, model: Model, grads: ParamTree) -> Model:
        if self.sq_grad is None:
            self.init(model)
        check_congruent(self.sq_grad, grads)
        rho, eps = self.rho, self.eps
        for layer, g, eg, ed in zip(model.layers, grads, self.sq_grad, self.sq_step):
            for name, grad in g.items():
                eg[name] = rho * eg[name] + (1 - rho) * grad * grad
                delta = -np.sqrt(ed[name] + eps) / np.sqrt(eg[name] + eps) * grad
                ed[name] = rho * ed[name] + (1 - rho) * delta * delta
                layer.params[name] = layer.params[name] + self.lr * delta
        return model


def adadelta_step(state: Adadelta, model: Model, grads: ParamTree):
    return state.step(model, grads), state
