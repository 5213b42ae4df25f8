"""First-dense-layer inversion of a model update.

For a neuron ``i`` of the first dense layer, a single-sample SGD step moves its
incoming weights by ``-lr * g_i * x`` and its bias by ``-lr * g_i``. Dividing the
weight delta by the bias delta therefore returns the layer input ``x`` exactly,
whatever the learning rate. With several samples the quotient is a per-neuron
weighted combination of the batch inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fed_sim import ModelUpdate
from .nn import Model

EXACT = "exact"
UNBIASED = "unbiased"
DEAD_THRESHOLD = 1e-12


@dataclass
class PartialReconstruction:
    neuron: int
    values: np.ndarray
    kind: str
    bias_delta: float
    dead: bool = False


def locate_first_dense(model: Model) -> tuple[int, tuple[int, ...]]:
    """Index of the earliest Dense layer and the (unflattened) shape of its input."""
    for i, layer in enumerate(model.layers):
        if layer.kind == "Dense":
            j = i
            while j > 0 and model.layers[j - 1].kind == "Flatten":
                j -= 1
            shape = model.layers[j].input_shape
            return i, shape
    raise ValueError("model has no Dense layer to attack")


def partial_matrix(update: ModelUpdate, model: Model, tau=DEAD_THRESHOLD):
    """Vectorized extraction.

    Returns ``(values, exact, dead, bias_delta)`` where ``values[i]`` is neuron
    ``i``'s flattened partial (divided by its bias delta when ``exact[i]``).
    """
    index, _ = locate_first_dense(model)
    d = update.deltas[index]
    dw, db = np.asarray(d["W"]), np.asarray(d["b"])
    if dw.shape != model.layers[index].params["W"].shape:
        raise ValueError(f"update weight delta {dw.shape} does not match layer {index}")
    cutoff = tau * max(float(np.max(np.abs(db), initial=0.0)), 1e-300)
    exact = np.abs(db) > cutoff
    rows = dw.T.copy()
    rows[exact] /= db[exact, None]
    dead = ~exact & ~np.any(dw != 0, axis=0)
    return rows, exact, dead, db.copy()


def extract_partials(update: ModelUpdate, model: Model, tau=DEAD_THRESHOLD) -> list[PartialReconstruction]:
    """One partial reconstruction per neuron of the first dense layer."""
    _, shape = locate_first_dense(model)
    rows, exact, dead, db = partial_matrix(update, model, tau)
    return [
        PartialReconstruction(
            neuron=i,
            values=rows[i].reshape(shape),
            kind=EXACT if exact[i] else UNBIASED,
            bias_delta=float(db[i]),
            dead=bool(dead[i]),
        )
        for i in range(len(rows))
    ]


def reconstruct_single(partials) -> np.ndarray:
    """Best single guess: the exact partial with the largest |bias delta|,
    else the largest-norm unbiased partial."""
    partials = list(partials)
    if not partials:
        raise ValueError("no partial reconstructions given")
    exact = [p for p in partials if p.kind == EXACT]
    if exact:
        return max(exact, key=lambda p: abs(p.bias_delta)).values
    return max(partials, key=lambda p: float(np.linalg.norm(p.values))).values
