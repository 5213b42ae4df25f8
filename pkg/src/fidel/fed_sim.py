"""One federated round: broadcast, local SGD on a client, delta upload, FedAvg."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import Dataset, one_hot
from .nn import CCE, Model, ShapeError, sgd_step, tree_add, tree_map, tree_norm, tree_sub
from .nn.architectures import VICTIM_BATCH, VICTIM_LR
from .nn.serialize import UPDATE_MAGIC, read_container, write_container


@dataclass(frozen=True)
class ClientConfig:
    n: int = 1
    epochs: int = 1
    batch_size: int = VICTIM_BATCH
    lr: float = VICTIM_LR
    seed: int = 0
    loss: str = CCE

    def __post_init__(self):
        if self.n < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid client config {self}")


@dataclass
class ModelUpdate:
    """Per-parameter ``after - before`` differences of one client round."""

    deltas: list
    client_id: int = 0
    round_index: int = 0
    n: int = 0
    meta: dict = field(default_factory=dict)

    def norm(self) -> float:
        return tree_norm(self.deltas)

    def scaled(self, c) -> "ModelUpdate":
        return ModelUpdate(tree_map(lambda v: v * c, self.deltas), self.client_id, self.round_index, self.n)


def model_delta(before: Model, after: Model, **meta) -> ModelUpdate:
    if not before.same_architecture(after):
        raise ShapeError("models have different layer specs")
    return ModelUpdate(tree_sub(after.params, before.params), **meta)


def apply_update(model: Model, update: ModelUpdate) -> Model:
    out = model.copy()
    out.set_params(tree_add(model.params, update.deltas))
    return out


def train_epoch(model: Model, data: Dataset, batch_size, lr, rng, order=None, loss=CCE) -> float:
    """One pass of minibatch SGD in ``order`` (dataset order by default); returns mean loss."""
    from .nn import loss as loss_fn

    order = np.arange(len(data)) if order is None else order
    total = 0.0
    for start in range(0, len(order), batch_size):
        x, y = data.take(order[start : start + batch_size])
        target = one_hot(y)
        trace = model.forward(x, training=True, rng=rng)
        total += loss_fn(trace.output, target, loss) * len(x)
        sgd_step(model, model.backward(trace, target, loss), lr)
    return total / max(len(order), 1)


def client_train(global_model: Model, local: Dataset, cfg: ClientConfig, client_id=0, round_index=0):
    """Train a copy of the global model on the client's data; return it with its update.

    Samples are visited in dataset order (no shuffling) so rounds are bit-reproducible.
    """
    if len(local) == 0:
        raise ValueError("client has an empty local dataset")
    model = global_model.copy()
    rng = np.random.default_rng([cfg.seed, round_index, client_id])
    for _ in range(cfg.epochs):
        train_epoch(model, local, cfg.batch_size, cfg.lr, rng, loss=cfg.loss)
    update = model_delta(global_model, model, client_id=client_id, round_index=round_index, n=len(local))
    return model, update


def server_aggregate(updates, base: Model) -> Model:
    """Unweighted FedAvg: ``base + mean(deltas)``."""
    updates = list(updates)
    if not updates:
        raise ValueError("no updates to aggregate")
    total = updates[0].deltas
    for u in updates[1:]:
        total = tree_add(total, u.deltas)
    mean = tree_map(lambda v: v / len(updates), total)
    return apply_update(base, ModelUpdate(mean))


def pretrain(model: Model, train: Dataset, epochs=1, batch_size=VICTIM_BATCH, lr=VICTIM_LR, seed=0, log=None) -> Model:
    """Centralized warm-up: ``epochs`` shuffled passes of minibatch SGD on a copy of ``model``."""
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    model = model.copy()
    rng = np.random.default_rng([seed, 0x9E7])
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        mean_loss = train_epoch(model, train, batch_size, lr, rng, order)
        if log:
            log(f"pretrain epoch {epoch + 1}/{epochs}: loss {mean_loss:.4f}")
    return model


def accuracy(model: Model, data: Dataset, batch_size=500) -> float:
    correct = 0
    for start in range(0, len(data), batch_size):
        x, y = data.take(np.arange(start, min(start + batch_size, len(data))))
        correct += int((model.forward(x).output.argmax(axis=1) == y).sum())
    return correct / len(data)


# -- wire formats ---------------------------------------------------------------


def save_update(update: ModelUpdate, reference: Model, path):
    header = {
        "input_shape": list(reference.input_shape),
        "layers": [s.to_dict() for s in reference.specs],
        "meta": {"client_id": update.client_id, "round_index": update.round_index, "n": update.n, **update.meta},
    }
    blobs = [(i, name, v) for i, d in enumerate(update.deltas) for name, v in d.items()]
    return write_container(path, UPDATE_MAGIC, header, blobs)


def load_update(path, reference: Model | None = None) -> ModelUpdate:
    _, header, blobs = read_container(path, UPDATE_MAGIC)
    layers = header.get("layers")
    if layers is None:
        raise ValueError(f"{path} holds tensors, not a model update")
    deltas = [dict() for _ in layers]
    for index, name, array in blobs:
        deltas[index][name] = array
    meta = dict(header["meta"])
    update = ModelUpdate(deltas, meta.pop("client_id"), meta.pop("round_index"), meta.pop("n"), meta)
    if reference is not None:
        if [s.to_dict() for s in reference.specs] != layers:
            raise ShapeError("update was produced for a different architecture")
    return update


class RoundLog:
    """Append-only CSV of (round, client, n, update L2 norm)."""

    FIELDS = ("round", "client", "n", "update_l2")

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(self.FIELDS)

    def append(self, update: ModelUpdate):
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([update.round_index, update.client_id, update.n, f"{update.norm():.12e}"])
