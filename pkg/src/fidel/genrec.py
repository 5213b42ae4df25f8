"""Generative inversion of convolutional partial reconstructions.

The adversary runs its auxiliary images through the victim's layers up to the
first dense layer, stores (features, image) pairs, and trains a generator to map
features back to images. Exact partials from a CNN update are then fed to the
generator to obtain input-space candidates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attack import PartialReconstruction, locate_first_dense
from .data_io import Dataset
from .nn import MSE, Adadelta, Model, ShapeError, build_generator, load_model, loss, save_model

DEFAULT_BUDGET = 600.0
DEFAULT_BATCH = 16
GENERATOR_LR = 0.001


@dataclass
class TrainingPairs:
    """Row ``i`` of ``features`` is the victim's first-dense input for ``targets[i]``."""

    features: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, index):
        return TrainingPairs(self.features[index], self.targets[index])


@dataclass
class Generator:
    model: Model
    optimizer: Adadelta
    dataset: str
    loss_curve: list = field(default_factory=list)  # mean training MSE per epoch
    val_mse: float = float("nan")
    epochs: int = 0
    seconds: float = 0.0
    feature_mean: np.ndarray | None = None  # per-channel statistics of the training features
    feature_std: np.ndarray | None = None


def build_pairs(victim: Model, auxiliary: Dataset, batch_size=500) -> TrainingPairs:
    """Features come from every layer before the first dense one, in inference mode."""
    index, shape = locate_first_dense(victim)
    if auxiliary.image_shape != victim.input_shape:
        raise ShapeError(f"auxiliary images {auxiliary.image_shape} do not fit victim input {victim.input_shape}")
    targets = auxiliary.images
    # stop before the Flatten layers that feed the dense layer
    stop = index
    while stop > 0 and victim.layers[stop - 1].kind == "Flatten":
        stop -= 1
    features = victim.predict(targets, batch_size, stop=stop)
    return TrainingPairs(features.reshape(len(targets), *shape), targets)


def _check_features(generator: Generator, features):
    features = np.asarray(features, dtype=np.float64)
    want = generator.model.input_shape
    if features.shape[1:] != want:
        raise ShapeError(f"generator expects features of shape {want}, got {features.shape[1:]}")
    return features


def _channel_stats(features):
    axes = tuple(range(features.ndim - 1))
    return features.mean(axis=axes), features.std(axis=axes)


def renormalize_features(features, mean, std):
    """Per-channel affine map of ``features`` onto the given statistics (constant channels map to the mean)."""
    fmean, fstd = _channel_stats(features)
    scale = np.divide(std, fstd, out=np.zeros_like(fstd), where=fstd > 0)
    return (features - fmean) * scale + mean


def train_generator(
    pairs: TrainingPairs,
    dataset="mnist",
    epochs=None,
    time_budget=DEFAULT_BUDGET,
    batch_size=DEFAULT_BATCH,
    seed=0,
    val_fraction=0.1,
    lr=GENERATOR_LR,
    log=None,
) -> Generator:
    """Adadelta on per-pixel MSE until ``epochs`` passes or ``time_budget`` seconds.

    The wall-clock cap is checked after every minibatch. A ``val_fraction`` of the
    pairs is held out and its MSE reported as ``val_mse``. With both ``epochs`` and
    ``time_budget`` set, ``time_budget`` is only a safety cap and the run is
    deterministic only if the epoch count is reached first.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    if epochs is None and time_budget is None:
        raise ValueError("need an epoch count or a time budget")
    rng = np.random.default_rng([seed, 0x6E4])
    order = rng.permutation(len(pairs))
    n_val = int(len(pairs) * val_fraction) if len(pairs) > 1 else 0
    val, train = pairs[order[:n_val]], pairs[order[n_val:]]

    model = build_generator(dataset, pairs.features.shape[1:], seed)
    mean, std = _channel_stats(train.features)
    gen = Generator(model, Adadelta(lr=lr).init(model), dataset, feature_mean=mean, feature_std=std)
    start = time.perf_counter()
    out_of_time = False
    while not out_of_time and (epochs is None or gen.epochs < epochs):
        total, seen = 0.0, 0
        idx = rng.permutation(len(train))
        for lo in range(0, len(train), batch_size):
            batch = idx[lo : lo + batch_size]
            x, y = train.features[batch], train.targets[batch]
            trace = model.forward(x, training=True)
            total += loss(trace.output, y, MSE) * len(batch)
            seen += len(batch)
            gen.optimizer.step(model, model.backward(trace, y, MSE))
            if time_budget is not None and time.perf_counter() - start >= time_budget:
                out_of_time = True
                break
        gen.loss_curve.append(total / seen)
        gen.epochs += 1
        if log:
            log(f"generator epoch {gen.epochs}: train mse {gen.loss_curve[-1]:.5f}")
    gen.seconds = time.perf_counter() - start
    if n_val:
        gen.val_mse = mse(gen, val)
    return gen


def mse(generator: Generator, pairs: TrainingPairs) -> float:
    """Mean per-pixel squared error of the generator over ``pairs``."""
    out = generate(generator, pairs.features)
    return float(np.mean((out - pairs.targets) ** 2))


def generate(generator: Generator, features, renormalize=False) -> np.ndarray:
    """Input-space candidates for a batch of features (or a single feature tensor)."""
    if isinstance(features, PartialReconstruction):
        features = features.values
    features = np.asarray(features, dtype=np.float64)
    single = features.shape == generator.model.input_shape
    batch = _check_features(generator, features[None] if single else features)
    if renormalize:
        batch = np.stack([renormalize_features(f, generator.feature_mean, generator.feature_std) for f in batch])
    out = generator.model.predict(batch)
    return out[0] if single else out


def generate_batch_candidates(generator: Generator, partials) -> list[np.ndarray]:
    """One candidate per live neuron's exact partial."""
    from .attack import EXACT

    live = [p.values for p in partials if p.kind == EXACT and not p.dead]
    if not live:
        return []
    return list(generate(generator, np.stack(live)))


def save_generator(generator: Generator, path):
    meta = {
        "dataset": generator.dataset,
        "loss_curve": list(generator.loss_curve),
        "val_mse": generator.val_mse,
        "epochs": generator.epochs,
        "feature_mean": None if generator.feature_mean is None else generator.feature_mean.tolist(),
        "feature_std": None if generator.feature_std is None else generator.feature_std.tolist(),
    }
    return save_model(generator.model, path, meta)


def load_generator(path) -> Generator:
    model, meta = load_model(path, with_meta=True)
    if "dataset" not in meta:
        raise ValueError(f"{path} does not hold a generator")
    stats = {k: None if meta.get(k) is None else np.asarray(meta[k]) for k in ("feature_mean", "feature_std")}
    return Generator(model, Adadelta().init(model), meta["dataset"], list(meta["loss_curve"]), meta["val_mse"],
                     meta["epochs"], **stats)
