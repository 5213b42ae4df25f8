"""Victim and generator networks.

Victims: a four-layer fully connected network and a single-convolution CNN,
both trained with SGD (lr 0.01, batch 50) on categorical cross-entropy. Only
the first dense layer's activation varies between experiments. Optional
dropout sits directly after the first dense layer.

Generators map a victim's first-dense-layer input (13x13x32 for MNIST,
15x15x32 for CIFAR-10) back to image space and are trained with Adadelta on MSE.
"""

from __future__ import annotations

from .layers import (
    batch_norm,
    conv2d,
    conv_transpose2d,
    dense,
    dropout,
    flatten,
    max_pool2d,
    reshape,
    upsample2d,
)
from .model import Model

IMAGE_SHAPES = {"mnist": (28, 28, 1), "cifar10": (32, 32, 3)}
VICTIM_LR = 0.01
VICTIM_BATCH = 50
NUM_CLASSES = 10


def _with_dropout(first, rest, rate):
    return [first] + ([dropout(rate)] if rate else []) + rest


def fcnn_specs(activation="relu", dropout_rate=0.0):
    return _with_dropout(
        dense(128, activation),
        [dense(128, "relu"), dense(64, "relu"), dense(NUM_CLASSES, "softmax")],
        dropout_rate,
    )


def cnn_specs(activation="relu", dropout_rate=0.0):
    return [conv2d(32, 3), max_pool2d(2), flatten()] + _with_dropout(
        dense(128, activation),
        [dense(64, "relu"), dense(NUM_CLASSES, "softmax")],
        dropout_rate,
    )


def mnist_generator_specs():
    # paddings are not given for this network; "valid" throughout
    return [
        upsample2d(2),
        conv2d(20, 5, activation="relu"),
        upsample2d(2),
        conv2d(10, 5, stride=2, activation="relu"),
        flatten(),
        dense(784, "sigmoid"),
        reshape(28, 28, 1),
    ]


def cifar_generator_specs():
    # The third transposed conv uses "valid" padding (30 -> 34) so that the
    # valid 3x3 Tanh conv lands on 32x32 and the output matches CIFAR images.
    return [
        conv_transpose2d(128, 5, 1, "same", "relu"),
        conv_transpose2d(64, 5, 2, "same", "relu"),
        batch_norm(),
        conv_transpose2d(64, 5, 1, "valid", "relu"),
        conv2d(32, 3, 1, "valid", "tanh"),
        conv2d(3, 3, 1, "same", "sigmoid"),
    ]


def build_victim(arch="fcnn", dataset="mnist", activation="relu", dropout_rate=0.0, seed=0) -> Model:
    if arch == "fcnn":
        specs = fcnn_specs(activation, dropout_rate)
    elif arch == "cnn":
        specs = cnn_specs(activation, dropout_rate)
    else:
        raise ValueError(f"unknown victim architecture {arch!r}")
    return Model(specs, IMAGE_SHAPES[dataset], seed)


def build_generator(dataset="mnist", feature_shape=None, seed=0) -> Model:
    if dataset == "mnist":
        specs, default = mnist_generator_specs(), (13, 13, 32)
    elif dataset == "cifar10":
        specs, default = cifar_generator_specs(), (15, 15, 32)
    else:
        raise ValueError(f"unknown dataset {dataset!r}")
    model = Model(specs, feature_shape or default, seed)
    if model.output_shape != IMAGE_SHAPES[dataset]:
        raise ValueError(f"generator output {model.output_shape} != image shape {IMAGE_SHAPES[dataset]}")
    return model
