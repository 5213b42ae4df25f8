"""Small numpy neural-network library: layers, losses, optimizers, snapshots."""

from .architectures import (
    IMAGE_SHAPES,
    build_generator,
    build_victim,
    cifar_generator_specs,
    cnn_specs,
    fcnn_specs,
    mnist_generator_specs,
)
from .layers import (
    LayerSpec,
    ShapeError,
    activate,
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
from .losses import CCE, MSE, loss, loss_gradient
from .model import (
    Model,
    Trace,
    check_congruent,
    tree_add,
    tree_equal,
    tree_map,
    tree_max_abs,
    tree_norm,
    tree_scale,
    tree_sub,
    tree_zeros_like,
)
from .optim import SGD, Adadelta, adadelta_step, sgd_step
from .serialize import load_model, load_tensors, save_model, save_tensors
