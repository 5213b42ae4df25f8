"""Stand-in datasets written in the canonical MNIST / CIFAR-10 binary formats.

Used when the real archives are not available. The MNIST stand-in is built
from scikit-learn's bundled 8x8 handwritten digits, upscaled to a 20x20 box
inside a 28x28 frame and randomly rotated, scaled, sheared, shifted and blurred.
The CIFAR-10 stand-in is random 32x32 crops from ten bundled photographs
(label = source photo), with flips and colour jitter. Both sets are generated
deterministically from a seed and then parsed through the ordinary loaders.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data_io import CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, MNIST_FILES, write_cifar_batch, write_mnist

VERSION = 1
MARKER = "SURROGATE.json"


def _mnist_like(bases, rng):
    """One randomly distorted 28x28 rendering per 8x8 base digit (values in [0, 1])."""
    from scipy import ndimage

    out = np.empty((len(bases), 28, 28), dtype=np.uint8)
    centre = np.array([13.5, 13.5])
    for k, base in enumerate(bases):
        box = ndimage.zoom(base, 20 / 8, order=3, grid_mode=True, mode="nearest")
        frame = np.zeros((28, 28))
        frame[4:24, 4:24] = np.clip(box, 0, 1)
        angle = rng.uniform(-0.26, 0.26)
        c, s = np.cos(angle), np.sin(angle)
        mat = np.array([[c, -s], [s, c]]) @ np.array([[1, rng.uniform(-0.25, 0.25)], [0, 1]])
        mat /= rng.uniform(0.85, 1.15)
        offset = centre - mat @ (centre + rng.uniform(-2, 2, 2))
        img = ndimage.affine_transform(frame, mat, offset=offset, order=1)
        img = ndimage.gaussian_filter(img, rng.uniform(0.3, 0.9))
        img = np.clip(img, 0, None) ** rng.uniform(0.6, 1.0)
        peak = img.max()
        img = img / peak if peak > 0 else img
        img[img < 0.08] = 0.0
        out[k] = np.rint(img * 255)
    return out


def make_mnist(directory, seed=0, n_train=60000, n_test=10000):
    from sklearn.datasets import load_digits

    digits = load_digits()
    images, labels = digits.images / 16.0, digits.target
    order = np.random.default_rng([seed, 28]).permutation(len(images))
    # test digits come from handwriting never used for the training split
    splits = {"train": (order[:1300], n_train), "test": (order[1300:], n_test)}
    directory = Path(directory)
    for i, (split, (bases, count)) in enumerate(splits.items()):
        rng = np.random.default_rng([seed, 28, i])
        picks = bases[rng.integers(0, len(bases), count)]
        pixels = _mnist_like(images[picks], rng)
        write_mnist(pixels, labels[picks], directory / MNIST_FILES[split][0], directory / MNIST_FILES[split][1])


def _photos():
    from skimage import color, data
    from sklearn.datasets import load_sample_images

    photos = [
        data.astronaut(), data.chelsea(), data.coffee(), data.rocket(), data.hubble_deep_field(),
        data.immunohistochemistry(), data.retina(), color.gray2rgb(data.camera()),
    ]
    photos += list(load_sample_images().images)
    return [np.asarray(p[..., :3], dtype=np.uint8) for p in photos]


def _cifar_like(count, photos, rng):
    from PIL import Image

    pixels = np.empty((count, 32, 32, 3), dtype=np.uint8)
    labels = rng.integers(0, len(photos), count).astype(np.uint8)
    for k, lab in enumerate(labels):
        photo = photos[lab]
        h, w = photo.shape[:2]
        size = int(rng.integers(24, min(h, w, 160) + 1))
        y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
        crop = Image.fromarray(photo[y : y + size, x : x + size]).resize((32, 32), Image.BILINEAR, reducing_gap=2.0)
        img = np.asarray(crop, dtype=np.float64) / 255.0
        if rng.random() < 0.5:
            img = img[:, ::-1]
        gain = rng.uniform(0.9, 1.1, 3) * rng.uniform(0.75, 1.25)
        img = (img - img.mean()) * rng.uniform(0.8, 1.2) + img.mean()
        pixels[k] = np.clip(np.rint(img * gain * 255), 0, 255)
    return pixels, labels


def make_cifar10(directory, seed=0, per_batch=10000):
    photos = _photos()
    directory = Path(directory)
    for i, name in enumerate((*CIFAR_TRAIN_FILES, CIFAR_TEST_FILE)):
        pixels, labels = _cifar_like(per_batch, photos, np.random.default_rng([seed, 32, i]))
        write_cifar_batch(pixels, labels, directory / name)


def ensure_surrogate(root, seed=0, which=("mnist", "cifar10")) -> Path:
    """Create the stand-in datasets under ``root`` unless an identical set exists."""
    root = Path(root)
    marker = root / MARKER
    want = {"version": VERSION, "seed": seed}
    have = json.loads(marker.read_text()) if marker.exists() else {}
    if {k: have.get(k) for k in want} != want:
        have = dict(want)
    done = set(have.get("datasets", []))
    for name in which:
        if name in done:
            continue
        if name == "mnist":
            make_mnist(root / "mnist", seed)
        elif name == "cifar10":
            make_cifar10(root / "cifar-10-batches-bin", seed)
        else:
            raise ValueError(f"unknown dataset {name!r}")
        done.add(name)
        have["datasets"] = sorted(done)
        root.mkdir(parents=True, exist_ok=True)
        marker.write_text(json.dumps(have, sort_keys=True))
    return root
