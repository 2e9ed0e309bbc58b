"""Toy datasets, IDX ingestion, and construction of base-model zoos."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import netgraph as ng
from . import tensorcore as tc
from .tensorcore import Tensor


class DivergenceError(FloatingPointError):
    pass


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) == 0 or len(self.x) != len(self.y):
            raise ValueError(f"dataset needs n > 0 matching rows, got {len(self.x)} x / {len(self.y)} y")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.y)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes, split or self.split)


def _balanced_labels(k: int, n: int) -> np.ndarray:
    return np.arange(n) % k


def gen_blobs(k: int, d: int, n: int, separation: float, seed: int, split: str = "train") -> Dataset:
    """Isotropic unit-variance Gaussian classes.

    When ``k <= d`` the class centres sit on a randomly rotated simplex with
    pairwise distance exactly ``separation``. Class sizes differ by at most 1.
    """
    if k < 2 or n < k:
        raise ValueError("need k >= 2 classes and n >= k samples")
    rng = np.random.default_rng(seed)
    if k <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        centres = separation / np.sqrt(2.0) * q[:k]
    else:
        centres = rng.normal(size=(k, d)) * separation / np.sqrt(2.0)
    y = rng.permutation(_balanced_labels(k, n))
    x = centres[y] + rng.normal(size=(n, d))
    return Dataset(x, y, k, split)


def gen_two_moons(n: int, noise: float, seed: int, split: str = "train") -> Dataset:
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    y = rng.permutation(_balanced_labels(2, n))
    t = rng.uniform(0.0, np.pi, size=n)
    x = np.where(
        y[:, None] == 0,
        np.stack([np.cos(t), np.sin(t)], axis=1),
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
    )
    x = x + rng.normal(scale=noise, size=x.shape)
    return Dataset(x, y, 2, split)


# IDX ---------------------------------------------------------------------

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_DTYPES:
        raise IDXError(f"{path}: bad magic {data[:4].hex()}")
    ndim = data[3]
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[data[2]])
    body = data[4 + 4 * ndim :]
    expect = int(np.prod(dims)) * dtype.itemsize
    if len(body) < expect:
        raise IDXError(f"{path}: truncated, {len(body)} of {expect} payload bytes")
    return np.frombuffer(body[:expect], dtype=dtype).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def _idx_magic(path) -> int:
    with open(path, "rb") as f:
        head = f.read(4)
    if len(head) < 4:
        raise IDXError(f"{path}: bad magic (file shorter than 4 bytes)")
    return struct.unpack(">I", head)[0]


def load_idx(images_path, labels_path, limit: Optional[int] = None, split: str = "train") -> Dataset:
    """MNIST-style image/label pair; pixels scaled to [0, 1]."""
    if _idx_magic(images_path) != 0x803:
        raise IDXError(f"{images_path}: bad magic, expected 0x00000803 for images")
    if _idx_magic(labels_path) != 0x801:
        raise IDXError(f"{labels_path}: bad magic, expected 0x00000801 for labels")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if len(images) != len(labels):
        raise IDXError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    n_classes = max(10, int(labels.max()) + 1)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), n_classes, split)


# base models -------------------------------------------------------------


def reinit(template: ng.ModelDef, seed: int) -> ng.ModelDef:
    """Copy of ``template`` with He-normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    out = template.copy()
    for layer in out.layers:
        if layer.has_params:
            n_in, n_out = layer.dims
            layer.weight = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            layer.bias = np.zeros(n_out)
    return out


def train_base_model(
    template: ng.ModelDef,
    data: Dataset,
    seed: int,
    epochs: int,
    lr: float = 0.05,
    batch_size: int = 32,
) -> ng.ModelDef:
    """Plain mini-batch SGD on all weights, starting from a seeded re-init."""
    model = reinit(template, seed)
    rng = np.random.default_rng([seed, 1])
    params = [Tensor(arr, requires_grad=True) for arr in model.parameters()]
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            with tc.Tape():
                h = Tensor(data.x[idx])
                it = iter(params)
                for layer in model.layers:
                    if layer.has_params:
                        h = tc.add_bias(tc.matmul(h, next(it)), next(it))
                    else:
                        h = layer.apply(h)
                loss = tc.softmax_cross_entropy(h, data.y[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"base model training diverged at epoch {epoch}: loss={loss.item()}")
            for p in params:
                p.grad = None
            tc.backward(loss)
            for p in params:
                p.data -= lr * p.grad
    return model


def corrupt_model(
    model: ng.ModelDef,
    mode: str,
    seed: int = 0,
    scale: float = 1e6,
    layers: Optional[Sequence[int]] = None,
    sigma: float = 1.0,
) -> ng.ModelDef:
    """Damaged copy with the same architecture.

    ``randomize`` resamples weights and biases from N(0, 1); ``extreme``
    multiplies them by ``scale``; ``noise`` adds N(0, sigma^2). ``layers``
    restricts the damage to the given dense layer indices.
    """
    if mode == "extreme" and not scale > 0:
        raise ValueError("scale must be > 0")
    if mode not in ("randomize", "extreme", "noise"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    rng = np.random.default_rng(seed)
    out = model.copy()
    targets = out.dense_indices if layers is None else list(layers)
    for i in targets:
        layer = out.layers[i]
        if not layer.has_params:
            raise ValueError(f"layer {i} has no weights to corrupt")
        if mode == "randomize":
            layer.weight = rng.normal(size=layer.weight.shape)
            layer.bias = rng.normal(size=layer.bias.shape)
        elif mode == "extreme":
            layer.weight = layer.weight * scale
            layer.bias = layer.bias * scale
        else:
            layer.weight = layer.weight + rng.normal(scale=sigma, size=layer.weight.shape)
            layer.bias = layer.bias + rng.normal(scale=sigma, size=layer.bias.shape)
    return out


def build_zoo(
    template: ng.ModelDef,
    data: Dataset,
    recipes: Sequence[str],
    seed: int,
    base_epochs: int = 30,
    lr: float = 0.05,
    batch_size: int = 32,
) -> list:
    """Models from recipe strings.

    ``trained:E``   fresh model trained E epochs (seed offset by position)
    ``base``        the shared base model (trained ``base_epochs``)
    ``randomize``   base with all weights resampled
    ``extreme:S``   base with weights scaled by S
    ``noise:SIGMA`` base plus Gaussian weight noise
    ``partial:I+J`` base with dense layers I, J randomized
    """
    base = None
    zoo = []
    for j, recipe in enumerate(recipes):
        kind, _, arg = recipe.strip().partition(":")
        if kind == "trained":
            zoo.append(train_base_model(template, data, seed + 1 + j, int(arg), lr, batch_size))
            continue
        if base is None:
            base = train_base_model(template, data, seed, base_epochs, lr, batch_size)
        sub = seed + 1000 + j
        if kind == "base":
            zoo.append(base.copy())
        elif kind == "randomize":
            zoo.append(corrupt_model(base, "randomize", sub))
        elif kind == "extreme":
            zoo.append(corrupt_model(base, "extreme", sub, scale=float(arg or 1e6)))
        elif kind == "noise":
            zoo.append(corrupt_model(base, "noise", sub, sigma=float(arg)))
        elif kind == "partial":
            zoo.append(corrupt_model(base, "randomize", sub, layers=[int(v) for v in arg.split("+")]))
        else:
            raise ValueError(f"unknown zoo recipe {recipe!r}")
    return zoo
