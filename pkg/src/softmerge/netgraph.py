"""Layer-list model definitions, frozen weights and the SMRG binary format.

SMRG layout (all integers little-endian u32 unless noted)::

    b"SMRG"  version  n_layers
    per layer: kind (u8)  n_dims  dims...  [dense: weight f64[in*out], bias f64[out]]
    n_groups  per group: start end       (inclusive layer range)
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

MAGIC = b"SMRG"
VERSION = 1

KINDS = ("dense", "relu", "flatten")
_KIND_TAG = {k: i for i, k in enumerate(KINDS)}


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class Truncated(FormatError):
    pass


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    dims: tuple = ()
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in _KIND_TAG:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if self.kind == "dense":
            if len(self.dims) != 2:
                raise ValueError("dense layer needs dims (in, out)")
            n_in, n_out = self.dims
            if self.weight is None:
                self.weight = np.zeros((n_in, n_out))
            if self.bias is None:
                self.bias = np.zeros(n_out)
            self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
            if self.weight.shape != (n_in, n_out) or self.bias.shape != (n_out,):
                raise ValueError(
                    f"dense weights {self.weight.shape}/{self.bias.shape} do not match dims {self.dims}"
                )

    @property
    def has_params(self) -> bool:
        return self.kind == "dense"

    def apply(self, x: Tensor) -> Tensor:
        if self.kind == "dense":
            if x.data.ndim != 2 or x.shape[1] != self.dims[0]:
                raise tc.ShapeError(f"dense layer expects (batch, {self.dims[0]}), got {x.shape}")
            return tc.add_bias(tc.matmul(x, Tensor(self.weight)), Tensor(self.bias))
        if self.kind == "relu":
            return tc.relu(x)
        return tc.flatten(x)

    def out_shape(self, in_shape: tuple) -> tuple:
        if self.kind == "dense":
            return (in_shape[0], self.dims[1])
        if self.kind == "flatten":
            return (in_shape[0], int(np.prod(in_shape[1:])))
        return tuple(in_shape)

    def copy(self) -> "LayerSpec":
        if self.kind == "dense":
            return LayerSpec(self.kind, self.dims, self.weight.copy(), self.bias.copy())
        return LayerSpec(self.kind, self.dims)


@dataclass
class ModelDef:
    """An ordered layer list plus a partition of the layers into modules.

    ``groups`` holds inclusive ``(start, end)`` layer ranges; by default every
    layer is one module.
    """

    layers: list
    groups: list = field(default_factory=list)

    def __post_init__(self):
        if not self.groups:
            self.groups = [(i, i) for i in range(len(self.layers))]
        self.groups = [(int(a), int(b)) for a, b in self.groups]
        expect = 0
        for a, b in self.groups:
            if a != expect or b < a:
                raise ValueError(f"module groups must partition the layers in order, got {self.groups}")
            expect = b + 1
        if expect != len(self.layers):
            raise ValueError(f"module groups cover {expect} of {len(self.layers)} layers")
        prev_out = None
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                if prev_out is not None and prev_out != layer.dims[0]:
                    raise ValueError(f"layer {i}: input dim {layer.dims[0]} != previous output {prev_out}")
                prev_out = layer.dims[1]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.kind.encode())
            h.update(struct.pack(f"<{len(layer.dims) + 1}I", len(layer.dims), *layer.dims))
        return h.hexdigest()[:16]

    @property
    def dense_indices(self) -> list:
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            if layer.has_params:
                out.extend([layer.weight, layer.bias])
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self.parameters():
            h.update(arr.tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelDef":
        return ModelDef([layer.copy() for layer in self.layers], list(self.groups))


def mlp(sizes: Sequence[int], groups: Optional[list] = None, seed: Optional[int] = None) -> ModelDef:
    """Dense/relu stack ``sizes[0] -> ... -> sizes[-1]`` with no final activation.

    With a seed, weights get He-normal init; otherwise they are zero.
    """
    rng = np.random.default_rng(seed) if seed is not None else None
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) if rng is not None else None
        layers.append(LayerSpec("dense", (a, b), w, np.zeros(b)))
        if i < len(sizes) - 2:
            layers.append(LayerSpec("relu"))
    return ModelDef(layers, groups or [])


def split_groups(model: ModelDef, n_modules: int) -> list:
    """Contiguous groups with the dense layers spread as evenly as possible.

    Each group ends right after a dense layer's trailing activation.
    """
    dense = model.dense_indices
    if not 1 <= n_modules <= len(dense):
        raise ValueError(f"cannot split {len(dense)} dense layers into {n_modules} modules")
    per = np.array_split(np.arange(len(dense)), n_modules)
    groups, start = [], 0
    for k, chunk in enumerate(per):
        if k == n_modules - 1:
            end = len(model.layers) - 1
        else:
            end = dense[chunk[-1] + 1] - 1
        groups.append((start, end))
        start = end + 1
    return groups


def run_layers(layers: Sequence[LayerSpec], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer.apply(x)
    return x


def forward(model: ModelDef, x) -> Tensor:
    return run_layers(model.layers, x if isinstance(x, Tensor) else Tensor(x))


def out_shape(layers: Sequence[LayerSpec], in_shape: tuple) -> tuple:
    for layer in layers:
        in_shape = layer.out_shape(in_shape)
    return in_shape


def assert_same_arch(zoo: Sequence[ModelDef]) -> None:
    """Raise :class:`ArchitectureMismatch` naming the first differing layer."""
    if not zoo:
        raise ArchitectureMismatch("empty model zoo")
    ref = zoo[0]
    for j, model in enumerate(zoo[1:], start=1):
        if model.fingerprint == ref.fingerprint and model.groups == ref.groups:
            continue
        if len(model.layers) != len(ref.layers):
            raise ArchitectureMismatch(
                f"model {j} has {len(model.layers)} layers, model 0 has {len(ref.layers)}"
            )
        for i, (a, b) in enumerate(zip(ref.layers, model.layers)):
            if a.kind != b.kind or a.dims != b.dims:
                raise ArchitectureMismatch(
                    f"model {j} layer {i}: {b.kind}{b.dims} differs from model 0 {a.kind}{a.dims}"
                )
        raise ArchitectureMismatch(f"model {j} module groups {model.groups} differ from {ref.groups}")


# serialization -----------------------------------------------------------


def dumps(model: ModelDef) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(model.layers)))
    for layer in model.layers:
        buf.write(struct.pack("<BI", _KIND_TAG[layer.kind], len(layer.dims)))
        buf.write(struct.pack(f"<{len(layer.dims)}I", *layer.dims))
        if layer.has_params:
            buf.write(layer.weight.astype("<f8").tobytes())
            buf.write(layer.bias.astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(model.groups)))
    for a, b in model.groups:
        buf.write(struct.pack("<II", a, b))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"file truncated at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> ModelDef:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    version, n_layers = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatch(f"version mismatch: file has {version}, reader supports {VERSION}")
    layers = []
    for _ in range(n_layers):
        tag, ndims = r.unpack("<BI")
        if tag >= len(KINDS):
            raise FormatError(f"unknown layer kind tag {tag}")
        dims = r.unpack(f"<{ndims}I")
        kind = KINDS[tag]
        if kind == "dense":
            n_in, n_out = dims
            w = np.frombuffer(r.take(8 * n_in * n_out), dtype="<f8").reshape(n_in, n_out)
            b = np.frombuffer(r.take(8 * n_out), dtype="<f8")
            layers.append(LayerSpec(kind, dims, w.astype(np.float64), b.astype(np.float64)))
        else:
            layers.append(LayerSpec(kind, dims))
    (n_groups,) = r.unpack("<I")
    groups = [r.unpack("<II") for _ in range(n_groups)]
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after module table")
    return ModelDef(layers, groups)


def save_model(model: ModelDef, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_model(path) -> ModelDef:
    return loads(Path(path).read_bytes())
