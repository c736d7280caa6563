"""Feedforward ReLU classifiers, flat parameter vectors and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Graph, GradError, as_tensor


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "num_classes": self.num_classes, "activation": "relu"}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        if d.get("activation", "relu") != "relu":
            raise ValueError(f"unsupported activation {d['activation']!r}")
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["num_classes"]))


@dataclass(frozen=True)
class LayerSlot:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def param_layout(spec: NetworkSpec) -> list[LayerSlot]:
    slots = []
    offset = 0
    for k, (n_in, n_out) in enumerate(spec.layer_dims):
        for name, shape in ((f"W{k}", (n_in, n_out)), (f"b{k}", (n_out,))):
            slots.append(LayerSlot(name, offset, shape))
            offset += int(np.prod(shape))
    return slots


@dataclass
class ParamVector:
    """Flat parameter storage with a per-layer layout.

    ``values`` is rank 1; ``layout`` covers it contiguously exactly once.
    """

    values: np.ndarray
    layout: list[LayerSlot]

    def __post_init__(self):
        self.values = as_tensor(self.values).reshape(-1)
        expected = 0
        for slot in self.layout:
            if slot.offset != expected:
                raise ValueError(f"layout gap or overlap at {slot.name}")
            expected += slot.size
        if expected != self.values.size:
            raise ValueError(f"layout covers {expected} values, vector has {self.values.size}")

    def unflatten(self) -> dict[str, np.ndarray]:
        return {s.name: self.values[s.offset:s.offset + s.size].reshape(s.shape)
                for s in self.layout}

    @classmethod
    def flatten(cls, tensors: dict[str, np.ndarray], layout: list[LayerSlot]) -> "ParamVector":
        parts = []
        for slot in layout:
            t = np.asarray(tensors[slot.name])
            if t.shape != slot.shape:
                raise ValueError(f"{slot.name}: expected {slot.shape}, got {t.shape}")
            parts.append(t.reshape(-1))
        values = np.concatenate(parts) if parts else np.zeros(0)
        return cls(values, list(layout))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def __len__(self) -> int:
        return self.values.size


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    layout = param_layout(spec)
    tensors = {}
    for slot in layout:
        if slot.name.startswith("W"):
            fan_in = slot.shape[0]
            tensors[slot.name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=slot.shape)
        else:
            tensors[slot.name] = np.zeros(slot.shape)
    return ParamVector.flatten(tensors, layout)


# ---------------------------------------------------------------------------
# graph construction

def add_classifier(g: Graph, spec: NetworkSpec, x: int, params: dict[str, int]) -> int:
    """Append the network applied to node ``x``; returns the logits node."""
    h = x
    n_layers = len(spec.layer_dims)
    for k in range(n_layers):
        h = g.affine(h, params[f"W{k}"], params[f"b{k}"])
        if k < n_layers - 1:
            h = g.relu(h)
    return h


def add_param_leaves(g: Graph, spec: NetworkSpec, differentiable: bool) -> dict[str, int]:
    return {slot.name: g.leaf(slot.name, differentiable) for slot in param_layout(spec)}


def param_bindings(params: ParamVector) -> dict[str, np.ndarray]:
    return params.unflatten()


def gradient_vector(grads: dict[str, np.ndarray], layout: list[LayerSlot]) -> np.ndarray:
    return np.concatenate([grads[s.name].reshape(-1) for s in layout])


def logits_graph(spec: NetworkSpec, param_grad: bool = False, input_grad: bool = False) -> tuple[Graph, int]:
    g = Graph()
    pnodes = add_param_leaves(g, spec, param_grad)
    x = g.leaf("x", input_grad)
    return g, add_classifier(g, spec, x, pnodes)


def _check_inputs(spec: NetworkSpec, inputs: np.ndarray) -> np.ndarray:
    inputs = as_tensor(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim or inputs.shape[0] < 1:
        raise GradError(f"expected inputs of shape (B, {spec.input_dim}) with B >= 1, got {inputs.shape}")
    return inputs


def predict_logits(spec: NetworkSpec, params: ParamVector, batch_inputs: np.ndarray) -> np.ndarray:
    inputs = _check_inputs(spec, batch_inputs)
    g, out = logits_graph(spec)
    return g.forward({**param_bindings(params), "x": inputs}, out)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LASTCKPT"
FORMAT_VERSION = 1
_DTYPE_TAGS = {"f64": "<f8", "f32": "<f4"}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Header spec, declared count and blob disagree."""


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ParamVector
    metadata: dict[str, str] = field(default_factory=dict)
    dtype: str = "f64"
    format_version: int = FORMAT_VERSION

    @property
    def param_count(self) -> int:
        return len(self.params)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"unknown dtype tag {ckpt.dtype!r}")
    header = json.dumps({
        "spec": ckpt.spec.to_dict(),
        "dtype": ckpt.dtype,
        "count": ckpt.param_count,
        "metadata": {str(k): str(v) for k, v in ckpt.metadata.items()},
    }, sort_keys=True).encode("utf-8")
    blob = np.asarray(ckpt.params.values, dtype=_DTYPE_TAGS[ckpt.dtype]).tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    fixed = len(MAGIC) + 5
    if len(data) < fixed or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = data[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) + 1:fixed])
    if len(data) < fixed + hlen:
        raise TruncatedBlobError(f"{path}: header truncated")
    header = json.loads(data[fixed:fixed + hlen].decode("utf-8"))
    spec = NetworkSpec.from_dict(header["spec"])
    dtype = header["dtype"]
    if dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"{path}: unknown dtype tag {dtype!r}")
    count = int(header["count"])
    layout = param_layout(spec)
    if sum(s.size for s in layout) != count:
        raise CheckpointMismatchError(f"{path}: spec implies {sum(s.size for s in layout)} params, header says {count}")
    itemsize = np.dtype(_DTYPE_TAGS[dtype]).itemsize
    blob = data[fixed + hlen:]
    if len(blob) < count * itemsize:
        raise TruncatedBlobError(f"{path}: blob has {len(blob)} bytes, expected {count * itemsize}")
    if len(blob) > count * itemsize:
        raise CheckpointMismatchError(f"{path}: {len(blob) - count * itemsize} trailing bytes")
    # f32 -> f64 widening is exact, so re-saving reproduces the blob
    params = ParamVector(np.frombuffer(blob, dtype=_DTYPE_TAGS[dtype]).copy(), layout)
    return Checkpoint(spec, params, dict(header["metadata"]), dtype, version)
