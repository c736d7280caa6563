"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is built once from a small set of primitives, then evaluated
any number of times with different leaf bindings.  Gradients are available
for every leaf marked differentiable, which covers both model parameters and
model inputs (the attack needs the latter).

Tensors are plain numpy arrays.  The working float type is configured
globally with :func:`set_default_dtype`; tests run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

_DTYPE: type = np.float64


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dtype


def get_default_dtype() -> type:
    return _DTYPE


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=_DTYPE)


class GradError(ValueError):
    """Base class for graph construction and evaluation errors."""


class ShapeMismatchError(GradError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class NumericalOverflowError(GradError, ArithmeticError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"node {node_id} ({op}): non-finite value")
        self.node_id = node_id


class UnboundLeafError(GradError):
    pass


class NonScalarLossError(GradError):
    pass


class BackwardBeforeForwardError(GradError, RuntimeError):
    pass


class LabelRangeError(GradError):
    pass


# ---------------------------------------------------------------------------
# numerically stable kernels shared with the objective module

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def check_labels(labels: np.ndarray, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise LabelRangeError(f"labels shape {labels.shape} does not match batch {batch}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelRangeError("labels must be integers")
    if batch and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"labels must lie in [0, {num_classes})")
    return labels


def per_example_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy, computed in log space."""
    labels = check_labels(labels, logits.shape[0], logits.shape[1])
    logp = log_softmax(logits)
    return -logp[np.arange(logits.shape[0]), labels]


def per_example_kl(student: np.ndarray, teacher: np.ndarray, tau: float) -> np.ndarray:
    """Per-row KL(softmax(teacher/tau) || softmax(student/tau))."""
    log_ps = log_softmax(student / tau)
    log_pt = log_softmax(teacher / tau)
    return (np.exp(log_pt) * (log_pt - log_ps)).sum(axis=-1)


# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    differentiable: bool = False


class Graph:
    """A topologically ordered list of primitive nodes.

    Nodes can only reference earlier nodes, so construction order is a valid
    evaluation order.  Leaves are created with :meth:`leaf` (bound at
    evaluation time) or :meth:`constant` (value fixed at construction).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.output: int | None = None
        self._values: list[np.ndarray] | None = None
        self._saved: list[Any] = []
        self._requires_grad: list[bool] = []
        self._bindings: dict[str, np.ndarray] | None = None

    # -- construction -----------------------------------------------------
    def _add(self, op: str, inputs: tuple[int, ...], **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GradError(f"unknown input node {i}")
        node_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, attrs))
        self._requires_grad.append(any(self._requires_grad[i] for i in inputs))
        self.output = node_id
        self._values = None
        return node_id

    def leaf(self, name: str, differentiable: bool = True) -> int:
        if name in self.leaves:
            raise GradError(f"duplicate leaf {name!r}")
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), name=name, differentiable=differentiable))
        self._requires_grad.append(differentiable)
        self.leaves[name] = node_id
        self._values = None
        return node_id

    def constant(self, value) -> int:
        node_id = len(self.nodes)
        self.nodes.append(Node("const", (), {"value": np.asarray(value)}))
        self._requires_grad.append(False)
        return node_id

    def affine(self, x: int, w: int, b: int) -> int:
        return self._add("affine", (x, w, b))

    def relu(self, x: int) -> int:
        return self._add("relu", (x,))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self._add("scale", (a,), c=float(c))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def sum(self, a: int) -> int:
        return self._add("sum", (a,))

    def mean(self, a: int) -> int:
        return self._add("mean", (a,))

    def log(self, a: int) -> int:
        return self._add("log", (a,))

    def exp(self, a: int) -> int:
        return self._add("exp", (a,))

    def max(self, a: int, axis: int = -1) -> int:
        return self._add("max", (a,), axis=axis)

    def clamp(self, a: int, lo: float, hi: float) -> int:
        if lo > hi:
            raise GradError("clamp requires lo <= hi")
        return self._add("clamp", (a,), lo=lo, hi=hi)

    def softmax_ce(self, logits: int, labels: int) -> int:
        """Mean softmax cross-entropy; ``labels`` is a non-differentiable leaf."""
        if self._requires_grad[labels]:
            raise GradError("labels leaf must not be differentiable")
        return self._add("softmax_ce", (logits, labels))

    def kl_temperature(self, student: int, teacher: int, tau: float,
                       detach_teacher: bool = True, tau_squared_scale: bool = False) -> int:
        """Mean KL(softmax(teacher/tau) || softmax(student/tau))."""
        if not tau > 0:
            raise GradError("temperature must be positive")
        return self._add("kl_temperature", (student, teacher), tau=float(tau),
                         detach_teacher=detach_teacher, tau_squared_scale=tau_squared_scale)

    def set_output(self, node_id: int) -> None:
        self.output = node_id

    @property
    def differentiable_leaves(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "leaf" and n.differentiable]

    # -- evaluation -------------------------------------------------------
    def forward(self, bindings: dict[str, Any], output: int | None = None) -> np.ndarray:
        missing = [k for k in self.leaves if k not in bindings]
        if missing:
            raise UnboundLeafError(f"unbound leaves: {missing}")
        values: list[np.ndarray] = []
        saved: list[Any] = []
        for node_id, node in enumerate(self.nodes):
            if node.op == "leaf":
                raw = bindings[node.name]
                if isinstance(raw, np.ndarray) and np.issubdtype(raw.dtype, np.integer):
                    out = raw
                else:
                    out = as_tensor(raw)
                    if not np.isfinite(out).all():
                        raise NumericalOverflowError(node_id, "leaf")
                values.append(out)
                saved.append(None)
                continue
            if node.op == "const":
                values.append(node.attrs["value"])
                saved.append(None)
                continue
            args = [values[i] for i in node.inputs]
            out, keep = _FORWARD[node.op](node_id, node, *args)
            if not np.isfinite(out).all():
                raise NumericalOverflowError(node_id, node.op)
            values.append(out)
            saved.append(keep)
        self._values = values
        self._saved = saved
        self._bindings = dict(bindings)
        target = self.output if output is None else output
        if target is None:
            raise GradError("graph has no nodes")
        return values[target]

    def value(self, node_id: int) -> np.ndarray:
        if self._values is None:
            raise BackwardBeforeForwardError("graph has not been evaluated")
        return self._values[node_id]

    def backward(self, loss: int | None = None) -> dict[str, np.ndarray]:
        if self._values is None:
            raise BackwardBeforeForwardError("backward called before forward")
        loss = self.output if loss is None else loss
        if self._values[loss].shape != ():
            raise NonScalarLossError(f"loss node {loss} has shape {self._values[loss].shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss] = np.ones((), dtype=self._values[loss].dtype)
        for node_id in range(loss, -1, -1):
            g = grads[node_id]
            node = self.nodes[node_id]
            if g is None or node.op in ("leaf", "const") or not self._requires_grad[node_id]:
                continue
            args = [self._values[i] for i in node.inputs]
            needs = [self._requires_grad[i] for i in node.inputs]
            input_grads = _BACKWARD[node.op](node, g, self._values[node_id],
                                             self._saved[node_id], args, needs)
            for i, gi in zip(node.inputs, input_grads):
                if gi is None or not self._requires_grad[i]:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        result = {}
        for name, node_id in self.leaves.items():
            if not self.nodes[node_id].differentiable:
                continue
            g = grads[node_id]
            result[name] = np.zeros_like(self._values[node_id]) if g is None else g
        return result


def forward_eval(graph: Graph, leaf_bindings: dict[str, Any], output: int | None = None) -> np.ndarray:
    return graph.forward(leaf_bindings, output)


def backward_grad(graph: Graph, loss_node: int | None = None) -> dict[str, np.ndarray]:
    return graph.backward(loss_node)


def finite_diff_check(graph: Graph, leaf: str, h: float = 1e-5,
                      bindings: dict[str, Any] | None = None, loss: int | None = None) -> float:
    """Max relative error between backward_grad and central differences.

    The step for element ``i`` is ``h * (1 + |x_i|)``.  Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if bindings is None:
        if graph._bindings is None:
            raise BackwardBeforeForwardError("no bindings recorded; pass bindings explicitly")
        bindings = graph._bindings
    bindings = dict(bindings)
    graph.forward(bindings, loss)
    analytic = graph.backward(loss)[leaf]

    x0 = as_tensor(bindings[leaf]).copy()
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        step = h * (1.0 + abs(flat[i]))
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        bindings[leaf] = xp.reshape(x0.shape)
        fp = float(graph.forward(bindings, loss))
        bindings[leaf] = xm.reshape(x0.shape)
        fm = float(graph.forward(bindings, loss))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalOverflowError(-1, "finite-difference probe")
        numeric[i] = (fp - fm) / (xp[i] - xm[i])
    bindings[leaf] = x0
    graph.forward(bindings, loss)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# primitive forward rules: (node_id, node, *inputs) -> (output, saved)

def _same_shape(node_id, a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatchError(node_id, f"{op} operands {a.shape} vs {b.shape}")


def _f_affine(node_id, node, x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeMismatchError(node_id, f"affine expects (B,n),(n,m),(m,); got {x.shape},{w.shape},{b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatchError(node_id, f"affine dims {x.shape} @ {w.shape} + {b.shape}")
    return x @ w + b, None


def _f_relu(node_id, node, x):
    return np.maximum(x, 0), None


def _f_add(node_id, node, a, b):
    _same_shape(node_id, a, b, "add")
    return a + b, None


def _f_scale(node_id, node, a):
    return node.attrs["c"] * a, None


def _f_mul(node_id, node, a, b):
    _same_shape(node_id, a, b, "mul")
    return a * b, None


def _f_sum(node_id, node, a):
    return np.asarray(a.sum()), None


def _f_mean(node_id, node, a):
    if a.size == 0:
        raise ShapeMismatchError(node_id, "mean of empty tensor")
    return np.asarray(a.mean()), None


def _f_log(node_id, node, a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a), None


def _f_exp(node_id, node, a):
    with np.errstate(over="ignore"):
        return np.exp(a), None


def _f_max(node_id, node, a):
    axis = node.attrs["axis"]
    if a.ndim == 0:
        raise ShapeMismatchError(node_id, "max over a scalar")
    idx = np.argmax(a, axis=axis)
    return np.take_along_axis(a, np.expand_dims(idx, axis), axis).squeeze(axis), idx


def _f_clamp(node_id, node, a):
    return np.clip(a, node.attrs["lo"], node.attrs["hi"]), None


def _f_softmax_ce(node_id, node, logits, labels):
    if logits.ndim != 2:
        raise ShapeMismatchError(node_id, f"softmax_ce expects (B,C) logits, got {logits.shape}")
    labels = check_labels(labels, logits.shape[0], logits.shape[1])
    logp = log_softmax(logits)
    loss = (-logp[np.arange(logits.shape[0]), labels]).mean()
    return np.asarray(loss), np.exp(logp)


def _f_kl(node_id, node, s, t):
    _same_shape(node_id, s, t, "kl_temperature")
    if s.ndim != 2:
        raise ShapeMismatchError(node_id, f"kl_temperature expects (B,C), got {s.shape}")
    tau = node.attrs["tau"]
    log_ps = log_softmax(s / tau)
    log_pt = log_softmax(t / tau)
    pt = np.exp(log_pt)
    rows = (pt * (log_pt - log_ps)).sum(axis=-1)
    value = rows.mean()
    if node.attrs["tau_squared_scale"]:
        value = value * tau * tau
    return np.asarray(value), (np.exp(log_ps), pt, log_pt - log_ps, rows)


_FORWARD: dict[str, Callable] = {
    "affine": _f_affine, "relu": _f_relu, "add": _f_add, "scale": _f_scale,
    "mul": _f_mul, "sum": _f_sum, "mean": _f_mean, "log": _f_log, "exp": _f_exp,
    "max": _f_max, "clamp": _f_clamp, "softmax_ce": _f_softmax_ce,
    "kl_temperature": _f_kl,
}


# ---------------------------------------------------------------------------
# primitive backward rules: (node, upstream, output, saved, inputs, needs) -> input grads

def _b_affine(node, g, out, saved, args, needs):
    x, w, _ = args
    gx = g @ w.T if needs[0] else None
    gw = x.T @ g if needs[1] else None
    gb = g.sum(axis=0) if needs[2] else None
    return gx, gw, gb


def _b_relu(node, g, out, saved, args, needs):
    # derivative at exactly 0 is 0
    return (g * (args[0] > 0),)


def _b_add(node, g, out, saved, args, needs):
    return g, g


def _b_scale(node, g, out, saved, args, needs):
    return (node.attrs["c"] * g,)


def _b_mul(node, g, out, saved, args, needs):
    a, b = args
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


def _b_sum(node, g, out, saved, args, needs):
    return (np.full_like(args[0], g),)


def _b_mean(node, g, out, saved, args, needs):
    a = args[0]
    return (np.full_like(a, g / a.size),)


def _b_log(node, g, out, saved, args, needs):
    return (g / args[0],)


def _b_exp(node, g, out, saved, args, needs):
    return (g * out,)


def _b_max(node, g, out, saved, args, needs):
    a = args[0]
    axis = node.attrs["axis"]
    grad = np.zeros_like(a)
    np.put_along_axis(grad, np.expand_dims(saved, axis), np.expand_dims(g, axis), axis)
    return (grad,)


def _b_clamp(node, g, out, saved, args, needs):
    a = args[0]
    inside = (a >= node.attrs["lo"]) & (a <= node.attrs["hi"])
    return (g * inside,)


def _b_softmax_ce(node, g, out, probs, args, needs):
    logits, labels = args
    grad = probs.copy()
    grad[np.arange(logits.shape[0]), labels] -= 1.0
    return grad * (g / logits.shape[0]), None


def _b_kl(node, g, out, saved, args, needs):
    ps, pt, log_ratio, rows = saved
    tau = node.attrs["tau"]
    batch = ps.shape[0]
    coef = g / (tau * batch)
    if node.attrs["tau_squared_scale"]:
        coef = coef * tau * tau
    gs = coef * (ps - pt) if needs[0] else None
    gt = None
    if needs[1] and not node.attrs["detach_teacher"]:
        gt = coef * pt * (log_ratio - rows[:, None])
    return gs, gt


_BACKWARD: dict[str, Callable] = {
    "affine": _b_affine, "relu": _b_relu, "add": _b_add, "scale": _b_scale,
    "mul": _b_mul, "sum": _b_sum, "mean": _b_mean, "log": _b_log, "exp": _b_exp,
    "max": _b_max, "clamp": _b_clamp, "softmax_ce": _b_softmax_ce,
    "kl_temperature": _b_kl,
}
