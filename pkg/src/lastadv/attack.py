"""L-infinity sign-gradient attacks: FGSM (one step) and PGD-K with restarts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import Graph, as_tensor, per_example_ce
from .data import Batch
from .net import NetworkSpec, ParamVector, add_classifier, add_param_leaves, param_bindings


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    steps: int = 1
    restarts: int = 1
    init: str = "uniform"           # "uniform" on (-eps, eps) or "zero"
    pixel_box: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise AttackError("epsilon must be non-negative")
        if not self.alpha > 0:
            raise AttackError("alpha must be positive")
        if self.steps < 1:
            raise AttackError("steps must be at least 1")
        if self.restarts < 1:
            raise AttackError("restarts must be at least 1")
        if self.init not in ("uniform", "zero"):
            raise AttackError(f"unknown init {self.init!r}")
        if self.pixel_box is not None:
            lo, hi = self.pixel_box
            if lo > hi:
                raise AttackError("pixel_box lower bound exceeds upper bound")
            object.__setattr__(self, "pixel_box", (float(lo), float(hi)))

    @property
    def label(self) -> str:
        return f"PGD-{self.steps}x{self.restarts}@{self.epsilon:.6g}"


def fgsm(epsilon: float, alpha: float | None = None, **kw) -> AttackConfig:
    """Single-step attack with uniform start (alpha defaults to 1.25 eps)."""
    alpha = 1.25 * epsilon if alpha is None else alpha
    return AttackConfig(epsilon, max(alpha, 1e-12), 1, 1, kw.pop("init", "uniform"), **kw)


def pgd(epsilon: float, steps: int = 10, restarts: int = 1, alpha: float | None = None, **kw) -> AttackConfig:
    """PGD-K; alpha defaults to eps / 4 (2/255 at eps = 8/255)."""
    alpha = epsilon / 4 if alpha is None else alpha
    return AttackConfig(epsilon, max(alpha, 1e-12), steps, restarts, kw.pop("init", "uniform"), **kw)


@dataclass
class Perturbation:
    delta: np.ndarray
    loss: np.ndarray | None = None     # per-example attack loss of the returned delta


class AttackGraph:
    """Input-gradient graph for one network, reused across steps."""

    def __init__(self, spec: NetworkSpec, params: ParamVector):
        self.spec = spec
        g = Graph()
        pnodes = add_param_leaves(g, spec, differentiable=False)
        self.x = g.leaf("x", differentiable=True)
        self.labels = g.leaf("labels", differentiable=False)
        self.logits = add_classifier(g, spec, self.x, pnodes)
        self.loss = g.softmax_ce(self.logits, self.labels)
        self.graph = g
        self.bindings = dict(param_bindings(params))

    def input_grad(self, inputs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of the mean loss w.r.t. inputs, and per-example losses."""
        self.bindings["x"] = inputs
        self.bindings["labels"] = labels
        self.graph.forward(self.bindings, self.loss)
        grad = self.graph.backward(self.loss)["x"]
        return grad, per_example_ce(self.graph.value(self.logits), labels)

    def per_example_loss(self, inputs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.bindings["x"] = inputs
        self.bindings["labels"] = labels
        logits = self.graph.forward(self.bindings, self.logits)
        return per_example_ce(logits, labels), logits


def apply_perturbation(inputs, perturbation, pixel_box=None) -> np.ndarray:
    u = as_tensor(inputs)
    delta = perturbation.delta if isinstance(perturbation, Perturbation) else as_tensor(perturbation)
    if u.shape != delta.shape:
        raise AttackError(f"shape mismatch {u.shape} vs {delta.shape}")
    out = u + delta
    if pixel_box is not None:
        out = np.clip(out, pixel_box[0], pixel_box[1])
    return out


def _project(u: np.ndarray, delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    eps = cfg.epsilon
    delta = np.maximum(np.minimum(delta, eps), -eps)
    if cfg.pixel_box is not None:
        delta = np.clip(u + delta, cfg.pixel_box[0], cfg.pixel_box[1]) - u
    return delta


def restart_iterates(spec: NetworkSpec, params: ParamVector, batch: Batch, cfg: AttackConfig,
                     seed: int, graph: AttackGraph | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(delta, per_example_loss, logits)`` for each restart's final iterate.

    Restart ``r`` draws its start from ``default_rng([seed, r])``, so the first
    ``R`` restarts are the same whatever the total restart count.
    """
    u = as_tensor(batch.inputs)
    labels = np.asarray(batch.labels)
    if u.ndim != 2 or u.shape[1] != spec.input_dim:
        raise AttackError(f"inputs {u.shape} do not match input_dim {spec.input_dim}")
    if cfg.pixel_box is not None:
        lo, hi = cfg.pixel_box
        if np.any(u < lo) or np.any(u > hi):
            raise AttackError("inputs lie outside pixel_box")
    graph = graph or AttackGraph(spec, params)
    eps = cfg.epsilon
    for r in range(cfg.restarts):
        if cfg.init == "uniform" and eps > 0:
            delta = np.random.default_rng([seed, r]).uniform(-eps, eps, size=u.shape).astype(u.dtype)
        else:
            delta = np.zeros_like(u)
        delta = _project(u, delta, cfg)
        for _ in range(cfg.steps):
            grad, _ = graph.input_grad(u + delta, labels)
            # np.sign(0) == 0 keeps zero-gradient coordinates fixed
            delta = _project(u, delta + cfg.alpha * np.sign(grad), cfg)
        loss, logits = graph.per_example_loss(apply_perturbation(u, delta, cfg.pixel_box), labels)
        yield delta, loss, logits


def craft_perturbation(spec: NetworkSpec, params: ParamVector, batch: Batch, cfg: AttackConfig,
                       seed: int = 0) -> Perturbation:
    """Run ``cfg.restarts`` PGD restarts; keep the highest-loss iterate per example."""
    best_delta = best_loss = None
    for delta, loss, _ in restart_iterates(spec, params, batch, cfg, seed):
        if best_delta is None:
            best_delta, best_loss = delta, loss
            continue
        better = loss > best_loss
        best_delta = np.where(better[:, None], delta, best_delta)
        best_loss = np.where(better, loss, best_loss)
    return Perturbation(best_delta, best_loss)
