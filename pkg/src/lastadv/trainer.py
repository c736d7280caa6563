"""Adversarial training: the SAT baseline, proxy-guided LAST, and SWA.

LAST keeps the previous target parameters as a proxy ``omega``.  Each
iteration crafts a perturbation against the current target ``theta``, takes
one defense step from the proxy to get fast weights ``omega_fast``, and then
moves the target toward them::

    G       = theta - omega_fast
    omega'  = theta
    theta'  = theta - gamma * G  ==  (1 - gamma) * theta + gamma * omega_fast
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import seeding
from .attack import AttackConfig, apply_perturbation, craft_perturbation, pgd
from .autograd import Graph, GradError, as_tensor
from .data import Batch, Dataset, batch_iter
from .evaluator import robust_evaluation, standard_accuracy
from .net import (Checkpoint, NetworkSpec, ParamVector, add_classifier, add_param_leaves,
                  gradient_vector, init_params, param_bindings)
from .objective import SDConfig, add_ce_loss, add_sd_loss

logger = logging.getLogger(__name__)

MODES = ("SAT", "LAST", "SAT+SWA")
DEFAULT_GAMMA = 0.8
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4
COLLAPSE_EPOCHS = 3


@dataclass(frozen=True)
class Scheduler:
    kind: str = "constant"          # constant | cyclic | multistep
    lr: float = 0.1                 # base lr, or the peak for cyclic
    milestones: tuple[int, ...] = (100, 150)
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("constant", "cyclic", "multistep"):
            raise ValueError(f"unknown scheduler {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def schedule_lr(scheduler: Scheduler, epoch: float, epochs: int) -> float:
    """Learning rate at (possibly fractional) ``epoch`` of a run of ``epochs``.

    cyclic is a triangle from 0 up to ``lr`` at ``epochs / 2`` and back to 0.
    """
    if scheduler.kind == "constant":
        return scheduler.lr
    if scheduler.kind == "cyclic":
        half = epochs / 2.0
        if epoch <= half:
            return scheduler.lr * epoch / half
        return scheduler.lr * max(epochs - epoch, 0.0) / half
    passed = sum(1 for m in scheduler.milestones if epoch >= m)
    return scheduler.lr * scheduler.factor ** passed


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "LAST"
    epochs: int = 10
    scheduler: Scheduler = Scheduler()
    gamma: float = DEFAULT_GAMMA
    attack: AttackConfig = dataclasses.field(default_factory=lambda: AttackConfig(0.1, 0.125))
    eval_attack: AttackConfig | None = None      # defaults to PGD-10 at the training epsilon
    sd: SDConfig | None = None
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = 128
    proxy_step: str = "optimizer"    # "optimizer" (momentum + wd) or "bare"
    swa_start: int = 0
    swa_eval: str = "average"        # evaluate the SWA average or the raw theta
    eval_batch_size: int = 256
    eval_workers: int = 1
    seed: int = 0
    allow_zero_gamma: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        lo = 0.0 if self.allow_zero_gamma else np.nextafter(0.0, 1.0)
        if not lo <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.proxy_step not in ("optimizer", "bare"):
            raise ValueError("proxy_step must be 'optimizer' or 'bare'")
        if self.swa_eval not in ("average", "theta"):
            raise ValueError("swa_eval must be 'average' or 'theta'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def lr(self) -> float:
        return self.scheduler.lr

    def resolved_eval_attack(self) -> AttackConfig:
        if self.eval_attack is not None:
            return self.eval_attack
        eps = self.attack.epsilon
        return pgd(eps, steps=10, restarts=1, pixel_box=self.attack.pixel_box)


@dataclass
class TrainerState:
    theta: ParamVector
    momentum_buffer: ParamVector
    omega: ParamVector | None = None
    swa_average: ParamVector | None = None
    swa_count: int = 0
    iteration: int = 0
    epoch: int = 0
    # diagnostics from the most recent step
    fast_weights: ParamVector | None = None
    last_loss: float = float("nan")

    @classmethod
    def initial(cls, theta: ParamVector, mode: str) -> "TrainerState":
        zeros = theta.with_values(np.zeros_like(theta.values))
        omega = theta.copy() if mode == "LAST" else None
        return cls(theta=theta.copy(), momentum_buffer=zeros, omega=omega)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_standard_accuracy: float
    test_robust_accuracy: float
    test_robust_loss: float
    lr: float
    wall_time: float

    CSV_HEADER = "epoch,train_loss,sa,ra,robust_loss,lr,seconds"

    def csv_row(self, with_time: bool = False) -> str:
        seconds = f"{self.wall_time:.3f}" if with_time else ""
        return (f"{self.epoch},{self.train_loss:.10g},{self.test_standard_accuracy:.4f},"
                f"{self.test_robust_accuracy:.4f},{self.test_robust_loss:.10g},{self.lr:.10g},{seconds}")

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "sa": self.test_standard_accuracy, "ra": self.test_robust_accuracy,
                "robust_loss": self.test_robust_loss, "lr": self.lr, "seconds": self.wall_time}


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(params: ParamVector, grads, lr: float, momentum_buffer: ParamVector,
             momentum: float = DEFAULT_MOMENTUM, weight_decay: float = DEFAULT_WEIGHT_DECAY
             ) -> tuple[ParamVector, ParamVector]:
    """One SGD step: ``g' = g + wd*p; buf = m*buf + g'; p -= lr*buf``."""
    g = grads.values if isinstance(grads, ParamVector) else as_tensor(grads)
    if isinstance(grads, ParamVector) and not grads.same_layout(params):
        raise ValueError("gradient layout does not match parameters")
    if not momentum_buffer.same_layout(params) or g.shape != params.values.shape:
        raise ValueError("layout mismatch between parameters, gradient and momentum buffer")
    if weight_decay:
        g = g + weight_decay * params.values
    buf = momentum * momentum_buffer.values + g if momentum else g
    return params.with_values(params.values - lr * buf), momentum_buffer.with_values(buf)


# ---------------------------------------------------------------------------
# defense loss and gradient

class DefenseGraph:
    """Parameter-gradient graph for the defense loss (CE, or SD when configured)."""

    def __init__(self, spec: NetworkSpec, sd: SDConfig | None = None):
        self.spec = spec
        self.sd = sd
        g = Graph()
        pnodes = add_param_leaves(g, spec, differentiable=True)
        self.labels = g.leaf("labels", differentiable=False)
        adv = g.leaf("x_adv", differentiable=False)
        adv_logits = add_classifier(g, spec, adv, pnodes)
        if sd is None:
            self.loss = add_ce_loss(g, adv_logits, self.labels)
        else:
            clean = g.leaf("x_clean", differentiable=False)
            clean_logits = add_classifier(g, spec, clean, pnodes)
            self.loss = add_sd_loss(g, clean_logits, adv_logits, self.labels, sd)
        self.graph = g

    def loss_and_grad(self, params: ParamVector, adv_inputs, labels, clean_inputs=None) -> tuple[float, ParamVector]:
        bindings = {**param_bindings(params), "x_adv": adv_inputs, "labels": np.asarray(labels)}
        if self.sd is not None:
            if clean_inputs is None:
                raise ValueError("SD loss needs the clean inputs")
            bindings["x_clean"] = clean_inputs
        loss = float(self.graph.forward(bindings, self.loss))
        grads = self.graph.backward(self.loss)
        return loss, params.with_values(gradient_vector(grads, params.layout))


def _adversarial_inputs(state_params: ParamVector, spec: NetworkSpec, batch: Batch,
                        cfg: TrainConfig, seed: int, delta: np.ndarray | None) -> np.ndarray:
    if delta is None:
        delta = craft_perturbation(spec, state_params, batch, cfg.attack, seed).delta
    return apply_perturbation(batch.inputs, delta, cfg.attack.pixel_box)


def sat_step(state: TrainerState, batch: Batch, cfg: TrainConfig, spec: NetworkSpec, *,
             lr: float | None = None, seed: int = 0, delta: np.ndarray | None = None,
             defense: DefenseGraph | None = None) -> TrainerState:
    """Craft against theta, then one optimizer step on theta."""
    lr = cfg.lr if lr is None else lr
    defense = defense or DefenseGraph(spec, cfg.sd)
    adv = _adversarial_inputs(state.theta, spec, batch, cfg, seed, delta)
    loss, grad = defense.loss_and_grad(state.theta, adv, batch.labels, batch.inputs)
    theta, buf = sgd_step(state.theta, grad, lr, state.momentum_buffer, cfg.momentum, cfg.weight_decay)
    return dataclasses.replace(state, theta=theta, momentum_buffer=buf,
                               iteration=state.iteration + 1, last_loss=loss, fast_weights=None)


def last_step(state: TrainerState, batch: Batch, cfg: TrainConfig, spec: NetworkSpec, *,
              lr: float | None = None, seed: int = 0, delta: np.ndarray | None = None,
              defense: DefenseGraph | None = None) -> TrainerState:
    """One proxy-guided iteration.

    The perturbation targets theta; the defense gradient is taken at the
    proxy omega.  Theta moves along the segment toward the fast weights;
    that move never passes through the momentum buffer.
    """
    if state.omega is None:
        raise ValueError("LAST step needs an initialized proxy")
    lr = cfg.lr if lr is None else lr
    defense = defense or DefenseGraph(spec, cfg.sd)
    theta = state.theta
    adv = _adversarial_inputs(theta, spec, batch, cfg, seed, delta)
    loss, grad = defense.loss_and_grad(state.omega, adv, batch.labels, batch.inputs)
    if cfg.proxy_step == "optimizer":
        fast, buf = sgd_step(state.omega, grad, lr, state.momentum_buffer, cfg.momentum, cfg.weight_decay)
    else:
        fast, buf = state.omega.with_values(state.omega.values - lr * grad.values), state.momentum_buffer
    # convex form: gamma=1 lands exactly on the fast weights, gamma=0 leaves theta untouched
    new_theta = theta.with_values((1.0 - cfg.gamma) * theta.values + cfg.gamma * fast.values)
    return dataclasses.replace(state, theta=new_theta, omega=theta.copy(), momentum_buffer=buf,
                               iteration=state.iteration + 1, fast_weights=fast, last_loss=loss)


def swa_update(state: TrainerState) -> TrainerState:
    n = state.swa_count
    if n == 0:
        avg = state.theta.copy()
    else:
        avg = state.theta.with_values((state.swa_average.values * n + state.theta.values) / (n + 1))
    return dataclasses.replace(state, swa_average=avg, swa_count=n + 1)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    metrics: list[MetricsRecord]
    flags: list[str] = field(default_factory=list)
    aborted: bool = False
    diagnostic: str = ""

    @property
    def ra_collapsed(self) -> bool:
        return any(f.startswith("ra_collapse") for f in self.flags)


def checkpoint_metadata(cfg: TrainConfig, epoch: int) -> dict[str, str]:
    meta = {"seed": str(cfg.seed), "epoch": str(epoch), "mode": cfg.mode,
            "gamma": repr(cfg.gamma), "epsilon": repr(cfg.attack.epsilon)}
    if cfg.sd is not None:
        meta.update(mu=repr(cfg.sd.mu), tau=repr(cfg.sd.tau))
    return meta


def _eval_params(state: TrainerState, cfg: TrainConfig) -> ParamVector:
    if cfg.mode == "SAT+SWA" and cfg.swa_eval == "average" and state.swa_average is not None:
        return state.swa_average
    return state.theta


def train(cfg: TrainConfig, spec: NetworkSpec, train_set: Dataset, test_set: Dataset,
          init: ParamVector | None = None,
          on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    theta0 = init if init is not None else init_params(spec, seeding.derive_seed(cfg.seed, "init"))
    state = TrainerState.initial(theta0, cfg.mode)
    defense = DefenseGraph(spec, cfg.sd)
    step = last_step if cfg.mode == "LAST" else sat_step
    data_seed = seeding.derive_seed(cfg.seed, "data")
    attack_seed = seeding.derive_seed(cfg.seed, "attack")
    eval_seed = seeding.derive_seed(cfg.seed, "eval")
    eval_attack = cfg.resolved_eval_attack()
    n_batches = math.ceil(len(train_set) / cfg.batch_size)

    metrics: list[MetricsRecord] = []
    flags: list[str] = []
    best_ra, best_ckpt = -1.0, None
    zero_streak = 0
    lr = schedule_lr(cfg.scheduler, 0.0, cfg.epochs)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        try:
            for i, batch in enumerate(batch_iter(train_set, cfg.batch_size, data_seed, epoch)):
                lr = schedule_lr(cfg.scheduler, epoch + i / n_batches, cfg.epochs)
                seed = seeding.derive_seed(attack_seed, "attack", epoch, i)
                state = step(state, batch, cfg, spec, lr=lr, seed=seed, defense=defense)
                if not math.isfinite(state.last_loss):
                    raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {i}")
                losses.append(state.last_loss)
            if not np.isfinite(state.theta.values).all():
                raise FloatingPointError(f"non-finite parameters after epoch {epoch}")
        except (GradError, FloatingPointError) as exc:
            flags.append(f"non_finite_loss@{epoch}")
            diagnostic = f"aborted at epoch {epoch}: {exc}"
            logger.error(diagnostic)
            final = Checkpoint(spec, state.theta.copy(), checkpoint_metadata(cfg, epoch))
            return TrainResult(final, best_ckpt or final, metrics, flags, True, diagnostic)
        state = dataclasses.replace(state, epoch=epoch + 1)
        if cfg.mode == "SAT+SWA" and epoch >= cfg.swa_start:
            state = swa_update(state)

        params = _eval_params(state, cfg)
        sa = standard_accuracy(spec, params, test_set, cfg.eval_batch_size)
        rob = robust_evaluation(spec, params, test_set, eval_attack, eval_seed,
                                cfg.eval_batch_size, cfg.eval_workers)
        record = MetricsRecord(epoch, float(np.mean(losses)), sa, rob.accuracy, rob.loss, lr,
                               time.perf_counter() - t0)
        metrics.append(record)
        logger.info("epoch %d loss %.4f SA %.2f RA %.2f", epoch, record.train_loss, sa, rob.accuracy)
        if on_epoch is not None:
            on_epoch(record)

        zero_streak = zero_streak + 1 if rob.accuracy == 0.0 else 0
        if zero_streak == COLLAPSE_EPOCHS:
            flags.append(f"ra_collapse@{epoch}")
        if rob.accuracy > best_ra:
            best_ra = rob.accuracy
            best_ckpt = Checkpoint(spec, params.copy(), checkpoint_metadata(cfg, epoch))

    final = Checkpoint(spec, _eval_params(state, cfg).copy(), checkpoint_metadata(cfg, cfg.epochs - 1))
    return TrainResult(final, best_ckpt, metrics, flags)


# ---------------------------------------------------------------------------
# convergence harness for the proxy-guided update rule

class QuadraticProblem:
    """``0.5 * (theta - center)^T H (theta - center)``, H defaults to identity."""

    def __init__(self, center, curvature=None):
        self.center = as_tensor(center)
        self.curvature = None if curvature is None else as_tensor(curvature)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        r = theta - self.center
        return r if self.curvature is None else self.curvature @ r


class FixedPerturbationProblem:
    """Defense loss of a classifier on one batch with a frozen perturbation."""

    def __init__(self, spec: NetworkSpec, params: ParamVector, batch: Batch, delta: np.ndarray,
                 sd: SDConfig | None = None, pixel_box=(0.0, 1.0)):
        self.layout = params
        self.batch = batch
        self.adv = apply_perturbation(batch.inputs, delta, pixel_box)
        self.defense = DefenseGraph(spec, sd)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        params = self.layout.with_values(theta)
        return self.defense.loss_and_grad(params, self.adv, self.batch.labels, self.batch.inputs)[1].values


@dataclass
class HarnessTrace:
    step_norms: np.ndarray        # ||theta_{i+1} - theta_i||
    predicted_norms: np.ndarray   # gamma * ||omega_fast - theta_i||
    thetas: np.ndarray            # (steps + 1, n)
    identity_error: float         # max relative gap between the two norm columns
    trailing_distance: float      # max pairwise distance over the trailing window
    diverged: bool = False
    note: str = ""


def _rel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, np.abs(a - b) / denom, 0.0)


def cauchy_harness(gamma: float, beta: float, steps: int, problem, theta0,
                   window: int = 50, growth_limit: int = 50) -> HarnessTrace:
    """Run the proxy-guided rule with bare gradient proxy steps on ``problem``."""
    theta = as_tensor(theta0).copy()
    omega = theta.copy()
    thetas = [theta.copy()]
    step_norms, predicted = [], []
    diverged, note, growing = False, "", 0
    for i in range(steps):
        with np.errstate(over="raise", invalid="raise"):
            try:
                fast = omega - beta * problem.grad(omega)
                diff = theta - fast
                new_theta = theta - gamma * diff
            except FloatingPointError:
                diverged, note = True, f"overflow at step {i}"
                break
        step_norms.append(float(np.linalg.norm(new_theta - theta)))
        predicted.append(float(gamma * np.linalg.norm(fast - theta)))
        omega, theta = theta, new_theta
        thetas.append(theta.copy())
        if not np.isfinite(theta).all():
            diverged, note = True, f"non-finite iterate at step {i}"
            break
        growing = growing + 1 if len(step_norms) > 1 and step_norms[-1] > step_norms[-2] else 0
        if growing >= growth_limit:
            diverged, note = True, f"step norms grew for {growth_limit} consecutive steps (step {i})"
            break
    thetas_arr = np.array(thetas)
    sn, pn = np.array(step_norms), np.array(predicted)
    identity = float(_rel(sn, pn).max()) if sn.size else 0.0
    tail = thetas_arr[-min(window, len(thetas_arr)):]
    diffs = tail[:, None, :] - tail[None, :, :]
    with np.errstate(over="ignore", invalid="ignore"):   # diverged traces report inf
        trailing = float(np.sqrt((diffs ** 2).sum(-1)).max())
    return HarnessTrace(sn, pn, thetas_arr, identity, trailing, diverged, note)
