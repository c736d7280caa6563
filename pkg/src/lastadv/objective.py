"""Training and attack objectives.

Each loss has a numeric form (arrays in, float out) and a graph form used
when gradients are needed.  Both go through the same kernels, so values
agree to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Graph, as_tensor, per_example_ce, per_example_kl
from .data import Batch

DEFAULT_MU = 0.95
DEFAULT_TAU = 6.0


@dataclass(frozen=True)
class SDConfig:
    """Self-distillation settings.

    ``mu`` weights the clean/adversarial KL term against cross-entropy on the
    adversarial logits; ``tau`` softens both distributions.
    """

    mu: float = DEFAULT_MU
    tau: float = DEFAULT_TAU
    detach_clean: bool = True
    tau_squared_scale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must lie in [0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def cross_entropy(logits, labels) -> float:
    logits = as_tensor(logits)
    return float(per_example_ce(logits, labels).mean())


def kl_temperature(student_logits, teacher_logits, tau: float, tau_squared_scale: bool = False) -> float:
    """Mean KL(softmax(teacher/tau) || softmax(student/tau))."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    s, t = as_tensor(student_logits), as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {t.shape}")
    value = per_example_kl(s, t, tau).mean()
    if tau_squared_scale:
        value = value * tau * tau
    return float(value)


def sd_loss(clean_logits, adv_logits, labels, sd: SDConfig) -> float:
    kl = kl_temperature(adv_logits, clean_logits, sd.tau, sd.tau_squared_scale)
    ce = cross_entropy(adv_logits, labels)
    # same operation order as add_sd_loss
    return float(sd.mu * kl + (1.0 - sd.mu) * ce)


# -- graph forms -------------------------------------------------------------

def add_ce_loss(g: Graph, logits: int, labels: int) -> int:
    return g.softmax_ce(logits, labels)


def add_sd_loss(g: Graph, clean_logits: int, adv_logits: int, labels: int, sd: SDConfig) -> int:
    kl = g.kl_temperature(adv_logits, clean_logits, sd.tau,
                          detach_teacher=sd.detach_clean, tau_squared_scale=sd.tau_squared_scale)
    ce = g.softmax_ce(adv_logits, labels)
    return g.add(g.scale(kl, sd.mu), g.scale(ce, 1.0 - sd.mu))


# -- mixup -------------------------------------------------------------------

def mixup_batch(batch_a: Batch, batch_b: Batch, lam=None, seed: int = 0) -> Batch:
    """Blend two batches; labels come from ``batch_a``.

    ``lam`` may be a scalar or per-example array in [0.5, 1]; when omitted it
    is drawn uniformly from [0.5, 1] per example.
    """
    ua, ub = as_tensor(batch_a.inputs), as_tensor(batch_b.inputs)
    if ua.shape != ub.shape:
        raise ValueError(f"shape mismatch {ua.shape} vs {ub.shape}")
    if lam is None:
        lam = np.random.default_rng(seed).uniform(0.5, 1.0, size=ua.shape[0])
    lam = np.asarray(lam, dtype=ua.dtype)
    if np.any(lam < 0.5) or np.any(lam > 1.0):
        raise ValueError("mixup coefficient must lie in [0.5, 1]")
    if lam.ndim == 1:
        lam = lam[:, None]
    return Batch(lam * ua + (1.0 - lam) * ub, np.array(batch_a.labels), batch_a.index)
