"""Accuracy under attack, transfer matrices, loss landscapes and gradient maps."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, AttackGraph, apply_perturbation, restart_iterates
from .autograd import as_tensor, per_example_ce
from .data import Batch, Dataset, sequential_batches
from .net import NetworkSpec, ParamVector, predict_logits
from .objective import mixup_batch

EVAL_BATCH = 256


def _check_nonempty(dataset: Dataset):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")


def _predict(spec, params, inputs) -> np.ndarray:
    # argmax returns the lowest index on ties
    return np.argmax(predict_logits(spec, params, inputs), axis=1)


def standard_accuracy(spec: NetworkSpec, params: ParamVector, dataset: Dataset,
                      batch_size: int = EVAL_BATCH) -> float:
    _check_nonempty(dataset)
    correct = 0
    for batch in sequential_batches(dataset, batch_size):
        correct += int((_predict(spec, params, batch.inputs) == batch.labels).sum())
    return 100.0 * correct / len(dataset)


@dataclass
class RobustResult:
    accuracy: float          # percent of examples correct under every restart
    loss: float              # mean per-example loss of the highest-loss restart
    correct: np.ndarray      # per-example robustness mask


def _batch_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _attack_batch(spec, params, batch, attack, seed):
    graph = AttackGraph(spec, params)
    robust = np.ones(len(batch), dtype=bool)
    worst = np.full(len(batch), -np.inf)
    deltas = []
    for delta, loss, logits in restart_iterates(spec, params, batch, attack, seed, graph):
        robust &= np.argmax(logits, axis=1) == batch.labels
        worst = np.maximum(worst, loss)
        deltas.append(delta)
    return robust, worst, deltas


def robust_evaluation(spec: NetworkSpec, params: ParamVector, dataset: Dataset, attack: AttackConfig,
                      seed: int = 0, batch_size: int = EVAL_BATCH, workers: int = 1) -> RobustResult:
    """An example counts as robust only if it stays correct under every restart."""
    _check_nonempty(dataset)
    batches = list(sequential_batches(dataset, batch_size))

    def work(item):
        k, batch = item
        robust, worst, _ = _attack_batch(spec, params, batch, attack, _batch_seed(seed, k))
        return robust, worst

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, enumerate(batches)))
    else:
        parts = [work(item) for item in enumerate(batches)]
    correct = np.concatenate([p[0] for p in parts])
    losses = np.concatenate([p[1] for p in parts])
    return RobustResult(100.0 * int(correct.sum()) / len(dataset), float(losses.mean()), correct)


def robust_accuracy(spec: NetworkSpec, params: ParamVector, dataset: Dataset, attack: AttackConfig,
                    seed: int = 0, batch_size: int = EVAL_BATCH, workers: int = 1) -> float:
    return robust_evaluation(spec, params, dataset, attack, seed, batch_size, workers).accuracy


# ---------------------------------------------------------------------------
# transfer attacks

@dataclass
class TransferMatrix:
    sources: list[str]
    targets: list[str]
    ra: np.ndarray
    attack: AttackConfig

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["source", *self.targets])
            for name, row in zip(self.sources, self.ra):
                w.writerow([name, *(f"{v:.4f}" for v in row)])


def transfer_matrix(models: list[tuple[str, NetworkSpec, ParamVector]], dataset: Dataset,
                    attack: AttackConfig, seed: int = 0, standard: tuple[str, NetworkSpec, ParamVector] | None = None,
                    batch_size: int = EVAL_BATCH) -> TransferMatrix:
    """Entry (s, t): RA of target t on examples crafted against source s.

    ``standard`` adds an extra source row for a clean-trained model.
    """
    _check_nonempty(dataset)
    if not models:
        raise ValueError("need at least one model")
    dims = {spec.input_dim for _, spec, _ in models}
    if standard is not None:
        dims.add(standard[1].input_dim)
    if len(dims) != 1 or dataset.dim not in dims:
        raise ValueError(f"incompatible input shapes: models {sorted(dims)}, data {dataset.dim}")
    sources = list(models) + ([standard] if standard is not None else [])
    batches = list(sequential_batches(dataset, batch_size))
    ra = np.zeros((len(sources), len(models)))
    for s, (_, sspec, sparams) in enumerate(sources):
        counts = np.zeros(len(models), dtype=np.int64)
        for k, batch in enumerate(batches):
            _, _, deltas = _attack_batch(sspec, sparams, batch, attack, _batch_seed(seed, k))
            advs = [apply_perturbation(batch.inputs, d, attack.pixel_box) for d in deltas]
            for t, (_, tspec, tparams) in enumerate(models):
                ok = np.ones(len(batch), dtype=bool)
                for adv in advs:
                    ok &= _predict(tspec, tparams, adv) == batch.labels
                counts[t] += int(ok.sum())
        ra[s] = 100.0 * counts / len(dataset)
    names = [m[0] for m in sources]
    return TransferMatrix(names, [m[0] for m in models], ra, attack)


# ---------------------------------------------------------------------------
# loss landscape

@dataclass
class LandscapeGrid:
    xs: np.ndarray
    ys: np.ndarray
    losses: np.ndarray
    iota: np.ndarray          # sign of the clean input gradient
    o: np.ndarray             # Rademacher direction
    sample_id: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return float(self.losses.max() - self.losses.min())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "loss"])
            for i, x in enumerate(self.xs):
                for j, y in enumerate(self.ys):
                    w.writerow([repr(float(x)), repr(float(y)), repr(float(self.losses[i, j]))])

    def sidecar(self) -> dict:
        return {"gap": self.gap, "seed": self.seed, "sample": self.sample_id,
                "x_range": [float(self.xs.min()), float(self.xs.max())],
                "y_range": [float(self.ys.min()), float(self.ys.max())],
                "resolution": int(self.xs.size), **self.meta}

    def write(self, csv_path, json_path) -> None:
        self.to_csv(csv_path)
        Path(json_path).write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")


def grid_coefficients(extent: float, resolution: int) -> np.ndarray:
    """Evenly spaced points on [-extent, extent]; odd resolutions contain 0 exactly."""
    if resolution < 1:
        raise ValueError("resolution must be at least 1")
    if resolution == 1:
        return np.zeros(1)
    xs = extent * np.linspace(-1.0, 1.0, resolution)
    if resolution % 2:
        xs[resolution // 2] = 0.0
    return xs


def landscape_grid(spec: NetworkSpec, params: ParamVector, sample: tuple[np.ndarray, int],
                   extent: float = 0.25, resolution: int = 21, seed: int = 0,
                   sample_id: int = 0) -> LandscapeGrid:
    """Attack loss at ``u + x * iota + y * o`` over a square grid, unclamped."""
    u, label = sample
    u = as_tensor(u).reshape(1, -1)
    labels = np.array([int(label)])
    graph = AttackGraph(spec, params)
    grad, _ = graph.input_grad(u, labels)
    iota = np.sign(grad[0])
    o = np.random.default_rng(seed).choice(np.array([-1.0, 1.0]), size=u.shape[1])
    xs = grid_coefficients(extent, resolution)
    ys = grid_coefficients(extent, resolution)
    losses = np.empty((xs.size, ys.size))
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            probe = u + x * iota + y * o
            losses[i, j] = graph.per_example_loss(probe, labels)[0][0]
    return LandscapeGrid(xs, ys, losses, iota, o, sample_id, seed)


def clean_sample_loss(spec: NetworkSpec, params: ParamVector, sample: tuple[np.ndarray, int]) -> float:
    u, label = sample
    logits = predict_logits(spec, params, as_tensor(u).reshape(1, -1))
    return float(per_example_ce(logits, np.array([int(label)]))[0])


# ---------------------------------------------------------------------------
# input-gradient heat maps

def input_gradient_map(spec: NetworkSpec, params: ParamVector, sample: np.ndarray, label: int,
                       channels: int = 1) -> np.ndarray:
    """|d loss / d input| per channel, each channel min-max scaled to [0, 1].

    Returns shape ``(channels, D // channels)``; channels whose raw range is
    below 1e-12 come back as zeros.
    """
    u = as_tensor(sample).reshape(1, -1)
    if u.shape[1] % channels:
        raise ValueError(f"input dim {u.shape[1]} is not divisible by {channels} channels")
    grad, _ = AttackGraph(spec, params).input_grad(u, np.array([int(label)]))
    mag = np.abs(grad[0]).reshape(channels, -1)
    out = np.zeros_like(mag)
    for c in range(channels):
        lo, hi = mag[c].min(), mag[c].max()
        if hi - lo >= 1e-12:
            out[c] = (mag[c] - lo) / (hi - lo)
    return out


def sample_at(dataset: Dataset, index: int) -> tuple[np.ndarray, int]:
    if not 0 <= index < len(dataset):
        raise IndexError(f"sample index {index} out of range [0, {len(dataset)})")
    return dataset.inputs[index], int(dataset.labels[index])


def mixup_dataset(dataset: Dataset, seed: int) -> Dataset:
    """Pair each example with a shuffled partner and blend with lambda ~ U[0.5, 1]."""
    rng = np.random.default_rng(seed)
    partner = rng.permutation(len(dataset))
    a = Batch(dataset.inputs, dataset.labels)
    b = Batch(dataset.inputs[partner], dataset.labels[partner])
    mixed = mixup_batch(a, b, seed=int(rng.integers(2**31)))
    return Dataset(mixed.inputs, mixed.labels, dataset.num_classes, dataset.layout, "mixup")
