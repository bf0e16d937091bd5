"""Loss terms for joint feature/decoder optimization.

Five terms: soft-SDF binary cross entropy, eikonal regularization (in
fields.py, driven from the trainer), drift regularization against a
parameter snapshot with accumulated importance weights, and cross entropy
for class and instance heads. Every term reports both its value and the
exact gradients the trainer needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

_LOG_CLAMP = 1e-12


@dataclass
class LossWeights:
    """Composite-loss hyperparameters; which terms apply depends on mode."""

    lambda2: float = 0.3  # eikonal
    lambda3: float = 0.0  # forgetting (incremental modes)
    lambda4: float = 1.0  # semantic cross entropy
    lambda5: float = 0.0  # instance cross entropy (panoptic modes)
    alpha: float = 0.05  # soft-SDF sigmoid scale [m]
    beta_m: float = 1000.0  # importance accumulation cap

    def __post_init__(self):
        if not np.isfinite(
            [self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.alpha, self.beta_m]
        ).all():
            raise ValueError("loss weights must be finite")
        if self.alpha <= 0.0 or self.beta_m <= 0.0:
            raise ValueError("alpha and beta_m must be positive")


def sdf_loss(pred: np.ndarray, d: np.ndarray, alpha: float):
    """Binary cross entropy between logistic-mapped prediction and target.

    p = logistic(pred/alpha), y = logistic(d/alpha); batch-mean BCE with the
    logs clamped at 1e-12. Returns (loss, d loss/d pred).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    n = len(pred)
    if n == 0:
        return 0.0, np.empty(0)
    y = expit(d / alpha)
    p = expit(pred / alpha)
    q = expit(-pred / alpha)  # 1 - p without cancellation
    loss = -np.mean(
        y * np.log(np.maximum(p, _LOG_CLAMP)) + (1.0 - y) * np.log(np.maximum(q, _LOG_CLAMP))
    )
    d_pred = (p - y) / (alpha * n)
    return float(loss), d_pred


def cross_entropy_loss(logits: np.ndarray, targets: np.ndarray):
    """Batch-mean -log softmax(logits)[target]; returns (loss, d logits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if n == 0:
        return 0.0, np.empty((0, c))
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError("target class out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), targets]))
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    d_logits = probs
    d_logits[np.arange(n), targets] -= 1.0
    d_logits /= n
    return loss, d_logits


def instance_targets(class_ids: np.ndarray, dense_instance_ids: np.ndarray, thing_ids) -> np.ndarray:
    """Instance-head targets: dense id for thing classes, 0 for stuff."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    dense = np.asarray(dense_instance_ids, dtype=np.int64)
    is_thing = np.isin(class_ids, np.fromiter(thing_ids, dtype=np.int64, count=len(thing_ids)))
    return np.where(is_thing, dense, 0)


class ImportanceStore:
    """Per-parameter importance weights and the previous-task snapshot.

    Tensors are registered by name; feature pools may grow between scans, in
    which case new rows start with zero importance and a snapshot equal to
    their initialization (zero drift at birth).
    """

    def __init__(self, beta_max: float):
        self.beta_max = float(beta_max)
        self.beta: dict[str, np.ndarray] = {}
        self.snapshot: dict[str, np.ndarray] = {}

    def ensure(self, name: str, live: np.ndarray):
        if name not in self.beta:
            self.beta[name] = np.zeros_like(live)
            self.snapshot[name] = live.copy()
            return
        b = self.beta[name]
        if b.shape != live.shape:
            if b.ndim != live.ndim or live.shape[0] < b.shape[0]:
                raise ValueError(f"shape drift for {name}: {b.shape} vs {live.shape}")
            extra = live.shape[0] - b.shape[0]
            pad = (extra,) + b.shape[1:]
            self.beta[name] = np.concatenate([b, np.zeros(pad)], axis=0)
            self.snapshot[name] = np.concatenate(
                [self.snapshot[name], live[b.shape[0] :].copy()], axis=0
            )

    def accumulate(self, name: str, live: np.ndarray, grad: np.ndarray):
        """beta += |d L1 / d theta|, capped at beta_max."""
        self.ensure(name, live)
        b = self.beta[name]
        if b.shape != grad.shape:
            raise ValueError(f"gradient shape drift for {name}")
        np.minimum(b + np.abs(grad), self.beta_max, out=b)

    def accumulate_rows(self, name: str, live: np.ndarray, rows: np.ndarray, grad_rows: np.ndarray):
        """Row-sparse variant of accumulate (rows unique, grad row-aligned)."""
        self.ensure(name, live)
        if rows.size == 0:
            return
        b = self.beta[name]
        b[rows] = np.minimum(b[rows] + np.abs(grad_rows), self.beta_max)

    def take_snapshot(self, name: str, live: np.ndarray):
        self.ensure(name, live)
        self.snapshot[name][...] = live

    def penalty(self, name: str, live: np.ndarray):
        """sum beta * (live - snapshot)^2 and its gradient w.r.t. live."""
        self.ensure(name, live)
        b = self.beta[name]
        s = self.snapshot[name]
        if b.shape != live.shape:
            raise ValueError(f"shape drift for {name}: {b.shape} vs {live.shape}")
        diff = live - s
        return float(np.sum(b * diff * diff)), 2.0 * b * diff


def forgetting_loss(named_params, store: ImportanceStore):
    """Total drift penalty over (name, tensor) pairs; returns (loss, grads)."""
    total = 0.0
    grads = {}
    for name, tensor in named_params:
        val, g = store.penalty(name, tensor)
        total += val
        grads[name] = g
    return total, grads
