"""Softmax, cross-entropy and KL mimicry losses with their logit gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .nn import ModelParams, backward, forward

LOG_CLAMP = 1e-12


@dataclass
class LossReport:
    ce_local: float = 0.0
    kl_mutual: float = 0.0
    ce_public: float = 0.0
    round: int = 0


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def ce_loss_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    batch = logits.shape[0]
    rows = np.arange(batch)
    logp = log_softmax(logits)
    loss = float(-logp[rows, labels].mean())
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return loss, d / batch


def kl_divergence(p_teacher: np.ndarray, p_student: np.ndarray) -> np.ndarray | float:
    """KL(teacher || student) along the last axis; student clamped at 1e-12."""
    pt = np.asarray(p_teacher, dtype=np.float64)
    ps = np.maximum(np.asarray(p_student, dtype=np.float64), LOG_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pt > 0, pt * (np.log(np.where(pt > 0, pt, 1.0)) - np.log(ps)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def kl_loss_grad(logits: np.ndarray, p_teacher: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row KL(teacher || softmax(logits)) and its per-row logit gradient.

    Clamped student entries contribute a constant, so they drop out of the
    gradient exactly.
    """
    ps = softmax(logits)
    pt = np.asarray(p_teacher, dtype=np.float64)
    kl = kl_divergence(pt, ps)
    live = ps >= LOG_CLAMP
    mass = (pt * live).sum(axis=1, keepdims=True)
    grad = ps * mass - pt * live
    return np.atleast_1d(kl), grad


@dataclass
class PublicBatch:
    """A peer's public batch as seen by a student: inputs, labels, teacher posteriors."""

    x: np.ndarray
    y: np.ndarray
    p_teacher: np.ndarray
    acc: float


def resolve_signals(signals: Sequence, public_data: Mapping) -> list[PublicBatch]:
    """Look up the public samples each signal refers to.

    ``public_data`` maps sender id -> LabeledSet-like object exposing
    ``rows_for(ids)``, ``x`` and ``y``.
    """
    out = []
    for sig in signals:
        if sig.sender not in public_data:
            raise KeyError(f"no public data registered for sender {sig.sender}")
        pub = public_data[sig.sender]
        rows = pub.rows_for(sig.ids)
        pt = np.asarray(sig.soft_labels, dtype=np.float64)
        pt = pt / pt.sum(axis=1, keepdims=True)
        out.append(PublicBatch(pub.x[rows], pub.y[rows], pt, float(sig.acc)))
    return out


def mutual_grad(
    model: ModelParams,
    signals: Sequence,
    public_data: Mapping,
    kl_weight: float = 1.0,
    ce_weight: float = 1.0,
) -> tuple[np.ndarray, LossReport]:
    """Gradient of the mutual-learning objective over the received signals.

    The objective is the average over K signals of
    ``kl_weight * acc_j * mean_b KL(p_j || p_i) + ce_weight * CE(f_i(x_j), y_j)``.
    Teacher posteriors are constants. All batches go through one forward and
    one backward pass.
    """
    if not signals:
        raise ValueError("mutual_grad needs at least one peer signal")
    batches = resolve_signals(signals, public_data)
    return mutual_grad_from_batches(model, batches, kl_weight, ce_weight)


def mutual_grad_from_batches(model, batches, kl_weight=1.0, ce_weight=1.0):
    k = len(batches)
    x = np.concatenate([b.x for b in batches])
    logits, cache = forward(model, x)
    dlogits = np.empty_like(logits)
    kl_total = ce_total = 0.0
    start = 0
    for b in batches:
        n = len(b.y)
        sl = slice(start, start + n)
        kl_rows, kl_g = kl_loss_grad(logits[sl], b.p_teacher)
        ce, ce_g = ce_loss_grad(logits[sl], b.y)
        kl_total += b.acc * float(kl_rows.mean())
        ce_total += ce
        dlogits[sl] = (kl_weight * b.acc / n) * kl_g + ce_weight * ce_g
        start += n
    dlogits /= k
    grad = backward(model, cache, dlogits)
    return grad, LossReport(kl_mutual=kl_total / k, ce_public=ce_total / k)
