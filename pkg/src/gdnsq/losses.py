"""Distillation distance, exterior-point potential and the temperature schedule.

The training loss is  L = t_q * c_r * P + t_r * d  with

* d: batch-mean Jeffreys divergence J(p, q) = KL(p||q) + KL(q||p) between
  student and teacher softmax outputs (nats),
* P: mean hinge excess of the smooth bit-width estimates over their
  targets, weight sites and activation sites averaged separately and
  summed,
* t_q(n) = lambda_n * n and t_r = 1, n the batch index,
* c_r(n): running mean of the d values observed on batches 0..n-1
  (defined as 1 at n = 0, where the sum is empty).

Probabilities are floored at 1e-12 and renormalized before any log so the
divergence stays finite for near-one-hot teachers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, NumericError, ShapeError
from .tensor import Tensor

PROB_FLOOR = 1e-12


def floor_normalize(p: np.ndarray) -> np.ndarray:
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl(p, q) -> float:
    """KL(p||q) = sum p_i log(p_i / q_i), in nats."""
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"kl support mismatch: {p.shape} vs {q.shape}")
    p, q = floor_normalize(p), floor_normalize(q)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def jeffreys(p, q) -> float:
    """Symmetrized KL: J(p, q) = KL(p||q) + KL(q||p)."""
    return kl(p, q) + kl(q, p)


def _floored_probs_t(p: Tensor) -> Tensor:
    pf = T.maximum(p, PROB_FLOOR)
    z = T.sum_(pf, axis=1, keepdims=True)
    return T.div(pf, T.broadcast_to(z, p.shape))


def jeffreys_rows(p: Tensor, q_const: np.ndarray) -> Tensor:
    """Per-row J(p_b, q_b) for a [B, C] student tensor vs constant teacher."""
    q = floor_normalize(q_const)
    pf = _floored_probs_t(p)
    qc = T.constant(q)
    lq = T.constant(np.log(q))
    diff = T.sub(pf, qc)
    logdiff = T.sub(T.log(pf), lq)
    return T.sum_(T.mul(diff, logdiff), axis=1)


def hard_label_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy against integer class labels."""
    p = _floored_probs_t(T.softmax_rows(logits))
    return T.mean(T.neg(T.log(T.select_columns(p, labels))))


def potential(omega_w, omega_a, targets) -> float:
    """Mean hinge excess over targets, weight and activation groups summed."""
    ww, wa = list(omega_w), list(omega_a)
    if not ww or not wa:
        raise DomainError("potential needs at least one site in each group")
    tw, ta = targets
    pw = float(np.mean([max(0.0, w - tw) for w in ww]))
    pa = float(np.mean([max(0.0, a - ta) for a in wa]))
    return pw + pa


def potential_tensor(weight_fqs, act_fqs, targets) -> Tensor:
    """Graph version of the potential, built on the quantizers' parameters."""
    if not weight_fqs or not act_fqs:
        raise DomainError("potential needs at least one site in each group")
    tw, ta = targets

    def group(fqs, target):
        hinges = [T.maximum(T.sub(fq.bitwidth_tensor(), float(target)), 0.0)
                  for fq in fqs]
        acc = hinges[0]
        for h in hinges[1:]:
            acc = T.add(acc, h)
        return T.mul(acc, 1.0 / len(hinges))

    return T.add(group(weight_fqs, tw), group(act_fqs, ta))


@dataclass
class LossState:
    """Schedule counters shared by consecutive batches."""

    targets: tuple  # (omega_w*, omega_a*)
    tq_init: float = 0.0  # large value disables gradual scaling (ablation)
    step_n: int = 0
    t_q: float = 0.0
    t_r: float = 1.0
    c_r: float = 1.0  # neutral before any distance is observed
    c_r_sum: float = 0.0

    def __post_init__(self):
        self.t_q = self.tq_init


def update_schedule(state: LossState, lam: float, batch_d: float) -> LossState:
    """Advance the temperature policy after one batch.

    Increments n, sets t_q = lambda_n * n (plus the fixed offset) and folds
    the batch's distillation distance into the running mean c_r. The
    updated c_r is what the *next* batch's loss uses: c_r(n) averages the
    distances of batches 0..n-1 only.
    """
    state.c_r_sum += float(batch_d)
    state.step_n += 1
    state.t_q = state.tq_init + lam * state.step_n
    state.c_r = state.c_r_sum / state.step_n
    return state


def distill_rows(student_logits: Tensor, teacher_logits: np.ndarray,
                 labels=None, kind="jeffreys") -> Tensor:
    """Per-sample distillation distance as a graph tensor of shape [B]."""
    p = T.softmax_rows(student_logits)
    if kind == "jeffreys":
        return jeffreys_rows(p, softmax(teacher_logits))
    if kind == "cross_entropy":
        # asymmetric teacher-student CE: -sum q log p
        q = T.constant(floor_normalize(softmax(teacher_logits)))
        pf = _floored_probs_t(p)
        return T.neg(T.sum_(T.mul(q, T.log(pf)), axis=1))
    if kind == "hard_label_ce":
        if labels is None:
            raise DomainError("hard_label_ce needs ground-truth labels")
        pf = _floored_probs_t(p)
        return T.neg(T.log(T.select_columns(pf, labels)))
    raise DomainError(f"unknown distillation kind {kind!r}")


def total_loss(student_logits: Tensor, teacher_logits: np.ndarray,
               weight_fqs, act_fqs, state: LossState,
               labels=None, kind="jeffreys"):
    """Exterior-point loss t_q*c_r*P + t_r*d for one batch.

    Returns (loss tensor, info dict); info carries the scalar d and P
    values for the schedule update and metrics.
    """
    if not np.all(np.isfinite(student_logits.data)):
        bad = int(np.argmax(~np.isfinite(student_logits.data).all(axis=1)))
        raise NumericError(f"non-finite student logits at batch row {bad}")
    if not np.all(np.isfinite(teacher_logits)):
        bad = int(np.argmax(~np.isfinite(np.asarray(teacher_logits)).all(axis=1)))
        raise NumericError(f"non-finite teacher logits at batch row {bad}")
    d_rows = distill_rows(student_logits, teacher_logits, labels=labels, kind=kind)
    d = T.mean(d_rows)
    p_t = potential_tensor(weight_fqs, act_fqs, state.targets)
    loss = T.add(T.mul(p_t, state.t_q * state.c_r), T.mul(d, state.t_r))
    info = {"d": float(d.data), "P": float(p_t.data),
            "t_q": state.t_q, "c_r": state.c_r}
    return loss, info
