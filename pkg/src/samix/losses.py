"""Classification and generation objectives for mixup training.

All losses accept batched inputs (leading axis B) and return the batch
mean as a scalar Tensor. A single instance is the B=1 case; 1-d logits
or embeddings are promoted.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import ContractError, Tensor
from .mixer import MixMask

logger = logging.getLogger(__name__)

# incremented whenever every negative of a query was filtered out
DIAGNOSTICS: Counter = Counter()


@dataclass
class LossConfig:
    eta: float = 0.5
    temperature: float = 0.2
    epsilon: float = 0.1
    beta: float = 0.1
    queue_len: int = 512
    variance_sign: int = -1

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError(f"eta must lie in [0, 1], got {self.eta}")
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.beta < 0:
            raise ContractError(f"beta must be non-negative, got {self.beta}")
        if self.variance_sign not in (-1, 1):
            raise ContractError(f"variance_sign must be +1 or -1, got {self.variance_sign}")


class NegativeQueue:
    """FIFO ring buffer of unit-norm keys, with an optional label per key."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0:
            raise ContractError("queue capacity must be positive")
        self.capacity = capacity
        self.keys = np.zeros((capacity, dim))
        self.labels = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.filled = 0

    def __len__(self) -> int:
        return self.filled

    def enqueue(self, keys: np.ndarray, labels: np.ndarray | None = None) -> None:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("queue keys must be unit-norm within 1e-6")
        for n, k in enumerate(keys):
            self.keys[self.cursor] = k
            self.labels[self.cursor] = -1 if labels is None else int(labels[n])
            self.cursor = (self.cursor + 1) % self.capacity
            self.filled = min(self.filled + 1, self.capacity)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        if self.filled < self.capacity:
            return self.keys[: self.filled].copy(), self.labels[: self.filled].copy()
        return self.keys.copy(), self.labels.copy()


def _rows(x) -> Tensor:
    x = E.as_tensor(x)
    return E.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def _lam(lam, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()


def _pick(logp: Tensor, idx) -> Tensor:
    idx = np.broadcast_to(np.asarray(idx, dtype=np.int64), (logp.shape[0],))
    return E.getitem(logp, (np.arange(logp.shape[0]), idx))


def _queue_keys(queue) -> np.ndarray:
    keys = queue.snapshot()[0] if isinstance(queue, NegativeQueue) else np.atleast_2d(np.asarray(queue))
    if keys.shape[0] == 0:
        raise ContractError("infoNCE needs at least one negative key")
    return keys


# ---------------------------------------------------------------------------
# parametric


def ce(logits, y) -> Tensor:
    """Mean of ``-log softmax(logits)[y]``."""
    logits = _rows(logits)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (logits.shape[0],))
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise IndexError(f"class index out of range for {logits.shape[1]} classes: {y}")
    return E.scale(E.sum_(_pick(E.log_softmax(logits), y)), -1.0 / logits.shape[0])


def mixup_ce(logits, y_i, y_j, lam) -> Tensor:
    """``lam * ce(p, y_i) + (1 - lam) * ce(p, y_j)`` per sample, batch mean."""
    logits = _rows(logits)
    n = logits.shape[0]
    lam_b = _lam(lam, n)
    if np.any(lam_b < 0) or np.any(lam_b > 1):
        raise ContractError("lambda must lie in [0, 1]")
    logp = E.log_softmax(logits)
    per = E.add(E.mul(lam_b, _pick(logp, y_i)), E.mul(1.0 - lam_b, _pick(logp, y_j)))
    return E.scale(E.sum_(per), -1.0 / n)


def _binary_mix(diff: Tensor, lam_b: np.ndarray) -> Tensor:
    """Per-sample ``-lam log sig(d) - (1 - lam) log sig(-d)`` with d = l_a - l_b."""
    # log_softmax([d, 0]) = [log sig(d), log sig(-d)]
    zeros = Tensor(np.zeros((diff.shape[0], 1)))
    logp = E.log_softmax(E.concat([E.reshape(diff, (-1, 1)), zeros], axis=1), axis=1)
    return E.add(E.mul(lam_b, _pick(logp, 0)), E.mul(1.0 - lam_b, _pick(logp, 1)))


def pbce(logits, a, b, lam, same_class: str = "raise") -> Tensor:
    """Two-class renormalised cross-entropy over the logits of classes a, b.

    ``same_class='zero'`` makes pairs with ``a == b`` contribute zero (the
    renormalised softmax over a single class is exactly 1) instead of raising.
    """
    logits = _rows(logits)
    n = logits.shape[0]
    a = np.broadcast_to(np.asarray(a, dtype=np.int64), (n,))
    b = np.broadcast_to(np.asarray(b, dtype=np.int64), (n,))
    same = a == b
    if np.any(same) and same_class == "raise":
        raise ContractError("pBCE needs two distinct classes")
    lam_b = _lam(lam, n)
    diff = E.sub(_pick(logits, a), _pick(logits, b))
    per = _binary_mix(diff, lam_b)
    if np.any(same):
        per = E.mul(per, (~same).astype(np.float64))
    return E.scale(E.sum_(per), -1.0 / n)


# ---------------------------------------------------------------------------
# non-parametric


def _nce_logits(z_q: Tensor, z_pos: Tensor, keys: np.ndarray, t: float) -> Tensor:
    pos = E.sum_(E.mul(z_q, z_pos), axis=1, keepdims=True)
    neg = E.matmul(z_q, E.Tensor(keys.T))
    return E.scale(E.concat([pos, neg], axis=1), 1.0 / t)


def _nce_per_sample(z_q: Tensor, z_pos: Tensor, keys: np.ndarray, t: float, drop=None) -> Tensor:
    logits = _nce_logits(z_q, z_pos, keys, t)
    if drop is not None:
        offset = np.zeros(logits.shape)
        offset[:, 1:][drop] = -np.inf
        logits = E.add(logits, offset)
    return _pick(E.log_softmax(logits, axis=1), 0)


def infonce(z_q, z_pos, queue, t: float = 0.2) -> Tensor:
    """``-log exp(q.k+/t) / sum_{k in {k+} u queue} exp(q.k/t)``, batch mean."""
    z_q, z_pos = _rows(z_q), _rows(z_pos)
    keys = _queue_keys(queue)
    per = _nce_per_sample(z_q, z_pos, keys, t)
    return E.scale(E.sum_(per), -1.0 / z_q.shape[0])


def infonce_filtered(z_q, z_pos, queue, labels, y_q, t: float = 0.2) -> Tensor:
    """infoNCE whose denominator skips queue keys sharing the query's label."""
    z_q, z_pos = _rows(z_q), _rows(z_pos)
    keys = _queue_keys(queue)
    labels = np.asarray(labels)
    if labels.shape[0] != keys.shape[0]:
        raise ContractError("label array must align with the queue")
    y_q = np.broadcast_to(np.asarray(y_q), (z_q.shape[0],))
    drop = labels[None, :] == y_q[:, None]
    if not drop.any():
        return infonce(z_q, z_pos, keys, t)
    n_all = int(drop.all(axis=1).sum())
    if n_all:
        DIAGNOSTICS["infonce_all_filtered"] += n_all
        logger.debug("all negatives filtered for %d queries", n_all)
    per = _nce_per_sample(z_q, z_pos, keys, t, drop)
    return E.scale(E.sum_(per), -1.0 / z_q.shape[0])


def mixup_infonce(z_m, z_i, z_j, queue, lam, t: float = 0.2) -> Tensor:
    """``lam * infoNCE(z_m, z_i) + (1 - lam) * infoNCE(z_m, z_j)``.

    Negatives come from the queue only, so the partner key of each term is
    never counted as a negative.
    """
    z_m, z_i, z_j = _rows(z_m), _rows(z_i), _rows(z_j)
    keys = _queue_keys(queue)
    lam_b = _lam(lam, z_m.shape[0])
    li = _nce_per_sample(z_m, z_i, keys, t)
    lj = _nce_per_sample(z_m, z_j, keys, t)
    per = E.add(E.mul(lam_b, li), E.mul(1.0 - lam_b, lj))
    return E.scale(E.sum_(per), -1.0 / z_m.shape[0])


def bce_instance(z_m, z_i, z_j, lam, t: float = 0.2) -> Tensor:
    """Binary mixup loss between the two source instances only."""
    z_m, z_i, z_j = _rows(z_m), _rows(z_i), _rows(z_j)
    si = E.sum_(E.mul(z_m, z_i), axis=1)
    sj = E.sum_(E.mul(z_m, z_j), axis=1)
    diff = E.scale(E.sub(si, sj), 1.0 / t)
    per = _binary_mix(diff, _lam(lam, z_m.shape[0]))
    return E.scale(E.sum_(per), -1.0 / z_m.shape[0])


# ---------------------------------------------------------------------------
# combinations and priors


def eta_balanced(l_plus, l_minus, eta: float):
    """``l_plus + eta * l_minus`` for eta in [0, 1]."""
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    if isinstance(l_plus, Tensor) or isinstance(l_minus, Tensor):
        return E.add(l_plus, E.scale(E.as_tensor(l_minus), eta))
    return l_plus + eta * l_minus


def mask_terms(mask: MixMask, lam, eps: float = 0.1) -> tuple[Tensor, Tensor]:
    """Per-sample (mean-alignment, spatial-variance) terms of ``s_i``."""
    s = mask.s_i
    if s.ndim == 2:
        s = E.reshape(s, (1, 1) + s.shape)
    b = s.shape[0]
    flat = E.reshape(s, (b, -1))
    mu = E.mean(flat, axis=1, keepdims=True)  # (B, 1)
    lam_b = _lam(lam, b)
    l_mu = E.relu(E.sub(E.abs_(E.sub(lam_b.reshape(b, 1), mu)), eps))
    dev = E.sub(mu, flat)
    l_sigma = E.mean(E.mul(dev, dev), axis=1)
    return E.reshape(l_mu, (b,)), l_sigma


def mask_loss(mask: MixMask, lam, eps: float = 0.1, beta: float = 0.1, variance_sign: int = -1) -> Tensor:
    """``beta * (l_mu + variance_sign * l_sigma)``, batch mean.

    The default sign rewards spatial variance (pushes masks away from a
    constant); ``+1`` penalises it.
    """
    if beta < 0 or eps < 0:
        raise ContractError("beta and eps must be non-negative")
    l_mu, l_sigma = mask_terms(mask, lam, eps)
    per = E.add(l_mu, E.scale(l_sigma, float(variance_sign)))
    return E.scale(E.mean(per), beta)


def beta_schedule(step: int, total_steps: int, beta0: float = 0.1) -> float:
    """Linear decay from ``beta0`` at step 0 to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps or total_steps <= 0:
        raise ContractError(f"need 0 <= step <= total_steps, got {step}/{total_steps}")
    return beta0 * (1.0 - step / total_steps)
