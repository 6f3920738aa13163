"""Online spherical k-means producing pseudo-labels for cluster-level mixup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ContractError


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


@dataclass
class ClusterState:
    centroids: np.ndarray  # (C, D), unit rows
    assignments: np.ndarray  # (n,), -1 = never seen
    decay: float = 0.99
    reseed_noise: float = 0.05

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def init_clusters(
    embeddings: np.ndarray, k: int, n_samples: int, rng: np.random.Generator, decay: float = 0.99
) -> ClusterState:
    """k-means++ seeding from one batch of momentum embeddings."""
    emb = _normalize(np.asarray(embeddings, dtype=np.float64))
    if emb.shape[0] < k:
        raise ContractError(f"need at least {k} embeddings to seed {k} clusters")
    chosen = [int(rng.integers(emb.shape[0]))]
    for _ in range(1, k):
        d = 1.0 - (emb @ emb[chosen].T).max(axis=1)
        d = np.maximum(d, 0.0)
        p = d / d.sum() if d.sum() > 0 else np.full(len(d), 1.0 / len(d))
        chosen.append(int(rng.choice(emb.shape[0], p=p)))
    return ClusterState(emb[chosen].copy(), np.full(n_samples, -1, dtype=np.int64), decay)


def cluster_update(
    embeddings: np.ndarray,
    state: ClusterState,
    indices: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Assign each embedding to its nearest centroid and move centroids.

    Centroids follow ``normalize(decay * c + (1 - decay) * mean(assigned))``.
    Clusters left without members (over the whole assignment memory) are
    re-seeded from a perturbed copy of the largest centroid, which hands
    over half of its members.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    labels = (emb @ state.centroids.T).argmax(axis=1)
    if indices is None:
        memory = labels.copy()
        pos = np.arange(len(labels))
    else:
        state.assignments[indices] = labels
        memory = state.assignments
        pos = np.asarray(indices)

    for c in np.unique(labels):
        mean = emb[labels == c].mean(axis=0)
        state.centroids[c] = _normalize(state.decay * state.centroids[c] + (1.0 - state.decay) * mean)

    seen = memory >= 0
    counts = np.bincount(memory[seen], minlength=state.k)
    for e in np.flatnonzero(counts == 0):
        big = int(counts.argmax())
        if counts[big] < 2:
            break
        state.centroids[e] = _normalize(
            state.centroids[big] + state.reseed_noise * rng.standard_normal(state.centroids.shape[1])
        )
        members = np.flatnonzero(memory == big)
        moved = rng.choice(members, size=len(members) // 2, replace=False)
        memory[moved] = e
        counts[big] -= len(moved)
        counts[e] = len(moved)
    return memory[pos].copy()
