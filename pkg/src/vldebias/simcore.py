"""Similarity kernels, temperature softmax, KL divergence and embedding queues."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimError, DomainError, QueueNotWarmError

DEFAULT_TEMPERATURE = 0.01


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _as_keys(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise DomainError("keys must be a non-empty list of vectors")
    return keys


def softmax_sim(query, keys, cfg: SimilarityConfig = SimilarityConfig()) -> np.ndarray:
    """Softmax over ``<query, key_m> / tau``.

    ``query`` may be a single vector or a batch (rows); the output has one
    probability row per query.
    """
    keys = _as_keys(keys)
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != keys.shape[1]:
        raise DimError(f"query dim {query.shape[-1]} != key dim {keys.shape[1]}")
    return softmax(query @ keys.T / cfg.temperature)


class EmbeddingQueue:
    """Fixed-capacity FIFO of frozen ``(id, vector)`` entries."""

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity <= 0:
            raise ConfigError("queue capacity must be positive")
        self.capacity = int(capacity)
        self.dim = dim
        self._ids: deque[str] = deque()
        self._vecs: deque[np.ndarray] = deque()

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def is_full(self) -> bool:
        return len(self._ids) == self.capacity

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def matrix(self) -> np.ndarray:
        if not self._vecs:
            return np.zeros((0, self.dim or 0))
        return np.stack(self._vecs)

    def push(self, batch: Sequence[tuple[str, np.ndarray]]) -> None:
        queue_push(self, batch)

    def state(self) -> tuple[list[str], np.ndarray]:
        return self.ids, self.matrix()

    @classmethod
    def from_state(cls, capacity: int, ids: Iterable[str], vectors: np.ndarray) -> "EmbeddingQueue":
        q = cls(capacity, dim=vectors.shape[1] if vectors.ndim == 2 else None)
        for i, v in zip(ids, vectors):
            q._ids.append(str(i))
            q._vecs.append(np.array(v, dtype=np.float64))
        return q


def queue_push(queue: EmbeddingQueue, batch: Sequence[tuple[str, np.ndarray]]) -> None:
    """Append ``batch`` and evict oldest entries beyond capacity."""
    batch = list(batch)
    if len(batch) > queue.capacity:
        raise ConfigError(f"batch of {len(batch)} exceeds queue capacity {queue.capacity}")
    for sample_id, vec in batch:
        vec = np.array(vec, dtype=np.float64)  # frozen copy
        vec.flags.writeable = False
        if queue.dim is None:
            queue.dim = vec.shape[0]
        elif vec.shape[0] != queue.dim:
            raise DimError(f"vector dim {vec.shape[0]} != queue dim {queue.dim}")
        queue._ids.append(sample_id)
        queue._vecs.append(vec)
    while len(queue._ids) > queue.capacity:
        queue._ids.popleft()
        queue._vecs.popleft()


def pseudo_distribution(bias, queue: EmbeddingQueue,
                        cfg: SimilarityConfig = SimilarityConfig()) -> np.ndarray:
    """Softmax of bias embedding(s) against the queue's frozen entries."""
    if not queue.is_full:
        raise QueueNotWarmError(f"queue holds {len(queue)} of {queue.capacity} entries")
    return softmax_sim(bias, queue.matrix(), cfg)


def kl_div(p, q) -> float | np.ndarray:
    """KL(p || q) in nats along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimError(f"shape mismatch {p.shape} vs {q.shape}")
    terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    out = np.sum(terms, axis=-1)
    return float(out) if out.ndim == 0 else out
