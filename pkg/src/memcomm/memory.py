"""Receiver-side memory queue and its sinusoidal temporal code."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MemoryQueue:
    """Fixed-capacity FIFO of recovered context features, oldest row first."""

    slots: np.ndarray
    filled: int = 0

    @property
    def capacity(self) -> int:
        return self.slots.shape[0]

    @property
    def width(self) -> int:
        return self.slots.shape[1]


def queue_init(capacity: int, width: int) -> MemoryQueue:
    if capacity < 1 or width < 1:
        raise ValueError("capacity and width must be >= 1")
    return MemoryQueue(np.zeros((capacity, width)), 0)


def queue_push(q: MemoryQueue, feature: np.ndarray) -> MemoryQueue:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (q.width,):
        raise ValueError(f"feature width {feature.shape} != ({q.width},)")
    slots = np.vstack([q.slots[1:], feature[None, :]])
    return MemoryQueue(slots, min(q.filled + 1, q.capacity))


def temporal_matrix(capacity: int, width: int) -> np.ndarray:
    if width % 2:
        raise ValueError("temporal code needs an even feature width")
    k = np.arange(capacity)[:, None]
    freqs = 10000.0 ** (np.arange(0, width, 2) / width)
    codes = np.zeros((capacity, width))
    codes[:, 0::2] = np.sin(k / freqs)
    codes[:, 1::2] = np.cos(k / freqs)
    return codes


def temporal_code(q: MemoryQueue) -> np.ndarray:
    return q.slots + temporal_matrix(q.capacity, q.width)
