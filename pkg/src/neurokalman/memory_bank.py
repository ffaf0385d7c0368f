"""Episodic memory of validated feature anchors with a confidence-gated store."""
from __future__ import annotations

import csv
import hashlib
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class MemoryAnchor:
    feature: np.ndarray
    step: int
    confidence: float


class MemoryBank:
    """Sliding window of at most ``capacity`` anchors, oldest evicted first.

    An anchor is stored only when its confidence is strictly above ``threshold``.
    Keys and values are the same stored feature.
    """

    def __init__(self, capacity: int = 10, threshold: float = 0.5):
        if capacity < 1:
            raise ConfigError(f"memory capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.threshold = float(threshold)
        self.anchors: deque[MemoryAnchor] = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.anchors)

    def try_store(self, feature, step: int, sigma: float) -> bool:
        if not sigma > self.threshold:
            return False
        feature = np.array(feature, dtype=np.float64)
        if not np.all(np.isfinite(feature)):
            return False
        self.anchors.append(MemoryAnchor(feature, int(step), float(sigma)))
        return True

    def snapshot(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        keys = [a.feature for a in self.anchors]
        return keys, list(keys)

    def as_array(self) -> np.ndarray | None:
        if not self.anchors:
            return None
        return np.stack([a.feature for a in self.anchors])

    def clear(self) -> None:
        self.anchors.clear()

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "confidence", "feature_sha1"])
            for a in self.anchors:
                w.writerow([a.step, repr(a.confidence), hashlib.sha1(a.feature.tobytes()).hexdigest()[:12]])
