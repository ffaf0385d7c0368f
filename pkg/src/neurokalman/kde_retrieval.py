"""Memory retrieval as Nadaraya-Watson kernel regression.

With the kernel exp(x.y / sqrt(d)) the estimator is exactly softmax attention;
``retrieve`` uses the attention primitive and ``nw_oracle`` evaluates the
kernel regression with explicit loops as an independent check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .memory_bank import MemoryBank
from .nn_core import attention


@dataclass
class RetrievalResult:
    evidence: np.ndarray
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    used_memory: bool = False


def retrieve(query, bank: MemoryBank | np.ndarray | None, scale: float | None = None) -> RetrievalResult:
    """Evidence vector for ``query`` against the stored features.

    An empty bank falls back to the query itself with no weights.
    """
    query = np.asarray(query, dtype=np.float64)
    keys = bank.as_array() if isinstance(bank, MemoryBank) else bank
    if keys is None or len(keys) == 0:
        return RetrievalResult(evidence=query.copy())
    if keys.shape[1] != query.shape[0]:
        raise ConfigError(f"query dim {query.shape[0]} != anchor dim {keys.shape[1]}")
    out, w = attention(query, keys, keys, scale)
    return RetrievalResult(evidence=out, weights=w, used_memory=True)


def nw_oracle(query, keys, values) -> np.ndarray:
    q = [float(v) for v in query]
    d = len(q)
    if len(keys) == 0 or len(keys) != len(values):
        raise ValueError("Nadaraya-Watson needs a non-empty, aligned key/value set")
    logs = []
    for k in keys:
        if len(k) != d:
            raise ValueError("key dimension mismatch")
        s = 0.0
        for a, b in zip(q, k):
            s += a * b
        logs.append(s / math.sqrt(d))
    shift = max(logs)
    kern = [math.exp(v - shift) for v in logs]
    total = math.fsum(kern)
    out = [0.0] * len(values[0])
    for kw, v in zip(kern, values):
        for j, vj in enumerate(v):
            out[j] += kw * vj
    return np.array([o / total for o in out])
