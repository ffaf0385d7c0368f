"""Dense numerical substrate: parameter sets, MLP / GRU / attention blocks with
hand-written backward passes, losses, Adam, a finite-difference gradient
checker and a bit-exact checkpoint format.

All arrays are float64. Blocks are functional: ``*_forward`` returns the
output plus a cache, ``*_backward`` consumes the cache and accumulates parameter
gradients into a ``ParamSet`` of the same layout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalError

ACTIVATIONS = ("tanh", "sigmoid", "identity", "relu")


def sigmoid(x):
    # tanh form: stable for large |x| and exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _activate(name: str, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return sigmoid(a)
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    raise ConfigError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _activate_grad(name: str, a, y, dy):
    """Backprop ``dy`` through activation ``name`` given pre-activation ``a``, output ``y``."""
    if name == "tanh":
        return dy * (1.0 - y * y)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "identity":
        return dy
    if name == "relu":
        return dy * (a > 0)
    raise ConfigError(f"unknown activation {name!r}")


class ParamSet(dict):
    """Ordered ``name -> ndarray`` map. Iteration order is insertion order."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet((k, v) for k, v in self.items() if k.startswith(prefix))

    def num_values(self) -> int:
        return int(sum(v.size for v in self.values()))

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        if list(self) != list(other):
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self)

    def bit_equal(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )


def init_dense(params: ParamSet, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{prefix}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    params[f"{prefix}.b"] = rng.uniform(-bound, bound, size=(fan_out,))


def init_mlp(params: ParamSet, prefix: str, in_dim: int, layer_spec, rng) -> None:
    width = in_dim
    for i, (out, act) in enumerate(layer_spec):
        if act not in ACTIVATIONS:
            raise ConfigError(f"{prefix}: unknown activation {act!r}")
        init_dense(params, f"{prefix}.{i}", width, out, rng)
        width = out


def init_gru(params: ParamSet, prefix: str, in_dim: int, hidden: int, rng) -> None:
    bound = 1.0 / np.sqrt(hidden)
    for gate in ("z", "r", "n"):
        params[f"{prefix}.W_{gate}"] = rng.uniform(-bound, bound, size=(hidden, in_dim))
        params[f"{prefix}.U_{gate}"] = rng.uniform(-bound, bound, size=(hidden, hidden))
        params[f"{prefix}.b_{gate}"] = rng.uniform(-bound, bound, size=(hidden,))


def _as2d(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# ---------------------------------------------------------------- dense / MLP

def dense_forward(params: ParamSet, prefix: str, x, activation: str = "identity"):
    W = params[f"{prefix}.W"]
    b = params[f"{prefix}.b"]
    if x.shape[-1] != W.shape[1]:
        raise ConfigError(
            f"{prefix}: input width {x.shape[-1]} does not match weight shape {W.shape}"
        )
    a = x @ W.T + b
    y = _activate(activation, a)
    return y, (x, a, y, activation)


def dense_backward(params: ParamSet, prefix: str, cache, dy, grads: ParamSet | None):
    x, a, y, activation = cache
    da = _activate_grad(activation, a, y, dy)
    if grads is not None:
        x2, _ = _as2d(x)
        da2, _ = _as2d(da)
        grads[f"{prefix}.W"] += da2.T @ x2
        grads[f"{prefix}.b"] += da2.sum(axis=0)
    return da @ params[f"{prefix}.W"]


def mlp_forward(params: ParamSet, x, layer_spec, prefix: str = "mlp", return_cache: bool = False):
    """Feed ``x`` through dense layers described by ``[(width, activation), ...]``."""
    x = np.asarray(x, dtype=np.float64)
    caches = []
    for i, (width, act) in enumerate(layer_spec):
        name = f"{prefix}.{i}"
        if name + ".W" not in params:
            raise ConfigError(f"missing parameter block {name}")
        if params[name + ".W"].shape[0] != width:
            raise ConfigError(
                f"{name}: layer spec width {width} != weight rows {params[name + '.W'].shape[0]}"
            )
        x, c = dense_forward(params, name, x, act)
        caches.append(c)
    return (x, caches) if return_cache else x


def mlp_backward(params: ParamSet, caches, dy, layer_spec, prefix: str, grads: ParamSet | None):
    for i in reversed(range(len(layer_spec))):
        dy = dense_backward(params, f"{prefix}.{i}", caches[i], dy, grads)
    return dy


# ---------------------------------------------------------------- GRU

def gru_step(params: ParamSet, x, h_prev, prefix: str = "gru", return_cache: bool = False):
    """One Cho-style GRU step.

    u = sigmoid(W_z x + U_z h + b_z)        update gate
    g = sigmoid(W_r x + U_r h + b_r)        reset gate
    n = tanh(W_n x + U_n (g * h) + b_n)     candidate
    h' = (1 - u) * n + u * h
    """
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    Wz, Uz, bz = params[f"{prefix}.W_z"], params[f"{prefix}.U_z"], params[f"{prefix}.b_z"]
    Wr, Ur, br = params[f"{prefix}.W_r"], params[f"{prefix}.U_r"], params[f"{prefix}.b_r"]
    Wn, Un, bn = params[f"{prefix}.W_n"], params[f"{prefix}.U_n"], params[f"{prefix}.b_n"]
    if x.shape[-1] != Wz.shape[1] or h_prev.shape[-1] != Uz.shape[0]:
        raise ConfigError(
            f"{prefix}: got input {x.shape[-1]} / hidden {h_prev.shape[-1]}, "
            f"expected {Wz.shape[1]} / {Uz.shape[0]}"
        )
    u = sigmoid(x @ Wz.T + h_prev @ Uz.T + bz)
    g = sigmoid(x @ Wr.T + h_prev @ Ur.T + br)
    gh = g * h_prev
    n = np.tanh(x @ Wn.T + gh @ Un.T + bn)
    h = (1.0 - u) * n + u * h_prev
    if return_cache:
        return h, (x, h_prev, u, g, gh, n)
    return h


def gru_backward(params: ParamSet, cache, dh, prefix: str, grads: ParamSet | None):
    x, h_prev, u, g, gh, n = cache
    Uz, Ur, Un = params[f"{prefix}.U_z"], params[f"{prefix}.U_r"], params[f"{prefix}.U_n"]
    Wz, Wr, Wn = params[f"{prefix}.W_z"], params[f"{prefix}.W_r"], params[f"{prefix}.W_n"]
    dn = dh * (1.0 - u)
    du = dh * (h_prev - n)
    dh_prev = dh * u
    da_n = dn * (1.0 - n * n)
    dgh = da_n @ Un
    dg = dgh * h_prev
    dh_prev = dh_prev + dgh * g
    da_z = du * u * (1.0 - u)
    da_r = dg * g * (1.0 - g)
    dx = da_z @ Wz + da_r @ Wr + da_n @ Wn
    dh_prev = dh_prev + da_z @ Uz + da_r @ Ur
    if grads is not None:
        x2, _ = _as2d(x)
        hp2, _ = _as2d(h_prev)
        gh2, _ = _as2d(gh)
        for gate, da, rec_in in (("z", da_z, hp2), ("r", da_r, hp2), ("n", da_n, gh2)):
            da2, _ = _as2d(da)
            grads[f"{prefix}.W_{gate}"] += da2.T @ x2
            grads[f"{prefix}.U_{gate}"] += da2.T @ rec_in
            grads[f"{prefix}.b_{gate}"] += da2.sum(axis=0)
    return dx, dh_prev


# ---------------------------------------------------------------- attention

def attention(query, keys, values, scale: float | None = None, return_cache: bool = False):
    """Single-head scaled dot-product attention for one query.

    Returns ``(output, weights)``; weights = softmax(scale * K q).
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise EmptyMemoryError("attention over an empty key set")
    if keys.shape[0] != values.shape[0]:
        raise ConfigError(f"{keys.shape[0]} keys but {values.shape[0]} values")
    if keys.shape[1] != query.shape[-1]:
        raise ConfigError(f"query dim {query.shape[-1]} != key dim {keys.shape[1]}")
    if scale is None:
        scale = 1.0 / np.sqrt(query.shape[-1])
    logits = scale * (keys @ query)
    logits = logits - logits.max()
    e = np.exp(logits)
    w = e / e.sum()
    out = w @ values
    if return_cache:
        return out, w, (query, keys, values, w, scale)
    return out, w


def attention_backward(cache, dout):
    """Gradients of ``attention`` output w.r.t. (query, keys, values)."""
    query, keys, values, w, scale = cache
    dvalues = np.outer(w, dout)
    dw = values @ dout
    dlogits = w * (dw - w @ dw)
    dquery = scale * (dlogits @ keys)
    dkeys = scale * np.outer(dlogits, query)
    return dquery, dkeys, dvalues


class EmptyMemoryError(ValueError):
    """Raised when attention is asked to attend over zero keys."""


# ---------------------------------------------------------------- losses

def l1_loss(pred, target):
    diff = np.asarray(pred) - np.asarray(target)
    return float(np.abs(diff).sum()), np.sign(diff)


def l2_loss(pred, target):
    diff = np.asarray(pred) - np.asarray(target)
    return float(0.5 * (diff * diff).sum()), diff


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, **kw) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), **kw)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float):
    """In-place Adam update; returns ``(params, state)`` for chaining."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise ConfigError(f"gradient for unknown parameter {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name} at Adam step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    block: str
    max_rel_error: float
    per_param: list[tuple[str, float]] = field(default_factory=list)
    n_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    block: Callable[[ParamSet, object], tuple[float, ParamSet]],
    params: ParamSet,
    probe,
    name: str = "block",
    h: float = 1e-5,
    max_entries_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``block``'s analytic gradients to central finite differences.

    ``block(params, probe)`` must return ``(loss, grads)``. With
    ``max_entries_per_param`` set, a seeded random subset of each tensor is probed.
    """
    rng = np.random.default_rng(seed)
    _, analytic = block(params, probe)
    work = params.copy()
    report = GradCheckReport(block=name, max_rel_error=0.0)
    for pname, arr in work.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idx = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        worst = 0.0
        ga = analytic[pname].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp, _ = block(work, probe)
            flat[i] = old - h
            lm, _ = block(work, probe)
            flat[i] = old
            fd = (lp - lm) / (2.0 * h)
            worst = max(worst, float(rel_error(ga[i], fd)))
            report.n_checked += 1
        report.per_param.append((pname, worst))
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


def input_grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x, h: float = 1e-5) -> float:
    """Max relative error of ``fn``'s gradient w.r.t. its array input."""
    x = np.array(x, dtype=np.float64)
    _, g = fn(x)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        lp, _ = fn(x)
        flat[i] = old - h
        lm, _ = fn(x)
        flat[i] = old
        worst = max(worst, float(rel_error(g.reshape(-1)[i], (lp - lm) / (2 * h))))
    return worst


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"NKPS"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamSet, meta: dict | None = None) -> None:
    """Write ``params`` as ordered (name, shape, float64 LE values) records.

    Layout: magic, u32 version, u32 meta length + UTF-8 JSON meta, u32 count,
    then per record: u32 name length, name, u32 ndim, ndim x u32 dims, raw values.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    chunks += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, arr in params.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        chunks += [struct.pack("<I", d) for d in arr.shape]
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a parameter checkpoint (bad magic)")
    pos = 4

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return v

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    n = u32()
    meta = json.loads(data[pos:pos + n].decode())
    pos += n
    params = ParamSet()
    for _ in range(u32()):
        n = u32()
        name = data[pos:pos + n].decode()
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params[name] = arr.astype(np.float64)
    return params, meta


def check_shapes(expected: ParamSet, loaded: ParamSet) -> None:
    """Raise ``ConfigError`` naming the first block whose shape disagrees."""
    for name, arr in expected.items():
        if name not in loaded:
            raise ConfigError(f"checkpoint is missing parameter block {name}")
        if loaded[name].shape != arr.shape:
            raise ConfigError(
                f"parameter block {name}: checkpoint shape {loaded[name].shape} "
                f"!= model shape {arr.shape}"
            )
    extra = [k for k in loaded if k not in expected]
    if extra:
        raise ConfigError(f"checkpoint has unexpected parameter block {extra[0]}")

