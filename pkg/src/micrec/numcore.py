"""Dense numeric kernel: parameter storage, affine layers, Xavier init, Adam,
cosine similarity and finite-difference gradient checking.

Everything is float64 numpy. Matrices are plain 2-D ``np.ndarray`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

DTYPE = np.float64


class InvalidShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    pass


class DivergedTrainingError(FloatingPointError):
    pass


class NonDeterministicLossError(RuntimeError):
    pass


def init_xavier(shape: Tuple[int, int], seed) -> np.ndarray:
    """Xavier/Glorot uniform initialization.

    Args:
        shape: (rows, cols), both positive.
        seed: int or ``np.random.Generator``.

    Returns:
        Array with entries i.i.d. on [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))].
    """
    rows, cols = shape
    if rows <= 0 or cols <= 0:
        raise InvalidShapeError(f"xavier init needs positive dims, got {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (unit rows, row norms). Raises on any zero row."""
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise DegenerateVectorError(f"row {bad} has zero norm")
    return x / norms[:, None], norms


def normalize_rows_backward(z: np.ndarray, norms: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Gradient through ``z = x / ||x||`` given the forward outputs."""
    return (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms[:, None]


# ---------------------------------------------------------------------------
# layers

_ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class LayerCache:
    x: np.ndarray
    w: np.ndarray
    out: np.ndarray
    activation: str
    consumed: bool = False


def mlp_layer_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, activation: str = "relu"):
    """``activation(x @ w + b)``; returns (output, cache)."""
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise InvalidShapeError(f"cannot multiply {x.shape} by {w.shape}")
    b = np.asarray(b).reshape(1, -1)
    if b.shape[1] != w.shape[1]:
        raise InvalidShapeError(f"bias {b.shape} does not match weights {w.shape}")
    z = x @ w + b
    if activation == "relu":
        out = np.maximum(z, 0.0)
    elif activation == "tanh":
        out = np.tanh(z)
    else:
        out = z
    return out, LayerCache(x=x, w=w, out=out, activation=activation)


def mlp_layer_backward(cache: LayerCache, upstream: np.ndarray):
    """Returns (input_grad, weight_grad, bias_grad) for a cached forward call.

    A cache may be consumed once; reuse raises ``InvalidStateError``.
    """
    if not isinstance(cache, LayerCache) or cache.consumed:
        raise InvalidStateError("stale or foreign layer cache")
    if upstream.shape != cache.out.shape:
        raise InvalidStateError(
            f"upstream grad {upstream.shape} does not match cached output {cache.out.shape}"
        )
    cache.consumed = True
    if cache.activation == "relu":
        dz = upstream * (cache.out > 0)
    elif cache.activation == "tanh":
        dz = upstream * (1.0 - cache.out**2)
    else:
        dz = upstream
    return dz @ cache.w.T, cache.x.T @ dz, dz.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# parameters and Adam


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    # rows never updated (embedding PAD)
    frozen_rows: Tuple[int, ...] = ()

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.value.ndim != 2:
            raise InvalidShapeError("parameters are 2-D")
        for name in ("grad", "adam_m", "adam_v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.value))


@dataclass
class ParamStore:
    """Named parameters with paired gradients and Adam moments."""

    entries: Dict[str, Param] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray, frozen_rows=()) -> Param:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(value, frozen_rows=tuple(frozen_rows))
        self.entries[name] = p
        return p

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def grad(self, name: str) -> np.ndarray:
        return self.entries[name].grad

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.grad.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore(step_count=self.step_count)
        for name, p in self.entries.items():
            out.entries[name] = Param(
                p.value.copy(), p.grad.copy(), p.adam_m.copy(), p.adam_v.copy(), p.frozen_rows
            )
        return out

    def values(self) -> Dict[str, np.ndarray]:
        return {k: p.value for k, p in self.entries.items()}


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    for name, p in store.entries.items():
        if not np.all(np.isfinite(p.grad)):
            raise DivergedTrainingError(f"non-finite gradient in parameter {name!r}")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in store.entries.values():
        g = p.grad
        if p.frozen_rows:
            g = g.copy()
            g[list(p.frozen_rows)] = 0.0
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        p.value -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)
    return store


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    flagged: Dict[str, np.ndarray]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(v.size == 0 for v in self.flagged.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    loss_fn: Callable[[ParamStore], Tuple[float, Dict[str, np.ndarray]]],
    store: ParamStore,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    names=None,
    abs_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients to central differences, entry by entry.

    ``loss_fn(store)`` must return ``(loss, {name: grad})``. The relative
    error of an entry is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    base, grads = loss_fn(store)
    again, _ = loss_fn(store)
    if base != again:
        raise NonDeterministicLossError(f"loss_fn returned {base!r} then {again!r}")
    names = list(store) if names is None else list(names)
    max_err: Dict[str, float] = {}
    flagged: Dict[str, np.ndarray] = {}
    for name in names:
        value = store[name]
        analytic = np.asarray(grads.get(name, np.zeros_like(value)))
        numeric = np.zeros_like(value)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = value[idx]
            value[idx] = orig + epsilon
            fp, _ = loss_fn(store)
            value[idx] = orig - epsilon
            fm, _ = loss_fn(store)
            value[idx] = orig
            numeric[idx] = (fp - fm) / (2 * epsilon)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
        rel = np.abs(analytic - numeric) / denom
        max_err[name] = float(rel.max()) if rel.size else 0.0
        flagged[name] = np.argwhere(rel > tolerance)
    return GradCheckReport(max_err, flagged, tolerance)
