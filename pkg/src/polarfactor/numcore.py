"""Dense numerics shared by every other module: RNG, flat parameter
containers, Adam with learning-rate schedules, finite differences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericsError(ValueError):
    """Raised on shape mismatches or non-finite values in core routines."""


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Counter-based generator; identical seeds give identical draw sequences.

    A sequence of ints keys a distinct stream per entry tuple, e.g. (seed, repeat).
    """
    if isinstance(seed, (list, tuple)):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(s) for s in seed])))
    return np.random.Generator(np.random.Philox(int(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams, reproducible from the parent state."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


class FlatParams:
    """Named array views over one contiguous float64 vector.

    Optimizers, finite-difference checks and checkpoints all work on
    ``flat``; model code reads ``p["name"]``.
    """

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        self.layout = [(name, tuple(int(s) for s in shape)) for name, shape in layout]
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.size = offset
        if flat is None:
            flat = np.zeros(offset, dtype=DTYPE)
        flat = np.ascontiguousarray(flat, dtype=DTYPE)
        if flat.shape != (offset,):
            raise NumericsError(f"flat vector has shape {flat.shape}, layout needs ({offset},)")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self._slices[name]
        return self.flat[sl].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        sl, shape = self._slices[name]
        self.flat[sl] = np.broadcast_to(np.asarray(value, dtype=DTYPE), shape).ravel()

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def names(self) -> list[str]:
        return [name for name, _ in self.layout]

    def zeros_like(self) -> np.ndarray:
        return np.zeros(self.size, dtype=DTYPE)

    def view_of(self, flat: np.ndarray, name: str) -> np.ndarray:
        """View of ``name`` inside another vector sharing this layout."""
        sl, shape = self._slices[name]
        return flat[sl].reshape(shape)


@dataclass
class Schedule:
    """Constant or cosine-decayed learning rate.

    Cosine decay follows ``lr * ((1 - alpha) * 0.5 * (1 + cos(pi * t / T)) + alpha)``
    with ``t`` clipped at ``T = decay_steps``.
    """

    kind: str = "constant"
    lr: float = 1e-3
    alpha: float = 0.0
    decay_steps: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "cosine"):
            raise NumericsError(f"unknown schedule kind {self.kind!r}")
        if self.lr < 0:
            raise NumericsError("learning rate must be non-negative")

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.lr
        t = min(step, self.decay_steps) / max(self.decay_steps, 1)
        return self.lr * ((1.0 - self.alpha) * 0.5 * (1.0 + math.cos(math.pi * t)) + self.alpha)


@dataclass
class Adam:
    """Adam with bias correction over a flat parameter vector."""

    schedule: Schedule = field(default_factory=Schedule)
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=DTYPE)
        grads = np.asarray(grads, dtype=DTYPE)
        if params.shape != grads.shape:
            raise NumericsError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
        if not np.all(np.isfinite(grads)):
            bad = np.flatnonzero(~np.isfinite(grads))
            raise NumericsError(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        elif self.m.shape != params.shape:
            raise NumericsError("parameter shape changed between Adam steps")
        lr = self.schedule(self.step_count)
        self.step_count += 1
        t = self.step_count
        self.m = self.b1 * self.m + (1.0 - self.b1) * grads
        self.v = self.b2 * self.v + (1.0 - self.b2) * grads * grads
        m_hat = self.m / (1.0 - self.b1**t)
        v_hat = self.v / (1.0 - self.b2**t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient ``(f(x + h e_i) - f(x - h e_i)) / 2h``."""
    if h <= 0:
        raise NumericsError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    shape = x.shape
    x = x.ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = float(f(x.reshape(shape)))
        x[i] = old - h
        fm = float(f(x.reshape(shape)))
        x[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericsError(f"f is not finite around component {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(shape)


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Max-norm relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def as_batch(x, d: int | None = None) -> tuple[np.ndarray, bool]:
    """Promote a vector to a 1-row batch; returns (batch, was_single)."""
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2:
        raise NumericsError(f"expected a vector or (n, d) batch, got shape {x.shape}")
    if d is not None and x.shape[1] != d:
        raise NumericsError(f"input dimension {x.shape[1]} does not match model dimension {d}")
    return x, single


def check_finite(name: str, *arrays: Iterable[np.ndarray]) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericsError(f"{name}: non-finite values")


# Activations: each entry maps name -> (f, f'). f' takes the pre-activation.

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_prime(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_prime(x):
    # subgradient 0 at the kink
    return (x > 0).astype(DTYPE)


def _silu(x):
    return x * _sigmoid(x)


def _silu_prime(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "elu": (_elu, _elu_prime),
    "softplus": (_softplus, _sigmoid),
    "relu": (_relu, _relu_prime),
    "silu": (_silu, _silu_prime),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}

# convex and non-decreasing, so admissible inside an ICNN
CONVEX_ACTIVATIONS = ("elu", "softplus", "relu")


def activation(name: str) -> tuple[Callable, Callable]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise NumericsError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
