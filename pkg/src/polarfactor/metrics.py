"""Evaluation metrics: Sinkhorn divergence and its epsilon rule, L2-UVP,
pre-image neighbourhoods and the two inverse-map scores."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numcore import DTYPE, NumericsError

log = logging.getLogger(__name__)

EPS_FLOOR = 1e-12


@dataclass
class SinkhornConfig:
    epsilon: float = 0.1
    max_iterations: int = 10000
    tol: float = 1e-10  # L1 violation of the column marginal
    check_every: int = 10

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise NumericsError("epsilon must be positive")


@dataclass
class SinkhornResult:
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


def logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(z - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise NumericsError(f"expected a non-empty (n, d) point cloud, got {a.shape}")
    return a


def entropic_ot(a, b, cfg: SinkhornConfig, f0: np.ndarray | None = None) -> SinkhornResult:
    """Entropic OT cost with uniform weights and cost ``||x - y||^2``.

    Log-domain Sinkhorn; the value is the dual objective ``<f, a> + <g, b>``,
    evaluated right after an f-update so the row marginal is exact. ``f0``
    is an optional starting potential on ``a`` (in units of epsilon).
    """
    a, b = _points(a), _points(b)
    eps = cfg.epsilon
    n, m = a.shape[0], b.shape[0]
    C = sq_dists(a, b) / eps
    la, lb = -np.log(n), -np.log(m)
    f = np.zeros(n) if f0 is None else np.asarray(f0, dtype=DTYPE)
    g = np.zeros(m)
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        g = -logsumexp(f[:, None] - C + la, axis=0)
        f = -logsumexp(g[None, :] - C + lb, axis=1)
        if it % cfg.check_every == 0 or it == cfg.max_iterations:
            col = np.exp(logsumexp(f[:, None] + g[None, :] - C + la + lb, axis=0))
            if np.sum(np.abs(col - 1.0 / m)) <= cfg.tol:
                converged = True
                break
    return SinkhornResult(eps * (f.mean() + g.mean()), converged, it)


def _self_ot(a: np.ndarray, cfg: SinkhornConfig) -> tuple[SinkhornResult, np.ndarray]:
    """Symmetric problem OT(a, a) with the averaged fixed-point update; also returns the potential."""
    eps = cfg.epsilon
    n = a.shape[0]
    C = sq_dists(a, a) / eps
    la = -np.log(n)
    f = np.zeros(n)
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        f_new = 0.5 * (f - logsumexp(f[None, :] - C + la, axis=1))
        delta = np.max(np.abs(f_new - f))
        f = f_new
        if delta * n <= cfg.tol:
            converged = True
            break
    f = -logsumexp(f[None, :] - C + la, axis=1)
    return SinkhornResult(2.0 * eps * f.mean(), converged, it), f


def sinkhorn_divergence(a, b, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Debiased ``OT(a, b) - OT(a, a)/2 - OT(b, b)/2`` between two point clouds."""
    cfg = cfg or SinkhornConfig()
    a, b = _points(a), _points(b)
    if a.shape[1] != b.shape[1]:
        raise NumericsError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    aa, fa = _self_ot(a, cfg)
    bb, _ = _self_ot(b, cfg)
    # starting from the self potential makes OT(a, a) hit its fixed point at once
    ab = entropic_ot(a, b, cfg, f0=fa)
    ok = ab.converged and aa.converged and bb.converged
    if not ok:
        log.warning("Sinkhorn hit the iteration cap (%d)", cfg.max_iterations)
    return SinkhornResult(ab.value - 0.5 * (aa.value + bb.value), ok, max(ab.iterations, aa.iterations, bb.iterations))


def mean_sq_distance(a, b) -> float:
    """Mean of ``||a_i - b_j||^2`` over all pairs (i, j)."""
    a, b = _points(a), _points(b)
    ma, mb = a.mean(0), b.mean(0)
    return float(np.mean(np.sum(a * a, 1)) + np.mean(np.sum(b * b, 1)) - 2.0 * ma @ mb)


def epsilon_rule(
    samples,
    mode: str = "source",
    rng: np.random.Generator | None = None,
    field: Callable[[np.ndarray], np.ndarray] | None = None,
    n_mc: int = 2048,
    factor: float = 0.05,
) -> float:
    """``factor * E ||x - x'||^2``.

    Sets of at most ``n_mc`` points are enumerated over all pairs (self-pairs
    included); larger sets use two independent draws of ``n_mc`` points with
    replacement, i.e. ``n_mc x n_mc`` Monte Carlo pairs. In ``"target"`` mode
    the rule is applied to the images ``field(x)``.
    """
    x = _points(samples)
    if mode == "target":
        if field is None:
            raise NumericsError("target mode needs the field evaluator")
        x = _points(field(x))
    elif mode != "source":
        raise NumericsError(f"unknown epsilon mode {mode!r}")
    if x.shape[0] < 2:
        raise NumericsError("epsilon rule needs at least two samples")
    if x.shape[0] <= n_mc:
        val = mean_sq_distance(x, x)
    else:
        if rng is None:
            raise NumericsError("an rng is needed to subsample more than n_mc points")
        i = rng.integers(0, x.shape[0], size=n_mc)
        j = rng.integers(0, x.shape[0], size=n_mc)
        val = mean_sq_distance(x[i], x[j])
    eps = factor * val
    if not eps > EPS_FLOOR:
        warnings.warn("degenerate sample set: epsilon floored", RuntimeWarning, stacklevel=2)
        eps = EPS_FLOOR
    return eps


def _apply(T, x: np.ndarray) -> np.ndarray:
    return np.asarray(T(x) if callable(T) else T, dtype=DTYPE)


def l2_uvp(T_hat, T_star, x, target_variance: float) -> float:
    """``100 * mean ||T_hat(x) - T_star(x)||^2 / Var(nu)``, Var = covariance trace.

    Maps may be callables or precomputed arrays of images.
    """
    if not target_variance > 0:
        raise NumericsError("target variance must be positive")
    x = _points(x)
    diff = _apply(T_hat, x) - _apply(T_star, x)
    return float(100.0 * np.mean(np.sum(diff * diff, axis=1)) / target_variance)


def b_alpha_set(images, k: int, c: int = 128) -> tuple[np.ndarray, float]:
    """Indices of the ``c`` points whose images lie closest to image ``k``.

    Returns ``(indices, alpha)`` with alpha the c-th smallest distance; ties
    go to the lower index.
    """
    images = _points(images)
    if images.shape[0] < c:
        raise NumericsError(f"need at least {c} points, got {images.shape[0]}")
    dist = np.sqrt(np.sum((images - images[k]) ** 2, axis=1))
    order = np.argsort(dist, kind="stable")[:c]
    return order, float(dist[order[-1]])


@dataclass
class MetricRow:
    metric: str
    value: float
    baseline: float = float("nan")
    epsilon: float = float("nan")
    n: int = 0
    m: int = 0


def baseline_divergence(x, size: int, cfg: SinkhornConfig, rng: np.random.Generator, repeats: int = 1) -> float:
    """Average divergence between two disjoint random batches of ``size`` points."""
    x = _points(x)
    if x.shape[0] < 2 * size:
        raise NumericsError(f"baseline needs {2 * size} points, got {x.shape[0]}")
    vals = []
    for _ in range(repeats):
        perm = rng.permutation(x.shape[0])
        vals.append(sinkhorn_divergence(x[perm[:size]], x[perm[size : 2 * size]], cfg).value)
    return float(np.mean(vals))


def posterior_metric(
    inverse: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    xs,
    images,
    rng: np.random.Generator,
    c: int = 128,
    n_anchors: int = 16,
    epsilon: float | None = None,
    sinkhorn: SinkhornConfig | None = None,
) -> MetricRow:
    """Average divergence between generated pre-images and the B_alpha sets.

    For each anchor, ``inverse`` is applied with fresh noise to the images of
    the anchor's B_alpha set; the generated cloud is compared with the set
    itself. The baseline compares two disjoint batches of ``c`` test points.
    """
    xs, images = _points(xs), _points(images)
    eps = epsilon if epsilon is not None else epsilon_rule(xs, rng=rng)
    cfg = sinkhorn or SinkhornConfig(epsilon=eps, tol=1e-6)
    cfg.epsilon = eps
    anchors = rng.choice(xs.shape[0], size=min(n_anchors, xs.shape[0]), replace=False)
    vals = []
    for k in anchors:
        idx, _ = b_alpha_set(images, int(k), c)
        gen = inverse(images[idx], rng)
        vals.append(sinkhorn_divergence(gen, xs[idx], cfg).value)
    base = baseline_divergence(xs, c, cfg, rng, repeats=len(anchors))
    return MetricRow("posterior", float(np.mean(vals)), base, eps, c, len(anchors))


def cosine(a, b) -> np.ndarray:
    """Row-wise cosine similarity; rows with a zero vector score 0."""
    a, b = _points(a), _points(b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    if np.any(zero):
        warnings.warn(f"{int(zero.sum())} zero vectors in cosine similarity", RuntimeWarning, stacklevel=2)
    out = np.zeros(a.shape[0])
    ok = ~zero
    out[ok] = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return out


def cosine_inversion_metric(
    field: Callable[[np.ndarray], np.ndarray],
    conj: Callable[[np.ndarray], np.ndarray],
    inverse: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    xs,
    rng: np.random.Generator,
    draws: int = 1,
) -> float:
    """Mean cosine between G(I(grad u*(G x), z)) and G(x) over test points and noise.

    ``conj`` evaluates grad u* (the conjugate solver), ``inverse`` draws
    from the stochastic inverse with the given rng.
    """
    xs = _points(xs)
    gx = field(xs)
    p = conj(gx)
    vals = []
    for _ in range(draws):
        vals.append(cosine(field(inverse(p, rng)), gx))
    return float(np.mean(vals))


def write_metrics(rows: list[MetricRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "baseline", "epsilon", "n", "m"])
        for r in rows:
            w.writerow([r.metric, f"{r.value:.10g}", f"{r.baseline:.10g}", f"{r.epsilon:.10g}", r.n, r.m])
