"""Numerical convex conjugate of an ICNN and the amortization network.

By the envelope theorem the maximizer of ``<x, y> - u(x)`` is the gradient
of the conjugate at ``y``, so the solver returns that maximizer directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .icnn import IcnnParams, icnn_grad_input
from .mlp import MlpParams, mlp_forward, mse_step_grads
from .numcore import DTYPE, NumericsError, as_batch

log = logging.getLogger(__name__)


class ConjugateError(RuntimeError):
    """Every conjugate solve in a batch failed to converge."""


@dataclass
class ConjugateConfig:
    max_iterations: int = 200
    gtol: float = 1e-3
    lr: float = 1e-2
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise NumericsError("max_iterations must be >= 1")
        if self.gtol <= 0:
            raise NumericsError("gtol must be positive")


@dataclass
class ConjugateResult:
    x: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray  # ||y - grad u(x)|| at return

    def __iter__(self):
        # allows ``x, ok, iters = conjugate_solve(...)``
        return iter((self.x, self.converged, self.iterations))


def conjugate_solve(u: IcnnParams, y, x0=None, cfg: ConjugateConfig | None = None) -> ConjugateResult:
    """Adam ascent on ``J(x) = <x, y> - u(x)``, batched over rows of ``y``.

    Each row stops as soon as ``||y - grad u(x)|| <= gtol``; a row already
    satisfying the tolerance at ``x0`` takes zero iterations. ``x0`` defaults
    to ``y`` itself.
    """
    cfg = cfg or ConjugateConfig()
    Y, single = as_batch(y, u.cfg.dim)
    X = Y.copy() if x0 is None else as_batch(x0, u.cfg.dim)[0].astype(DTYPE, copy=True)
    if X.shape != Y.shape:
        raise NumericsError(f"warm start shape {X.shape} does not match targets {Y.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericsError("warm start contains non-finite values")
    n = Y.shape[0]
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    residual = np.full(n, np.inf)
    active = np.arange(n)
    for it in range(cfg.max_iterations + 1):
        G = Y[active] - icnn_grad_input(u, X[active])
        res = np.sqrt(np.sum(G * G, axis=1))
        residual[active] = res
        done = res <= cfg.gtol
        converged[active[done]] = True
        iters[active] = it
        keep = ~done & np.all(np.isfinite(G), axis=1)
        active, G = active[keep], G[keep]
        if active.size == 0 or it == cfg.max_iterations:
            break
        t = it + 1
        m[active] = cfg.b1 * m[active] + (1.0 - cfg.b1) * G
        v[active] = cfg.b2 * v[active] + (1.0 - cfg.b2) * G * G
        m_hat = m[active] / (1.0 - cfg.b1**t)
        v_hat = v[active] / (1.0 - cfg.b2**t)
        X[active] += cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if single:
        return ConjugateResult(X[0], converged[0], iters[0], residual[0])
    return ConjugateResult(X, converged, iters, residual)


def pick_warm_start(u: IcnnParams, y: np.ndarray, *candidates: np.ndarray) -> np.ndarray:
    """Row-wise choice, among candidate starts, of the one with the smallest residual."""
    best = None
    best_res = None
    for c in candidates:
        r = np.sum((y - icnn_grad_input(u, c)) ** 2, axis=1)
        if best is None:
            best, best_res = c.copy(), r
        else:
            better = r < best_res
            best[better] = c[better]
            best_res = np.where(better, r, best_res)
    return best


def amortization_loss(v_phi: MlpParams, fx, u: IcnnParams, cfg: ConjugateConfig | None = None):
    """Regression of the amortization network onto conjugate-solver targets.

    ``fx`` holds the images F(x_i). Targets come from the solver warm-started
    at the network's own prediction and are treated as constants; rows whose
    solve did not converge are dropped. Returns ``(loss, grads, result)``.
    """
    FX, _ = as_batch(fx, u.cfg.dim)
    if FX.shape[0] == 0:
        raise NumericsError("empty batch")
    pred = mlp_forward(v_phi, FX)
    res = conjugate_solve(u, FX, x0=pick_warm_start(u, FX, pred, FX), cfg=cfg)
    ok = res.converged
    if not np.any(ok):
        raise ConjugateError(
            f"conjugate solver converged on none of {FX.shape[0]} points; raise max_iterations "
            f"(now {(cfg or ConjugateConfig()).max_iterations}) or the solver learning rate"
        )
    if not np.all(ok):
        log.debug("amortization: dropped %d/%d non-converged targets", int((~ok).sum()), ok.size)
    loss, grads = mse_step_grads(v_phi, FX[ok], res.x[ok])
    return loss, grads, res
