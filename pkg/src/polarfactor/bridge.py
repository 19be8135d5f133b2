"""Stochastic inverse of the measure-preserving map by augmented bridge matching.

The drift network sees the starting point X_0 next to the current state, so
one SDE integrated from X_0 = y samples the pre-images of y.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .conjugate import ConjugateConfig
from .icnn import IcnnParams
from .mlp import MlpConfig, MlpParams, init_mlp, mlp_forward, mse_step_grads
from .npf import OptimConfig, PairedBatch, m_theta
from .numcore import DTYPE, NumericsError, as_batch

log = logging.getLogger(__name__)

# a drift net is an MLP from (X_0, X_t, t) in R^(2d+1) to R^d; without the
# time input it sees (X_0, X_t) only
DriftNet = MlpParams


@dataclass
class BridgeConfig:
    sigma: float = 0.1
    n_steps: int = 100  # S
    t_max: float | None = None  # None: 1 - 1/(2S)
    train_steps: int = 50000
    batch_size: int = 256
    hidden: list[int] = field(default_factory=lambda: [256, 256, 256])
    time_input: bool = True
    opt: OptimConfig = field(default_factory=lambda: OptimConfig(1e-3, 0.9, 0.999, "cosine", 0.01))

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise NumericsError("sigma must be >= 0")
        if self.n_steps < 2:
            raise NumericsError("need at least 2 integration steps")
        if not 0.0 < self.end_time < 1.0:
            raise NumericsError("t_max must lie in (0, 1)")

    @property
    def end_time(self) -> float:
        return 1.0 - 0.5 / self.n_steps if self.t_max is None else self.t_max


def bridge_interpolate(y, x, t, sigma: float, z):
    """Brownian-bridge point ``(1-t) y + t x + sigma sqrt(t(1-t)) z``; t may be per row."""
    t = np.asarray(t, dtype=DTYPE)
    if np.any((t < 0) | (t > 1)):
        raise NumericsError("t must lie in [0, 1]")
    y, x, z = (np.asarray(a, dtype=DTYPE) for a in (y, x, z))
    if t.ndim == 1 and y.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * y + t * x + sigma * np.sqrt(t * (1.0 - t)) * z


def init_drift(dim: int, cfg: BridgeConfig, rng: np.random.Generator) -> MlpParams:
    return init_mlp(MlpConfig(2 * dim + int(cfg.time_input), dim, list(cfg.hidden), "silu"), rng)


def has_time_input(psi: MlpParams) -> bool:
    return psi.cfg.in_dim == 2 * psi.cfg.out_dim + 1


def _drift_inputs(psi: MlpParams, x0: np.ndarray, xt: np.ndarray, t) -> np.ndarray:
    if not has_time_input(psi):
        return np.hstack([x0, xt])
    tcol = np.broadcast_to(np.asarray(t, dtype=DTYPE).reshape(-1, 1), (xt.shape[0], 1))
    return np.hstack([x0, xt, tcol])


def drift_eval(psi: MlpParams, x0: np.ndarray, xt: np.ndarray, t=0.0) -> np.ndarray:
    """X_psi(x0, xt, t); ``t`` is ignored by nets without a time input."""
    return mlp_forward(psi, _drift_inputs(psi, x0, xt, t))


class DriftTrainer:
    """Adam on the bridge-matching regression; ``step`` takes aligned (x, y) rows."""

    def __init__(self, psi: MlpParams, cfg: BridgeConfig, total_steps: int | None = None):
        self.psi = psi
        self.cfg = cfg
        self.opt = cfg.opt.make(cfg.train_steps if total_steps is None else total_steps)

    def step(self, xs: np.ndarray, ys: np.ndarray, rng: np.random.Generator) -> float:
        n, d = xs.shape
        t = rng.uniform(0.0, 1.0, size=n)
        z = rng.standard_normal((n, d))
        xt = bridge_interpolate(ys, xs, t, self.cfg.sigma, z)
        loss, g = mse_step_grads(self.psi, _drift_inputs(self.psi, ys, xt, t), xs)
        self.psi.flat = self.opt.step(self.psi.flat, g)
        return loss


def train_drift(
    u: IcnnParams,
    v_phi: MlpParams | None,
    data: PairedBatch,
    cfg: BridgeConfig,
    cs: ConjugateConfig,
    rng: np.random.Generator,
    psi: MlpParams | None = None,
    steps: int | None = None,
    log_every: int = 0,
) -> tuple[MlpParams, dict]:
    """Fit X_psi so the bridge SDE from y = M_theta(x) ends at x.

    The potential is frozen, so the solver images are computed once for the
    whole set; rows whose solve does not converge are dropped and counted.
    """
    steps = cfg.train_steps if steps is None else steps
    psi = psi if psi is not None else init_drift(data.dim, cfg, rng)
    info = {"cs_failures": 0, "loss": float("nan")}
    if steps == 0:
        return psi, info
    res = m_theta(u, v_phi, data.fxs, cs)
    ok = res.converged
    info["cs_failures"] = int((~ok).sum())
    if not np.any(ok):
        raise NumericsError("conjugate solver converged on no training point")
    if info["cs_failures"]:
        log.warning("bridge: %d conjugate solves failed and were skipped", info["cs_failures"])
    xs, ys = data.xs[ok], res.x[ok]
    trainer = DriftTrainer(psi, cfg, steps)
    for k in range(steps):
        idx = rng.integers(0, xs.shape[0], size=min(cfg.batch_size, xs.shape[0]))
        info["loss"] = trainer.step(xs[idx], ys[idx], rng)
        if log_every and (k + 1) % log_every == 0:
            log.info("bridge step %d loss %.5g", k + 1, info["loss"])
    return psi, info


def sde_sample(psi: MlpParams, y, cfg: BridgeConfig, rng: np.random.Generator, box=None) -> np.ndarray:
    """I_psi(y, z): integrate the bridge SDE from X_0 = y to t_max.

    Stochastic Heun with S uniform steps: an Euler-Maruyama predictor, then
    the trapezoidal drift average, both with the same Brownian increment.
    ``box = (lower, upper)`` clips the net's endpoint prediction to the
    support of the data: near t = 1 the drift is scaled by 1/(1-t), and an
    extrapolating prediction outside the data range can otherwise run away.
    """
    Y, single = as_batch(y, psi.cfg.out_dim)
    lo, hi = (None, None) if box is None else (np.asarray(b, dtype=DTYPE) for b in box)
    t_end = cfg.end_time
    h = t_end / cfg.n_steps
    X = Y.copy()
    sq = np.sqrt(h) * cfg.sigma

    def drift(t, Xs):
        end = drift_eval(psi, Y, Xs, t)
        if lo is not None:
            end = np.clip(end, lo, hi)
        return (end - Xs) / (1.0 - t)

    for k in range(cfg.n_steps):
        t = k * h
        dW = sq * rng.standard_normal(X.shape) if cfg.sigma > 0 else 0.0
        f0 = drift(t, X)
        Xp = X + h * f0 + dW
        X = X + 0.5 * h * (f0 + drift(t + h, Xp)) + dW
        if not np.all(np.isfinite(X)):
            raise NumericsError(f"non-finite SDE state at step {k}")
    return X[0] if single else X


I_psi = sde_sample
