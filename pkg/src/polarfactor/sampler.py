"""Langevin sampling of a non-convex objective, plain or assisted by its
polar factorization (global moves through the convex potential)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bridge import BridgeConfig, DriftTrainer, sde_sample
from .conjugate import ConjugateConfig, ConjugateError
from .fields import Objective
from .icnn import icnn_grad_input
from .mlp import MlpParams
from .npf import NpfModel, NpfTrainConfig, OptimConfig, PairedBatch, PotentialTrainer, m_theta
from .numcore import DTYPE, NumericsError

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    gamma_f: float = 1e-4  # LMC step on g
    gamma_u: float = 1e-4  # LMC step on u
    kappa_f: float = 1000.0  # multiplier in front of grad g
    kappa_u: float = 1000.0  # multiplier in front of grad u
    period: int = 200  # N
    steps: int = 60000  # k_max
    n_particles: int = 1024
    warmup_steps: int = 30000
    warmup_lr: float = 0.1
    refresh: bool = True
    basin_radius: float = 0.5
    trace_every: int = 1

    def __post_init__(self) -> None:
        if not (self.gamma_f > 0 and self.gamma_u > 0):
            raise NumericsError("LMC step sizes must be positive")
        if self.period < 1:
            raise NumericsError("period N must be >= 1")
        if self.steps < 1:
            raise NumericsError("k_max must be >= 1")
        if self.n_particles < 1 or self.warmup_steps < 0 or self.trace_every < 1:
            raise NumericsError("invalid particle count, warm-up length or trace interval")


@dataclass
class ParticleState:
    x: np.ndarray
    step: int = 0
    grad_norm: np.ndarray | None = None
    value: np.ndarray | None = None
    frozen: int = 0  # cumulative count of particle-steps skipped for non-finite gradients


@dataclass
class NpfSampler:
    """A trained factorization plus the trainers that refresh it online."""

    model: NpfModel
    psi: MlpParams
    bridge: BridgeConfig
    cs: ConjugateConfig
    potential: PotentialTrainer | None = None
    drift: DriftTrainer | None = None
    # the factorization is of grad g / field_scale in coordinates (x - center) / x_scale
    field_scale: float = 1.0
    center: np.ndarray | float = 0.0
    x_scale: float = 1.0

    def to_model(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) / self.x_scale

    def from_model(self, x: np.ndarray) -> np.ndarray:
        return x * self.x_scale + self.center

    @classmethod
    def with_refresh(
        cls,
        model: NpfModel,
        psi: MlpParams,
        bridge: BridgeConfig,
        cs: ConjugateConfig,
        theta_opt: OptimConfig,
        phi_opt: OptimConfig,
        psi_opt: OptimConfig,
        steps: int,
        field_scale: float = 1.0,
        center: np.ndarray | float = 0.0,
        x_scale: float = 1.0,
    ) -> "NpfSampler":
        pcfg = NpfTrainConfig(steps=max(steps, 1), theta_opt=theta_opt, phi_opt=phi_opt)
        bcfg = BridgeConfig(
            sigma=bridge.sigma, n_steps=bridge.n_steps, t_max=bridge.t_max, hidden=list(bridge.hidden),
            time_input=bridge.time_input, opt=psi_opt,
        )
        return cls(
            model, psi, bridge, cs, PotentialTrainer(model, pcfg, cs, steps), DriftTrainer(psi, bcfg, steps),
            field_scale, center, x_scale,
        )


def clamp(x: np.ndarray, lower, upper) -> np.ndarray:
    return np.clip(x, lower, upper)


def lmc_step(
    grad: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    gamma: float,
    rng: np.random.Generator,
    kappa: float = 1.0,
    z: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """``x - gamma kappa grad(x) + sqrt(2 gamma) z``.

    Rows with a non-finite gradient stay where they are; their count is
    returned next to the new positions.
    """
    if gamma < 0:
        raise NumericsError("gamma must be >= 0")
    x = np.asarray(x, dtype=DTYPE)
    g = grad(x)
    bad = ~np.all(np.isfinite(g), axis=1)
    if z is None:
        z = rng.standard_normal(x.shape)
    out = x - gamma * kappa * np.where(bad[:, None], 0.0, g) + np.sqrt(2.0 * gamma) * z
    out[bad] = x[bad]
    if np.any(bad):
        log.warning("LMC: %d particles frozen on non-finite gradients", int(bad.sum()))
    return out, int(bad.sum())


def critical_point_sample(
    npf: NpfSampler, v, rng: np.random.Generator, count: int, obj: Objective | None = None
) -> np.ndarray:
    """Points whose gradient is approximately ``v``: I_psi(grad u*(v), z) for fresh z.

    With ``obj`` the bridge's endpoint predictions are kept inside its box Omega.
    """
    v = np.asarray(v, dtype=DTYPE).reshape(1, -1) / npf.field_scale
    res = m_theta(npf.model.u, npf.model.v_phi, v, npf.cs)
    if not res.converged[0]:
        raise ConjugateError(f"conjugate solver did not converge at v (residual {res.residual[0]:.3g})")
    box = None if obj is None else _model_box(npf, obj)
    return npf.from_model(sde_sample(npf.psi, np.repeat(res.x, count, axis=0), npf.bridge, rng, box))


def _model_box(npf: NpfSampler, obj: Objective) -> tuple[np.ndarray, np.ndarray]:
    return npf.to_model(obj.lower), npf.to_model(obj.upper)


def basin_hits(obj: Objective, x: np.ndarray, radius: float) -> np.ndarray:
    """Per-basin flags: some particle lies within ``radius`` of that minimum."""
    d = np.linalg.norm(x[:, None, :] - obj.minima[None, :, :], axis=2)
    return np.any(d <= radius, axis=0)


def warmup(obj: Objective, x: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Plain gradient descent, clamped to Omega."""
    for _ in range(cfg.warmup_steps):
        g = obj.grad(x)
        ok = np.all(np.isfinite(g), axis=1)
        x = clamp(np.where(ok[:, None], x - cfg.warmup_lr * g, x), obj.lower, obj.upper)
    return x


def _lift_and_drop(npf: NpfSampler, obj: Objective, x: np.ndarray, cfg: SamplerConfig, rng) -> np.ndarray:
    u = npf.model.u
    fx = obj.grad(x) / npf.field_scale
    res = m_theta(u, npf.model.v_phi, fx, npf.cs)
    y = res.x
    for _ in range(cfg.period):
        y, _ = lmc_step(lambda p: icnn_grad_input(u, p), y, cfg.gamma_u, rng, cfg.kappa_u)
    new = npf.from_model(sde_sample(npf.psi, y, npf.bridge, rng, _model_box(npf, obj)))
    # particles whose lift failed, or whose drop left the finite range, stay put
    ok = res.converged & np.all(np.isfinite(new), axis=1)
    if not np.all(ok):
        log.info("LMC-NPF: %d particles kept in place after a failed jump", int((~ok).sum()))
    return np.where(ok[:, None], new, x)


def _refresh(npf: NpfSampler, x: np.ndarray, fx: np.ndarray, rng) -> None:
    if npf.potential is None:
        return
    xm = npf.to_model(x)
    _, res = npf.potential.step(PairedBatch(xm, fx / npf.field_scale))
    if npf.drift is not None and res is not None and np.any(res.converged):
        ok = res.converged
        npf.drift.step(xm[ok], res.x[ok], rng)


def lmc_npf(
    obj: Objective,
    cfg: SamplerConfig,
    npf: NpfSampler | None,
    rng: np.random.Generator,
    x0: np.ndarray | None = None,
) -> tuple[ParticleState, list[dict]]:
    """LMC-NPF; with ``npf=None`` this is plain LMC on g at the same budget.

    Every N-th step lifts the particles to the potential's space, runs N LMC
    steps on u and draws them back through I_psi; the other steps are LMC
    steps on g. After each step the factorization is refreshed on the
    particles and their gradients from before the step. Particles are
    clamped to Omega throughout.
    """
    d = obj.lower.size
    if x0 is None:
        x = rng.uniform(obj.lower, obj.upper, size=(cfg.n_particles, d))
    else:
        x = np.array(x0, dtype=DTYPE).reshape(-1, d)
    x = warmup(obj, clamp(x, obj.lower, obj.upper), cfg)
    state = ParticleState(x)
    visited = basin_hits(obj, x, cfg.basin_radius)
    trace: list[dict] = []
    for k in range(cfg.steps):
        fx = obj.grad(state.x)
        if npf is not None and k % cfg.period == 0:
            new = _lift_and_drop(npf, obj, state.x, cfg, rng)
        else:
            new, bad = lmc_step(obj.grad, state.x, cfg.gamma_f, rng, cfg.kappa_f)
            state.frozen += bad
        if npf is not None and cfg.refresh:
            ok = np.all(np.isfinite(fx), axis=1)
            _refresh(npf, state.x[ok], fx[ok], rng)
        state.x = clamp(new, obj.lower, obj.upper)
        state.step = k + 1
        visited |= basin_hits(obj, state.x, cfg.basin_radius)
        if state.step % cfg.trace_every == 0 or state.step == cfg.steps:
            g = obj.grad(state.x)
            state.grad_norm = np.linalg.norm(g, axis=1)
            state.value = obj.value(state.x)
            trace.append(
                {
                    "step": state.step,
                    "mean_grad_norm": float(state.grad_norm.mean()),
                    "mean_value": float(state.value.mean()),
                    "basins": nearest_basin_histogram(obj, state.x, cfg.basin_radius),
                    "visited": int(visited.sum()),
                }
            )
    return state, trace


def nearest_basin_histogram(obj: Objective, x: np.ndarray, radius: float) -> list[int]:
    """Particle counts within ``radius`` of each minimum, plus a last 'elsewhere' bin."""
    d = np.linalg.norm(x[:, None, :] - obj.minima[None, :, :], axis=2)
    near = np.argmin(d, axis=1)
    inside = d[np.arange(x.shape[0]), near] <= radius
    counts = np.bincount(near[inside], minlength=obj.minima.shape[0]).tolist()
    return counts + [int((~inside).sum())]


def basins_visited(trace: list[dict]) -> int:
    return trace[-1]["visited"] if trace else 0


def write_trace(trace: list[dict], path, n_basins: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_grad_norm", "mean_value", "visited", *[f"basin{i}" for i in range(n_basins)], "elsewhere"])
        for r in trace:
            w.writerow([r["step"], f"{r['mean_grad_norm']:.10g}", f"{r['mean_value']:.10g}", r["visited"], *r["basins"]])
