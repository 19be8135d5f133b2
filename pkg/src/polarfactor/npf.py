"""Neural polar factorization: fit ``F = grad u o M`` from paired samples."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .conjugate import (
    ConjugateConfig,
    ConjugateError,
    ConjugateResult,
    amortization_loss,
    conjugate_solve,
    pick_warm_start,
)
from .icnn import IcnnConfig, IcnnParams, icnn_forward, icnn_grad_input, icnn_grad_params, init_icnn, project_convexity
from .mlp import MlpConfig, MlpParams, init_mlp, mlp_forward, mse_step_grads
from .numcore import DTYPE, Adam, NumericsError, Schedule, as_batch

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Raised when a loss turns non-finite; carries the last finite state."""

    def __init__(self, msg: str, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class PairedBatch:
    xs: np.ndarray
    fxs: np.ndarray

    def __post_init__(self) -> None:
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=DTYPE))
        self.fxs = np.atleast_2d(np.asarray(self.fxs, dtype=DTYPE))
        if self.xs.shape[0] != self.fxs.shape[0]:
            raise NumericsError(f"{self.xs.shape[0]} points but {self.fxs.shape[0]} images")
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.fxs))):
            raise NumericsError("paired batch contains non-finite values")

    def __len__(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]

    def take(self, idx) -> "PairedBatch":
        return PairedBatch(self.xs[idx], self.fxs[idx])

    def sample(self, rng: np.random.Generator, size: int) -> "PairedBatch":
        return self.take(rng.integers(0, len(self), size=size))

    def split(self, fraction: float, rng: np.random.Generator) -> tuple["PairedBatch", "PairedBatch"]:
        if not 0.0 < fraction < 1.0:
            raise NumericsError("split fraction must lie in (0, 1)")
        perm = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.take(np.sort(perm[:cut])), self.take(np.sort(perm[cut:]))


@dataclass
class OptimConfig:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    schedule: str = "cosine"
    alpha: float = 0.01
    decay_steps: int | None = None  # None: the training step count

    def make(self, steps: int) -> Adam:
        sched = Schedule(self.schedule, self.lr, self.alpha, self.decay_steps or max(steps, 1))
        return Adam(sched, self.b1, self.b2)


@dataclass
class NpfTrainConfig:
    steps: int = 50000
    batch_size: int = 256
    theta_opt: OptimConfig = field(default_factory=lambda: OptimConfig(1e-3, 0.5, 0.5, "cosine", 0.1))
    phi_opt: OptimConfig = field(default_factory=lambda: OptimConfig(5e-4, 0.9, 0.999, "cosine", 0.01))
    v_hidden: list[int] = field(default_factory=lambda: [512, 512])
    mxi_hidden: list[int] = field(default_factory=lambda: [512, 512])
    mxi_steps: int = 0
    mxi_opt: OptimConfig = field(default_factory=lambda: OptimConfig(5e-4, 0.9, 0.999, "cosine", 0.01))
    split: float = 0.85
    moment_init: bool = True

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise NumericsError("steps must be >= 0")
        if not 0.0 < self.split < 1.0:
            raise NumericsError("split must lie in (0, 1)")
        if self.batch_size < 1:
            raise NumericsError("batch_size must be >= 1")


@dataclass
class NpfModel:
    u: IcnnParams
    v_phi: MlpParams
    m_xi: MlpParams | None = None
    log: list[dict] = field(default_factory=list)
    steps_done: int = 0


def monge_loss(u: IcnnParams, v_phi: MlpParams, batch: PairedBatch, pred=None):
    """``mean_i u(x_i) + <V(F x_i), F x_i> - u(V(F x_i))`` and its gradient in theta.

    The amortization network is held fixed; ``pred`` may pass its
    precomputed outputs.
    """
    n = len(batch)
    if n == 0:
        raise NumericsError("empty batch")
    if pred is None:
        pred = mlp_forward(v_phi, batch.fxs)
    both = np.vstack([batch.xs, pred])
    vals = icnn_forward(u, both)
    loss = float((vals[:n].sum() + np.sum(pred * batch.fxs) - vals[n:].sum()) / n)
    weights = np.concatenate([np.full(n, 1.0 / n), np.full(n, -1.0 / n)])
    return loss, icnn_grad_params(u, both, weights)


def init_model(
    icnn_cfg: IcnnConfig, data: PairedBatch, cfg: NpfTrainConfig, rng: np.random.Generator
) -> NpfModel:
    moments = None
    if cfg.moment_init:
        moments = (data.xs.mean(0), data.xs.var(0), data.fxs.mean(0), data.fxs.var(0))
    u = init_icnn(icnn_cfg, rng, moments)
    v_phi = init_mlp(MlpConfig(data.dim, data.dim, list(cfg.v_hidden), "relu"), rng, out_scale=0.1)
    return NpfModel(u, v_phi)


class PotentialTrainer:
    """Alternating updates of the amortization network and the potential.

    Kept as an object so the sampler can keep stepping it online.
    """

    def __init__(self, model: NpfModel, cfg: NpfTrainConfig, cs: ConjugateConfig, total_steps: int | None = None):
        self.model = model
        self.cfg = cfg
        self.cs = cs
        steps = cfg.steps if total_steps is None else total_steps
        self.opt_theta = cfg.theta_opt.make(steps)
        self.opt_phi = cfg.phi_opt.make(steps)
        self.skipped = 0

    def step(self, batch: PairedBatch) -> tuple[dict, ConjugateResult | None]:
        model = self.model
        rec = {"step": model.steps_done, "loss_monge": np.nan, "loss_dual": np.nan, "cs_iters": np.nan, "cs_converged": 0.0}
        res = None
        try:
            loss_d, g_phi, res = amortization_loss(model.v_phi, batch.fxs, model.u, self.cs)
            model.v_phi.flat = self.opt_phi.step(model.v_phi.flat, g_phi)
            rec.update(loss_dual=loss_d, cs_iters=float(res.iterations.mean()), cs_converged=float(res.converged.mean()))
        except ConjugateError as exc:
            self.skipped += 1
            # first occurrence and every 100th after that, to keep logs readable
            if self.skipped % 100 == 1:
                log.warning("step %d: skipped amortization update (%s); %d so far", model.steps_done, exc, self.skipped)
        pred = mlp_forward(model.v_phi, batch.fxs)
        if res is not None:
            # solver-refined conjugate points where available
            pred[res.converged] = res.x[res.converged]
        loss_m, g_theta = monge_loss(model.u, model.v_phi, batch, pred)
        if not (np.isfinite(loss_m) and np.all(np.isfinite(g_theta))):
            raise TrainingDivergence(f"Monge loss diverged at step {model.steps_done}")
        model.u.flat = self.opt_theta.step(model.u.flat, g_theta)
        model.u = project_convexity(model.u)
        rec["loss_monge"] = loss_m
        model.steps_done += 1
        model.log.append(rec)
        return rec, res


def train_potential(
    data: PairedBatch,
    icnn_cfg: IcnnConfig,
    cfg: NpfTrainConfig,
    cs: ConjugateConfig,
    rng: np.random.Generator,
    model: NpfModel | None = None,
    callback=None,
) -> NpfModel:
    """Fit u_theta and V_phi by alternating one dual step and one Monge step.

    Batches are drawn with replacement from ``data``. With ``steps = 0`` the
    initial model comes back unchanged.
    """
    model = model or init_model(icnn_cfg, data, cfg, rng)
    trainer = PotentialTrainer(model, cfg, cs)
    last_good = (model.u.copy(), model.v_phi.copy())
    for k in range(cfg.steps):
        batch = data.sample(rng, cfg.batch_size)
        try:
            rec, _ = trainer.step(batch)
        except (TrainingDivergence, NumericsError) as exc:
            raise TrainingDivergence(str(exc), last_good) from exc
        if (k + 1) % 100 == 0:
            last_good = (model.u.copy(), model.v_phi.copy())
        if callback is not None:
            callback(k, model, rec)
    return model


def m_theta(u: IcnnParams, v_phi: MlpParams | None, fx, cs: ConjugateConfig | None = None) -> ConjugateResult:
    """Implicit measure-preserving map: conjugate gradient of u at F(x).

    Takes the images ``F(x)`` directly; the warm start is V_phi's prediction
    when available, else F(x) itself.
    """
    FX, _ = as_batch(fx, u.cfg.dim)
    x0 = FX if v_phi is None else pick_warm_start(u, FX, mlp_forward(v_phi, FX), FX)
    res = conjugate_solve(u, FX, x0=x0, cfg=cs)
    if np.ndim(fx) == 1:
        return ConjugateResult(res.x[0], res.converged[0], res.iterations[0], res.residual[0])
    return res


def train_m_xi(
    model: NpfModel,
    data: PairedBatch,
    cfg: NpfTrainConfig,
    cs: ConjugateConfig,
    rng: np.random.Generator,
    steps: int | None = None,
) -> MlpParams:
    """Explicit measure-preserving map regressing x_i onto M_theta(x_i).

    The potential is frozen here, so the solver targets are computed once.
    """
    steps = cfg.mxi_steps if steps is None else steps
    m_xi = model.m_xi or init_mlp(MlpConfig(data.dim, data.dim, list(cfg.mxi_hidden), "relu"), rng, out_scale=0.1)
    if steps == 0:
        model.m_xi = m_xi
        return m_xi
    res = m_theta(model.u, model.v_phi, data.fxs, cs)
    ok = res.converged
    if not np.any(ok):
        raise ConjugateError("no converged targets for M_xi; raise max_iterations")
    log.info("M_xi: %d/%d converged targets", int(ok.sum()), ok.size)
    xs, targets = data.xs[ok], res.x[ok]
    opt = cfg.mxi_opt.make(steps)
    for _ in range(steps):
        idx = rng.integers(0, xs.shape[0], size=cfg.batch_size)
        _, g = mse_step_grads(m_xi, xs[idx], targets[idx])
        m_xi.flat = opt.step(m_xi.flat, g)
    model.m_xi = m_xi
    return m_xi


def transport(model: NpfModel, x) -> np.ndarray:
    """The gradient map grad u_theta."""
    return icnn_grad_input(model.u, x)


def write_log(records: list[dict], path) -> None:
    fields = ["step", "loss_monge", "loss_dual", "cs_iters", "cs_converged"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in fields})
