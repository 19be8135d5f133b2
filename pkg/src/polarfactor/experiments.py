"""End-to-end runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bridge import BridgeConfig, sde_sample, train_drift
from .config import MetricsSection
from .conjugate import ConjugateConfig
from .fields import BENCHMARKS, BenchmarkSpec, VectorFieldSource, architecture_variant
from .icnn import IcnnConfig, icnn_grad_input
from .metrics import (
    MetricRow,
    SinkhornConfig,
    b_alpha_set,
    cosine,
    epsilon_rule,
    l2_uvp,
    sinkhorn_divergence,
)
from .mlp import MlpParams, mlp_forward
from .npf import NpfModel, NpfTrainConfig, OptimConfig, PairedBatch, m_theta, train_m_xi, train_potential
from .numcore import NumericsError, make_rng

log = logging.getLogger(__name__)


@dataclass
class BenchmarkRun:
    steps: int = 1000
    batch_size: int = 128
    n_train: int = 20000
    n_eval: int = 2048
    repeats: int = 1
    theta_opt: OptimConfig = field(default_factory=lambda: OptimConfig(1e-3, 0.5, 0.5, "cosine", 0.01))
    phi_opt: OptimConfig = field(default_factory=lambda: OptimConfig(1e-3, 0.9, 0.999, "cosine", 0.01))
    v_hidden: list[int] = field(default_factory=lambda: [64, 64])
    cs: ConjugateConfig = field(default_factory=ConjugateConfig)


def run_benchmark(spec: BenchmarkSpec, run: BenchmarkRun, seed: int) -> dict:
    """Train one architecture variant and score it.

    Source and target samples are drawn independently. The potential starts
    near the identity map (no moment matching), since a diagonal moment
    fit would already solve the Gaussian benchmark at initialization.
    """
    bench = BENCHMARKS[spec.benchmark](spec.dim)
    icnn_cfg = architecture_variant(spec)
    values = []
    for r in range(run.repeats):
        rng = make_rng([seed, r])
        data = bench.paired(rng, run.n_train)
        cfg = NpfTrainConfig(
            steps=run.steps,
            batch_size=run.batch_size,
            theta_opt=run.theta_opt,
            phi_opt=run.phi_opt,
            v_hidden=list(run.v_hidden),
            moment_init=False,
        )
        model = train_potential(data, icnn_cfg, cfg, run.cs, rng)
        x = bench.sample_source(rng, run.n_eval)
        mapped = icnn_grad_input(model.u, x)
        if bench.reference_map is not None:
            values.append(l2_uvp(mapped, bench.reference_map, x, bench.target_variance))
        else:
            y = bench.sample_target(rng, run.n_eval)
            eps = epsilon_rule(y, rng=rng)
            values.append(sinkhorn_divergence(mapped, y, SinkhornConfig(eps, tol=1e-6)).value)
    v = np.asarray(values)
    stderr = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    metric = "l2_uvp" if bench.reference_map is not None else "sinkhorn"
    return {
        "variant": spec.variant,
        "benchmark": spec.benchmark,
        "d": spec.dim,
        "metric": metric,
        "value": float(v.mean()),
        "stderr": stderr,
        "n_params": icnn_cfg.n_params(),
    }


# polar factorization pipeline ---------------------------------------------


@dataclass
class Standardizer:
    """Affine change of coordinates ``x' = (x - center) / x_scale`` and ``F' = F / f_scale``.

    Both scales are scalars, so a factorization in the new coordinates maps
    back to one of the original field.
    """

    center: np.ndarray
    x_scale: float
    f_scale: float

    @classmethod
    def fit(cls, data: PairedBatch) -> "Standardizer":
        center = data.xs.mean(0)
        x_scale = float(np.sqrt(np.mean((data.xs - center) ** 2)))
        f_scale = float(np.sqrt(np.mean(data.fxs**2)))
        if not (x_scale > 0 and f_scale > 0):
            raise NumericsError("degenerate data: zero spread in positions or field values")
        return cls(center, x_scale, f_scale)

    def x(self, xs: np.ndarray) -> np.ndarray:
        return (xs - self.center) / self.x_scale

    def x_inv(self, xs: np.ndarray) -> np.ndarray:
        return xs * self.x_scale + self.center

    def apply(self, data: PairedBatch) -> PairedBatch:
        return PairedBatch(self.x(data.xs), data.fxs / self.f_scale)

    def to_meta(self) -> dict:
        return {"center": self.center.tolist(), "x_scale": self.x_scale, "f_scale": self.f_scale}

    @classmethod
    def from_meta(cls, m: dict) -> "Standardizer":
        return cls(np.asarray(m["center"], dtype=float), float(m["x_scale"]), float(m["f_scale"]))


def standardized_field(source: VectorFieldSource, std: Standardizer):
    """The field as seen in standardized coordinates."""
    return lambda xs: source.evaluate(std.x_inv(xs)) / std.f_scale


@dataclass
class Factorization:
    model: NpfModel
    std: Standardizer
    train: PairedBatch
    test: PairedBatch
    rows: list[MetricRow] = field(default_factory=list)


def _disjoint_pair(x: np.ndarray, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[0] < 2 * size:
        raise NumericsError(f"baseline needs {2 * size} points, got {x.shape[0]}")
    perm = rng.permutation(x.shape[0])
    return x[perm[:size]], x[perm[size : 2 * size]]


def _sinkhorn_cfg(eps: float, mc: MetricsSection) -> SinkhornConfig:
    return SinkhornConfig(epsilon=eps, max_iterations=mc.max_iterations, tol=mc.tol)


def polar_criteria(
    model: NpfModel,
    train: PairedBatch,
    test: PairedBatch,
    cs: ConjugateConfig,
    mc: MetricsSection,
    rng: np.random.Generator,
) -> list[MetricRow]:
    """The three factorization checks on held-out pairs, each with its baseline.

    pushforward: S(grad u(x_j), F(x_j)) against two disjoint image batches;
    preserve_*: S(M(x_j), x_j) against two disjoint position batches, for
    M_theta and (when trained) M_xi; reconstruction: mean ||F - grad u o M||
    with mean ||F|| as its baseline. Batches have the size of the test set.
    """
    m = min(len(test), mc.n_eval)
    # a random subset: grid splits come back in node order, so a prefix would be one strip of the grid
    test = test.take(np.sort(rng.choice(len(test), size=m, replace=False)))
    pool = PairedBatch(np.vstack([train.xs, test.xs]), np.vstack([train.fxs, test.fxs]))
    rows = []

    eps_f = epsilon_rule(pool.fxs, rng=rng, n_mc=mc.n_mc, factor=mc.eps_factor)
    sk = _sinkhorn_cfg(eps_f, mc)
    est = sinkhorn_divergence(icnn_grad_input(model.u, test.xs), test.fxs, sk).value
    b1, b2 = _disjoint_pair(pool.fxs, m, rng)
    rows.append(MetricRow("pushforward", est, sinkhorn_divergence(b1, b2, sk).value, eps_f, m, m))

    eps_x = epsilon_rule(pool.xs, rng=rng, n_mc=mc.n_mc, factor=mc.eps_factor)
    sk = _sinkhorn_cfg(eps_x, mc)
    p1, p2 = _disjoint_pair(pool.xs, m, rng)
    base_x = sinkhorn_divergence(p1, p2, sk).value
    res = m_theta(model.u, model.v_phi, test.fxs, cs)
    ok = res.converged
    if not np.any(ok):
        raise NumericsError("conjugate solver converged on no test point")
    rows.append(MetricRow("preserve_theta", sinkhorn_divergence(res.x[ok], test.xs, sk).value, base_x, eps_x, int(ok.sum()), m))
    maps = {"theta": res.x}
    if model.m_xi is not None:
        maps["xi"] = mlp_forward(model.m_xi, test.xs)
        rows.append(MetricRow("preserve_xi", sinkhorn_divergence(maps["xi"], test.xs, sk).value, base_x, eps_x, m, m))

    mean_norm = float(np.mean(np.linalg.norm(test.fxs, axis=1)))
    which = "xi" if "xi" in maps else "theta"
    rec = icnn_grad_input(model.u, maps[which])
    err = float(np.mean(np.linalg.norm(rec - test.fxs, axis=1)))
    rows.append(MetricRow(f"reconstruction_{which}", err, mean_norm, float("nan"), m, m))
    return rows


def factorize(
    data: PairedBatch,
    icnn_cfg: IcnnConfig,
    cfg: NpfTrainConfig,
    cs: ConjugateConfig,
    mc: MetricsSection,
    rng: np.random.Generator,
    split_rng: np.random.Generator | None = None,
    callback=None,
) -> Factorization:
    """Standardize, split, train u_theta / V_phi (and M_xi), then score on the test split."""
    std = Standardizer.fit(data)
    train, test = std.apply(data).split(cfg.split, split_rng or rng)
    model = train_potential(train, icnn_cfg, cfg, cs, rng, callback=callback)
    if cfg.mxi_steps > 0:
        train_m_xi(model, train, cfg, cs, rng)
    rows = polar_criteria(model, train, test, cs, mc, rng)
    return Factorization(model, std, train, test, rows)


def invert(
    fz: Factorization,
    bridge_cfg: BridgeConfig,
    cs: ConjugateConfig,
    mc: MetricsSection,
    rng: np.random.Generator,
    field_fn=None,
    psi: MlpParams | None = None,
) -> tuple[MlpParams, list[MetricRow]]:
    """Train I_psi on the training split and score it on the test split.

    ``field_fn`` evaluates the field at arbitrary standardized points; it is
    needed for the cosine score, which is skipped without it.
    """
    psi, _ = train_drift(fz.model.u, fz.model.v_phi, fz.train, bridge_cfg, cs, rng, psi=psi)
    rows = inverse_metrics(fz, psi, bridge_cfg, cs, mc, rng, field_fn)
    return psi, rows


def inverse_metrics(fz, psi, bridge_cfg, cs, mc, rng, field_fn=None) -> list[MetricRow]:
    test = fz.test
    res = m_theta(fz.model.u, fz.model.v_phi, test.fxs, cs)
    ok = res.converged
    xs, images = test.xs[ok], res.x[ok]
    pool = np.vstack([fz.train.xs, fz.test.xs])
    box = (pool.min(0), pool.max(0))
    eps = epsilon_rule(pool, rng=rng, n_mc=mc.n_mc, factor=mc.eps_factor)
    sk = _sinkhorn_cfg(eps, mc)
    c = min(mc.c, xs.shape[0])
    rows = []
    anchors = rng.choice(xs.shape[0], size=min(mc.n_anchors, xs.shape[0]), replace=False)
    vals = []
    for k in anchors:
        idx, _ = b_alpha_set(images, int(k), c)
        gen = sde_sample(psi, images[idx], bridge_cfg, rng, box)
        vals.append(sinkhorn_divergence(gen, xs[idx], sk).value)
    base = []
    for _ in anchors:
        p1, p2 = _disjoint_pair(pool, c, rng)
        base.append(sinkhorn_divergence(p1, p2, sk).value)
    rows.append(MetricRow("posterior", float(np.mean(vals)), float(np.mean(base)), eps, c, len(anchors)))
    if field_fn is not None:
        sub = np.sort(rng.choice(xs.shape[0], size=min(xs.shape[0], mc.n_eval), replace=False))
        m = sub.size
        fx = test.fxs[ok][sub]
        p = images[sub]
        scores = []
        for _ in range(mc.cosine_draws):
            scores.append(cosine(field_fn(sde_sample(psi, p, bridge_cfg, rng, box)), fx))
        rows.append(MetricRow("cosine_inversion", float(np.mean(scores)), 1.0, float("nan"), m, mc.cosine_draws))
    return rows
