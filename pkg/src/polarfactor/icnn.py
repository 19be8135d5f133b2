"""Input convex neural network with (diagonal + low-rank) quadratic layers.

The potential is

    z_0     = act(Q_0(x) + B_0 x + c_0)
    z_{l+1} = act(W_l z_l + Q_l(x) + B_l x + c_l)
    u(x)    = w_L . z_{L-1} + Q_{A_L, delta_L}(x) + b_L . x + c_L

where each hidden unit i of layer l carries its own form
``Q(x)_i = ||delta_i * x||^2 + ||A_i x||^2``. Convexity needs W, w_L and every
delta non-negative, which ``project_convexity`` restores after each step.
Gradients (input and parameter) are written out by hand and batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    CONVEX_ACTIVATIONS,
    DTYPE,
    FlatParams,
    NumericsError,
    activation,
    as_batch,
)


@dataclass
class IcnnConfig:
    dim: int
    width: int = 64
    depth: int = 4
    rank: int = 1
    activation: str = "elu"
    delta_min: float = 1e-2
    hidden_quadratic: bool = True
    hidden_bias: bool = True
    final_diag: bool = True
    final_rank: int | None = None  # None: same as ``rank``
    init_scale: float = 0.05

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise NumericsError("dim must be >= 1")
        if self.depth < 1:
            raise NumericsError("depth L must be >= 1")
        if self.width < 1:
            raise NumericsError("width q must be >= 1")
        if self.hidden_quadratic and self.rank < 1:
            raise NumericsError("quadratic rank r must be >= 1")
        if self.activation not in CONVEX_ACTIVATIONS:
            raise NumericsError(
                f"activation {self.activation!r} is not convex non-decreasing; use one of {CONVEX_ACTIVATIONS}"
            )
        if self.delta_min < 0:
            raise NumericsError("delta_min must be non-negative")

    @property
    def out_rank(self) -> int:
        return self.rank if self.final_rank is None else self.final_rank

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        d, q, r = self.dim, self.width, self.rank
        out = []
        for l in range(self.depth):
            if l > 0:
                out.append((f"W{l}", (q, q)))
            out.append((f"B{l}", (q, d)))
            if self.hidden_bias:
                out.append((f"c{l}", (q,)))
            if self.hidden_quadratic:
                out.append((f"D{l}", (q, d)))
                out.append((f"A{l}", (q, r, d)))
        out.append(("wL", (q,)))
        if self.final_diag:
            out.append(("dL", (d,)))
        if self.out_rank > 0:
            out.append(("AL", (self.out_rank, d)))
        out.append(("bL", (d,)))
        out.append(("cL", ()))
        return out

    def n_params(self) -> int:
        return sum(int(np.prod(s)) if s else 1 for _, s in self.layout())


class IcnnParams(FlatParams):
    def __init__(self, cfg: IcnnConfig, flat: np.ndarray | None = None):
        super().__init__(cfg.layout(), flat)
        self.cfg = cfg

    def copy(self) -> "IcnnParams":
        return IcnnParams(self.cfg, self.flat.copy())

    def is_feasible(self) -> bool:
        return bool(np.array_equal(project_convexity(self).flat, self.flat))


def quadratic_form(A, delta, x) -> np.ndarray | float:
    """``||delta * x||^2 + ||A x||^2`` for a vector or a batch of rows."""
    A = np.atleast_2d(np.asarray(A, dtype=DTYPE))
    delta = np.asarray(delta, dtype=DTYPE)
    X, single = as_batch(x)
    if A.shape[1] != X.shape[1] or delta.shape != (X.shape[1],):
        raise NumericsError(f"shape mismatch: A {A.shape}, delta {delta.shape}, x {X.shape}")
    val = (X * X) @ (delta * delta) + np.sum((X @ A.T) ** 2, axis=1)
    return float(val[0]) if single else val


def _forward(p: IcnnParams, X: np.ndarray):
    cfg = p.cfg
    act, _ = activation(cfg.activation)
    X2 = X * X
    n = X.shape[0]
    cache = []
    z = None
    for l in range(cfg.depth):
        pre = X @ p[f"B{l}"].T
        if cfg.hidden_bias:
            pre += p[f"c{l}"]
        AX = None
        if cfg.hidden_quadratic:
            D = p[f"D{l}"]
            A = p[f"A{l}"]
            AX = (X @ A.reshape(-1, cfg.dim).T).reshape(n, cfg.width, cfg.rank)
            pre += X2 @ (D * D).T + np.sum(AX * AX, axis=2)
        if l > 0:
            pre += z @ p[f"W{l}"].T
        cache.append((z, pre, AX))
        z = act(pre)
    out = z @ p["wL"] + X @ p["bL"] + p["cL"]
    AXL = None
    if cfg.final_diag:
        dL = p["dL"]
        out += X2 @ (dL * dL)
    if cfg.out_rank > 0:
        AXL = X @ p["AL"].T
        out += np.sum(AXL * AXL, axis=1)
    return out, (X2, cache, z, AXL)


def _backward(p: IcnnParams, X: np.ndarray, g: np.ndarray, cache, want_params: bool, want_input: bool):
    """Reverse pass for ``sum_n g_n u(x_n)``."""
    cfg = p.cfg
    _, dact = activation(cfg.activation)
    X2, layers, z_last, AXL = cache
    grads = p.zeros_like() if want_params else None
    gv = (lambda name: p.view_of(grads, name)) if want_params else None
    gX = None

    if want_params:
        gv("wL")[...] = z_last.T @ g
        gv("bL")[...] = X.T @ g
        gv("cL")[...] = g.sum()
        if cfg.final_diag:
            gv("dL")[...] = 2.0 * p["dL"] * (g @ X2)
        if cfg.out_rank > 0:
            gv("AL")[...] = 2.0 * (g[:, None] * AXL).T @ X
    if want_input:
        lin = p["bL"][None, :]
        gX = g[:, None] * lin
        if cfg.final_diag:
            gX = gX + 2.0 * g[:, None] * X * (p["dL"] ** 2)
        if cfg.out_rank > 0:
            gX = gX + 2.0 * (g[:, None] * AXL) @ p["AL"]

    gz = g[:, None] * p["wL"][None, :]
    for l in range(cfg.depth - 1, -1, -1):
        z_prev, pre, AX = layers[l]
        gpre = gz * dact(pre)
        B = p[f"B{l}"]
        if want_params:
            gv(f"B{l}")[...] = gpre.T @ X
            if cfg.hidden_bias:
                gv(f"c{l}")[...] = gpre.sum(axis=0)
        if want_input:
            gX = gX + gpre @ B
        if cfg.hidden_quadratic:
            D = p[f"D{l}"]
            A2 = p[f"A{l}"].reshape(-1, cfg.dim)
            G2 = (gpre[:, :, None] * AX).reshape(X.shape[0], -1)
            if want_params:
                gv(f"D{l}")[...] = 2.0 * D * (gpre.T @ X2)
                gv(f"A{l}")[...] = (2.0 * G2.T @ X).reshape(cfg.width, cfg.rank, cfg.dim)
            if want_input:
                gX = gX + 2.0 * X * (gpre @ (D * D)) + 2.0 * G2 @ A2
        if l > 0:
            W = p[f"W{l}"]
            if want_params:
                gv(f"W{l}")[...] = gpre.T @ z_prev
            gz = gpre @ W
    return grads, gX


def icnn_forward(p: IcnnParams, x):
    """Potential value u(x); scalar for a vector input, (n,) for a batch."""
    X, single = as_batch(x, p.cfg.dim)
    out, _ = _forward(p, X)
    return float(out[0]) if single else out


def icnn_value_and_grad(p: IcnnParams, x):
    X, single = as_batch(x, p.cfg.dim)
    out, cache = _forward(p, X)
    _, gX = _backward(p, X, np.ones(X.shape[0]), cache, want_params=False, want_input=True)
    if single:
        return float(out[0]), gX[0]
    return out, gX


def icnn_grad_input(p: IcnnParams, x) -> np.ndarray:
    """Gradient of u with respect to its input (the transport map)."""
    return icnn_value_and_grad(p, x)[1]


def icnn_grad_params(p: IcnnParams, x, upstream=1.0) -> np.ndarray:
    """Flat gradient of ``sum_n upstream_n * u(x_n)`` with respect to all parameters."""
    X, _ = as_batch(x, p.cfg.dim)
    g = np.broadcast_to(np.asarray(upstream, dtype=DTYPE), (X.shape[0],)).astype(DTYPE)
    _, cache = _forward(p, X)
    grads, _ = _backward(p, X, g, cache, want_params=True, want_input=False)
    return grads


def project_convexity(p: IcnnParams) -> IcnnParams:
    """Clamp W, w_L and the hidden deltas at 0 and delta_L at delta_min."""
    out = p.copy()
    cfg = p.cfg
    for l in range(1, cfg.depth):
        np.maximum(out[f"W{l}"], 0.0, out=out[f"W{l}"])
    if cfg.hidden_quadratic:
        for l in range(cfg.depth):
            np.maximum(out[f"D{l}"], 0.0, out=out[f"D{l}"])
    np.maximum(out["wL"], 0.0, out=out["wL"])
    if cfg.final_diag:
        np.maximum(out["dL"], cfg.delta_min, out=out["dL"])
    return out


def init_icnn(cfg: IcnnConfig, rng: np.random.Generator, moments=None) -> IcnnParams:
    """Feasible initial potential whose gradient is close to an affine map.

    Without ``moments`` the gradient starts near the identity. With
    ``moments = (mean_src, var_src, mean_tgt, var_tgt)`` (per-coordinate), the
    final quadratic and linear terms are set so that the gradient starts at
    the diagonal affine map matching source moments to target moments.
    """
    p = IcnnParams(cfg)
    d, q, r = cfg.dim, cfg.width, cfg.rank
    s = cfg.init_scale
    for l in range(cfg.depth):
        p[f"B{l}"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(q, d))
        if l > 0:
            p[f"W{l}"] = rng.uniform(0.0, 2.0 / q, size=(q, q))
        if cfg.hidden_quadratic:
            p[f"D{l}"] = rng.uniform(0.0, s, size=(q, d))
            p[f"A{l}"] = rng.normal(0.0, s / np.sqrt(d), size=(q, r, d))
    # without a final quadratic the hidden path alone has to carry the
    # gradient range, so it starts at unit scale
    w_scale = s if (cfg.final_diag or cfg.out_rank > 0) else 1.0
    p["wL"] = rng.uniform(0.0, 2.0 * w_scale / q, size=q)
    if cfg.out_rank > 0:
        p["AL"] = rng.normal(0.0, s / np.sqrt(d), size=(cfg.out_rank, d))
    scale = np.ones(d)
    shift = np.zeros(d)
    if moments is not None:
        m_s, v_s, m_t, v_t = (np.broadcast_to(np.asarray(m, dtype=DTYPE), (d,)) for m in moments)
        scale = np.sqrt(np.maximum(v_t, 1e-12) / np.maximum(v_s, 1e-12))
        shift = m_t - scale * m_s
    if cfg.final_diag:
        # grad ||dL * x||^2 = 2 dL^2 x
        p["dL"] = np.sqrt(scale / 2.0)
    p["bL"] = shift
    return project_convexity(p)
