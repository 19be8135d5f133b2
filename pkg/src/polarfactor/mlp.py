"""Plain feed-forward network with hand-written reverse mode.

Used for the amortization network, the explicit measure-preserving map and
the bridge drift. The last layer is affine (no activation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import DTYPE, FlatParams, NumericsError, activation, as_batch


@dataclass
class MlpConfig:
    in_dim: int
    out_dim: int
    hidden: list[int] = field(default_factory=lambda: [512, 512])
    activation: str = "relu"

    def __post_init__(self) -> None:
        activation(self.activation)
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise NumericsError("layer widths must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        w = self.widths
        out = []
        for k in range(len(w) - 1):
            out.append((f"W{k}", (w[k + 1], w[k])))
            out.append((f"b{k}", (w[k + 1],)))
        return out

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1


class MlpParams(FlatParams):
    def __init__(self, cfg: MlpConfig, flat: np.ndarray | None = None):
        super().__init__(cfg.layout(), flat)
        self.cfg = cfg

    def copy(self) -> "MlpParams":
        return MlpParams(self.cfg, self.flat.copy())


def init_mlp(cfg: MlpConfig, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """He-style init for hidden layers; the output layer is scaled by ``out_scale``."""
    p = MlpParams(cfg)
    w = cfg.widths
    for k in range(cfg.n_layers):
        std = np.sqrt(2.0 / w[k]) if k < cfg.n_layers - 1 else out_scale / np.sqrt(w[k])
        p[f"W{k}"] = rng.normal(0.0, std, size=(w[k + 1], w[k]))
    return p


def _forward(p: MlpParams, X: np.ndarray):
    act, _ = activation(p.cfg.activation)
    h = X
    cache = []
    last = p.cfg.n_layers - 1
    for k in range(p.cfg.n_layers):
        pre = h @ p[f"W{k}"].T + p[f"b{k}"]
        cache.append((h, pre))
        h = pre if k == last else act(pre)
    return h, cache


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    X, single = as_batch(x, p.cfg.in_dim)
    out, _ = _forward(p, X)
    return out[0] if single else out


def mlp_value_and_grads(p: MlpParams, x, upstream_fn):
    """Forward, then backprop ``upstream_fn(out)`` (dLoss/dout, shape (n, out)).

    Returns ``(out, flat parameter gradient, input gradient)``.
    """
    X, _ = as_batch(x, p.cfg.in_dim)
    out, cache = _forward(p, X)
    g = np.asarray(upstream_fn(out), dtype=DTYPE)
    grads, gX = _backward(p, g, cache)
    return out, grads, gX


def _backward(p: MlpParams, g: np.ndarray, cache):
    _, dact = activation(p.cfg.activation)
    grads = p.zeros_like()
    last = p.cfg.n_layers - 1
    for k in range(last, -1, -1):
        h, pre = cache[k]
        if k != last:
            g = g * dact(pre)
        p.view_of(grads, f"W{k}")[...] = g.T @ h
        p.view_of(grads, f"b{k}")[...] = g.sum(axis=0)
        g = g @ p[f"W{k}"]
    return grads, g


def mlp_grad_params(p: MlpParams, x, upstream) -> np.ndarray:
    """Flat gradient of ``sum(upstream * mlp(x))``."""
    upstream = np.asarray(upstream, dtype=DTYPE)
    _, grads, _ = mlp_value_and_grads(p, x, lambda out: np.broadcast_to(upstream, out.shape))
    return grads


def mse_step_grads(p: MlpParams, x, target, weights=None):
    """Loss ``mean_n w_n ||mlp(x_n) - target_n||^2`` and its parameter gradient."""
    X, _ = as_batch(x, p.cfg.in_dim)
    T, _ = as_batch(target, p.cfg.out_dim)
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)
    denom = max(n, 1)
    loss_box = {}

    def upstream(out):
        r = out - T
        loss_box["loss"] = float(np.sum(w * np.sum(r * r, axis=1)) / denom)
        return 2.0 * w[:, None] * r / denom

    _, grads, _ = mlp_value_and_grads(p, X, upstream)
    return loss_box["loss"], grads
