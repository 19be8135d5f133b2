import numpy as np
import pytest

from polarfactor.icnn import IcnnConfig, IcnnParams, init_icnn, project_convexity
from polarfactor.numcore import make_rng


def random_icnn(rng: np.random.Generator, dim=None, scale: float = 1.0) -> IcnnParams:
    """Random feasible ICNN over a random architecture, with weights well away from init."""
    d = int(dim or rng.integers(1, 5))
    cfg = IcnnConfig(
        dim=d,
        width=int(rng.integers(1, 6)),
        depth=int(rng.integers(1, 4)),
        rank=int(rng.integers(1, 3)),
        activation=str(rng.choice(["elu", "softplus"])),
        hidden_quadratic=bool(rng.integers(0, 2)),
        hidden_bias=bool(rng.integers(0, 2)),
        final_rank=int(rng.integers(0, 3)),
    )
    p = init_icnn(cfg, rng)
    p.flat = p.flat + scale * rng.normal(size=p.size)
    return project_convexity(p)


def quadratic_icnn(H_diag, A=None) -> IcnnParams:
    """ICNN whose only active terms are the final quadratic: u(x) = ||dL x||^2 + ||AL x||^2."""
    d = len(H_diag)
    r = 0 if A is None else np.atleast_2d(A).shape[0]
    cfg = IcnnConfig(dim=d, width=1, depth=1, hidden_quadratic=False, hidden_bias=False, final_rank=r, delta_min=0.0)
    p = IcnnParams(cfg)
    p["dL"] = np.sqrt(np.asarray(H_diag, dtype=float))
    if r:
        p["AL"] = A
    return p


@pytest.fixture
def rng():
    return make_rng(1234)
