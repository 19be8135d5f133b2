"""Vector-field sources: analytic fields, gridded terrains, and the OT benchmarks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .icnn import IcnnConfig
from .npf import PairedBatch
from .numcore import DTYPE, NumericsError


class GridFormatError(ValueError):
    pass


@dataclass
class Grid:
    """Scalar values on a rectilinear grid; ``values[j, i]`` sits at ``(xs[i], ys[j])``."""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        self.xs = np.asarray(self.xs, dtype=DTYPE)
        self.ys = np.asarray(self.ys, dtype=DTYPE)
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.values.shape != (self.ys.size, self.xs.size):
            raise NumericsError(f"values shape {self.values.shape} does not match ({self.ys.size}, {self.xs.size})")
        if np.any(np.diff(self.xs) <= 0) or np.any(np.diff(self.ys) <= 0):
            raise NumericsError("grid coordinates must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise NumericsError("grid values must be finite")

    @property
    def nodes(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.column_stack([X.ravel(), Y.ravel()])


def _bilinear(xs, ys, values, pts) -> np.ndarray:
    """Bilinear interpolation of ``values[..., j, i]`` at points, clamped to the grid box."""
    px = np.clip(pts[:, 0], xs[0], xs[-1])
    py = np.clip(pts[:, 1], ys[0], ys[-1])
    i = np.clip(np.searchsorted(xs, px, side="right") - 1, 0, xs.size - 2)
    j = np.clip(np.searchsorted(ys, py, side="right") - 1, 0, ys.size - 2)
    tx = (px - xs[i]) / (xs[i + 1] - xs[i])
    ty = (py - ys[j]) / (ys[j + 1] - ys[j])
    v00, v01 = values[..., j, i], values[..., j, i + 1]
    v10, v11 = values[..., j + 1, i], values[..., j + 1, i + 1]
    return (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11)


@dataclass
class VectorFieldSource:
    """A field F with its sampling measure rho.

    Analytic sources carry ``evaluate`` and ``sample``; grid sources carry
    the nodes and per-node values, sample uniformly over nodes, and
    evaluate off-node by bilinear interpolation.
    """

    kind: str
    dim: int
    evaluate_fn: Callable[[np.ndarray], np.ndarray] | None = None
    sample_fn: Callable[[np.random.Generator, int], np.ndarray] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    grid_xs: np.ndarray | None = None
    grid_ys: np.ndarray | None = None
    grid_values: np.ndarray | None = None  # (2, ny, nx)
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind == "analytic":
            if self.evaluate_fn is None or self.sample_fn is None:
                raise NumericsError("analytic source needs an evaluator and a sampler")
        elif self.kind == "grid":
            if self.grid_values is None or not np.all(np.isfinite(self.grid_values)):
                raise NumericsError("grid source needs finite node values")
            self.lower = np.array([self.grid_xs[0], self.grid_ys[0]])
            self.upper = np.array([self.grid_xs[-1], self.grid_ys[-1]])
        else:
            raise NumericsError(f"unknown source kind {self.kind!r}")

    @property
    def nodes(self) -> np.ndarray:
        X, Y = np.meshgrid(self.grid_xs, self.grid_ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def node_values(self) -> np.ndarray:
        return np.column_stack([self.grid_values[0].ravel(), self.grid_values[1].ravel()])

    def in_support(self, x: np.ndarray) -> np.ndarray:
        if self.lower is None:
            return np.ones(x.shape[0], dtype=bool)
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
        if self.kind == "grid":
            return _bilinear(self.grid_xs, self.grid_ys, self.grid_values, x).T.copy()
        return np.asarray(self.evaluate_fn(x), dtype=DTYPE)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "grid":
            return self.nodes[rng.integers(0, self.grid_values[0].size, size=n)]
        return np.asarray(self.sample_fn(rng, n), dtype=DTYPE)

    def paired(self, rng: np.random.Generator, n: int | None = None) -> PairedBatch:
        """Samples of rho with their field values; grid sources default to all nodes."""
        if self.kind == "grid" and n is None:
            return PairedBatch(self.nodes, self.node_values())
        if n is None:
            raise NumericsError("analytic sources need a sample count")
        xs = self.sample(rng, n)
        ok = self.in_support(xs)
        if not np.all(ok):
            raise NumericsError(f"{int((~ok).sum())} samples fall outside the declared support")
        return PairedBatch(xs, self.evaluate(xs))


@dataclass
class TerrainSpec:
    resolution: int = 64
    # a few broad hills: narrow bumps leave flat plains where grad u* is ill-conditioned
    n_bumps: int = 4
    amplitude: tuple[float, float] = (50.0, 200.0)
    width: tuple[float, float] = (0.2, 0.4)
    smoothing: float = 2.0  # kernel std in grid cells
    dequantize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.resolution < 8:
            raise NumericsError("terrain resolution must be >= 8")
        if not self.smoothing > 0:
            raise NumericsError("smoothing width must be positive")
        if self.n_bumps < 0:
            raise NumericsError("bump count must be >= 0")


def bump(x, y, cx, cy, amp, width):
    return amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width**2))


def terrain_generate(spec: TerrainSpec, rng: np.random.Generator | None = None) -> Grid:
    """Sum of random Gaussian bumps on [0, 1]^2, dequantized then smoothed."""
    from .numcore import make_rng

    rng = rng if rng is not None else make_rng(spec.seed)
    ax = np.linspace(0.0, 1.0, spec.resolution)
    X, Y = np.meshgrid(ax, ax)
    elev = np.zeros_like(X)
    for _ in range(spec.n_bumps):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        amp = rng.uniform(*spec.amplitude)
        w = rng.uniform(*spec.width)
        elev += bump(X, Y, cx, cy, amp, w)
    if spec.dequantize:
        elev = np.round(elev) + rng.uniform(0.0, 1.0, size=elev.shape)
    if spec.n_bumps > 0 or spec.dequantize:
        elev = gaussian_filter(elev, spec.smoothing, mode="reflect")
    return Grid(ax, ax.copy(), elev)


def grid_gradient(grid: Grid) -> VectorFieldSource:
    """Finite-difference gradient: central inside, one-sided on the border."""
    if grid.values.shape[0] < 3 or grid.values.shape[1] < 3:
        raise NumericsError("grid_gradient needs at least a 3x3 grid")
    gy, gx = np.gradient(grid.values, grid.ys, grid.xs, edge_order=1)
    return VectorFieldSource(
        "grid", 2, grid_xs=grid.xs, grid_ys=grid.ys, grid_values=np.stack([gx, gy]), name="terrain"
    )


def grid_emit(grid: Grid, path) -> None:
    """CSV with header ``x,y,value``; rows run over x fastest, then y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for j, yv in enumerate(grid.ys):
            for i, xv in enumerate(grid.xs):
                w.writerow([repr(float(xv)), repr(float(yv)), repr(float(grid.values[j, i]))])


def grid_ingest(path) -> Grid:
    cells: dict[tuple[float, float], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "value"]:
            raise GridFormatError("line 1: expected header 'x,y,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise GridFormatError(f"line {lineno}: expected 3 cells, got {len(row)}")
            try:
                x, y, v = (float(c) for c in row)
            except ValueError:
                raise GridFormatError(f"line {lineno}: non-numeric cell") from None
            if not all(np.isfinite([x, y, v])):
                raise GridFormatError(f"line {lineno}: non-finite cell")
            if (x, y) in cells:
                raise GridFormatError(f"line {lineno}: duplicate coordinate ({x}, {y})")
            cells[(x, y)] = v
    if not cells:
        raise GridFormatError("no data rows")
    xs = np.array(sorted({k[0] for k in cells}))
    ys = np.array(sorted({k[1] for k in cells}))
    values = np.empty((ys.size, xs.size))
    for j, yv in enumerate(ys):
        for i, xv in enumerate(xs):
            try:
                values[j, i] = cells[(xv, yv)]
            except KeyError:
                raise GridFormatError(f"missing cell at ({xv}, {yv})") from None
    return Grid(xs, ys, values)


# analytic fields and objectives ---------------------------------------------


def uniform_box(lower, upper) -> Callable[[np.random.Generator, int], np.ndarray]:
    lo, hi = np.asarray(lower, dtype=DTYPE), np.asarray(upper, dtype=DTYPE)
    return lambda rng, n: rng.uniform(lo, hi, size=(n, lo.size))


def analytic_field(fn, lower, upper, name: str = "") -> VectorFieldSource:
    lo, hi = np.asarray(lower, dtype=DTYPE), np.asarray(upper, dtype=DTYPE)
    return VectorFieldSource("analytic", lo.size, fn, uniform_box(lo, hi), lo, hi, name=name)


def identity_field(d: int, half_width: float = 1.0) -> VectorFieldSource:
    return analytic_field(lambda x: x.copy(), -half_width * np.ones(d), half_width * np.ones(d), "identity")


def tent_field() -> VectorFieldSource:
    """F(x) = |x| on [-1, 1]: every image has the two pre-images +-x."""
    return analytic_field(np.abs, [-1.0], [1.0], "tent")


def doubling_map(x: np.ndarray) -> np.ndarray:
    return np.mod(2.0 * x, 1.0)


@dataclass(frozen=True)
class Objective:
    """A smooth function g with gradient, its critical points and a box Omega."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    minima: np.ndarray

    def as_source(self) -> VectorFieldSource:
        return analytic_field(self.grad, self.lower, self.upper, self.name)


def four_well() -> Objective:
    """g(x, y) = (x^2 - 1)^2 + (y^2 - 1)^2 on [-2, 2]^2, minima at (+-1, +-1)."""

    def value(x):
        return np.sum((x**2 - 1.0) ** 2, axis=-1)

    def grad(x):
        return 4.0 * x * (x**2 - 1.0)

    minima = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    return Objective("four-well", value, grad, -2.0 * np.ones(2), 2.0 * np.ones(2), minima)


def double_well() -> Objective:
    """g(x) = (x^2 - 1)^2 on [-2, 2]."""
    return Objective(
        "double-well",
        lambda x: np.sum((x**2 - 1.0) ** 2, axis=-1),
        lambda x: 4.0 * x * (x**2 - 1.0),
        -2.0 * np.ones(1),
        2.0 * np.ones(1),
        np.array([[-1.0], [1.0]]),
    )


def quadratic(d: int = 2) -> Objective:
    return Objective(
        "quadratic",
        lambda x: 0.5 * np.sum(x**2, axis=-1),
        lambda x: x.copy(),
        -2.0 * np.ones(d),
        2.0 * np.ones(d),
        np.zeros((1, d)),
    )


OBJECTIVES = {"four-well": four_well, "double-well": double_well, "quadratic": quadratic}


def rms_gradient(obj: Objective, rng: np.random.Generator, n: int = 100000) -> float:
    x = rng.uniform(obj.lower, obj.upper, size=(n, obj.lower.size))
    return float(np.sqrt(np.mean(np.sum(obj.grad(x) ** 2, axis=1))))


# OT benchmarks --------------------------------------------------------------


@dataclass
class Benchmark:
    name: str
    dim: int
    sample_source: Callable[[np.random.Generator, int], np.ndarray]
    sample_target: Callable[[np.random.Generator, int], np.ndarray]
    reference_map: Callable[[np.ndarray], np.ndarray] | None
    target_variance: float

    def paired(self, rng: np.random.Generator, n: int) -> PairedBatch:
        """Independent source and target draws: the coupling is learned, not given."""
        return PairedBatch(self.sample_source(rng, n), self.sample_target(rng, n))


def gauss_benchmark(d: int) -> Benchmark:
    """N(0, I) to N(0, diag(1..d)); the Monge map is x -> diag(sqrt(1..d)) x."""
    if d < 1:
        raise NumericsError("d must be >= 1")
    scale = np.sqrt(np.arange(1, d + 1, dtype=DTYPE))
    return Benchmark(
        "gauss-diag",
        d,
        lambda rng, n: rng.standard_normal((n, d)),
        lambda rng, n: rng.standard_normal((n, d)) * scale,
        lambda x: np.asarray(x) * scale,
        float(d * (d + 1) // 2),
    )


def mixture7_means(d: int) -> np.ndarray:
    if d < 2 or d % 2:
        raise NumericsError("mixture7 needs an even d >= 2")
    a = 30.0
    b = 30.0 / np.sqrt(2.0)
    pat = [(a, 0.0), (-a, 0.0), (0.0, -a), (b, b), (b, -b), (-b, b), (0.0, a)]
    return np.array([np.tile(p, d // 2) for p in pat])


def mixture7_benchmark(d: int) -> Benchmark:
    """N(0, I) to an equal-weight mixture of 7 Gaussians with covariances k I, k = 1..7."""
    means = mixture7_means(d)
    stds = np.sqrt(np.arange(1, 8, dtype=DTYPE))

    def target(rng, n):
        k = rng.integers(0, 7, size=n)
        return means[k] + stds[k, None] * rng.standard_normal((n, d))

    var = float(np.mean(stds**2) * d + np.mean(np.sum((means - means.mean(0)) ** 2, axis=1)))
    return Benchmark("mixture7", d, lambda rng, n: rng.standard_normal((n, d)), target, None, var)


BENCHMARKS = {"gauss-diag": gauss_benchmark, "mixture7": mixture7_benchmark}
VARIANTS = ("ours", "fquad", "linear")


@dataclass
class BenchmarkSpec:
    benchmark: str = "gauss-diag"
    dim: int = 4
    variant: str = "ours"

    def __post_init__(self) -> None:
        if self.benchmark not in BENCHMARKS:
            raise NumericsError(f"unknown benchmark {self.benchmark!r}")
        if self.variant not in VARIANTS:
            raise NumericsError(f"unknown architecture variant {self.variant!r}")
        if self.benchmark == "mixture7" and (self.dim < 2 or self.dim % 2):
            raise NumericsError("mixture7 needs an even d >= 2")


def architecture_variant(spec: BenchmarkSpec, activation: str = "elu") -> IcnnConfig:
    """The three benchmark potentials, four hidden layers each.

    ours: width d, rank-1 diagonal+low-rank quadratics in every layer;
    fquad: width 2d, no hidden quadratics, one full-rank final quadratic;
    linear: width 2d, no quadratic terms at all.
    """
    d = spec.dim
    if spec.variant == "ours":
        return IcnnConfig(dim=d, width=d, depth=4, rank=1, activation=activation)
    if spec.variant == "fquad":
        return IcnnConfig(
            dim=d, width=2 * d, depth=4, activation=activation,
            hidden_quadratic=False, hidden_bias=False, final_rank=d,
        )
    return IcnnConfig(
        dim=d, width=2 * d, depth=4, activation=activation,
        hidden_quadratic=False, hidden_bias=False, final_diag=False, final_rank=0,
    )
