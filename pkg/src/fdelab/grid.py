"""Space-time grids, scalar fields, cylinders, quadrature, and discrete gradients.

Everything downstream (solver, geometry, coverings, inequality checks) works on
the uniform tensor grids defined here.  Fields are immutable after
construction; all quadrature helpers are pure functions.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class EmptyIntersection(Exception):
    """A cylinder does not meet the grid domain."""


class NegativeBase(Exception):
    """Fractional power requested on a field with negative values."""


class ZeroWeight(Exception):
    """Weighted mean requested with an identically-zero weight."""


def unit_ball_volume(n: int) -> float:
    """Volume of the unit ball in R^n."""
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


@dataclass(frozen=True)
class ModelParams:
    """Exponents and ellipticity bounds of the diffusion model.

    ``m`` is the singular exponent in (max(n-2,0)/(n+2), 1); ``p = m + 1`` is
    the scaling exponent used by the cylinder construction; ``nu``/``L_up``
    bound the nonlinearity from below/above.
    """

    n: int
    m: float
    nu: float = 1.0
    L_up: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"dimension must be >= 1, got {self.n}")
        lo = max(self.n - 2, 0) / (self.n + 2)
        if not (lo < self.m < 1.0):
            raise ValueError(
                f"m={self.m} outside admissible range ({lo}, 1) for n={self.n}"
            )
        if not (0.0 < self.nu <= self.L_up < math.inf):
            raise ValueError(f"need 0 < nu <= L_up < inf, got nu={self.nu}, L_up={self.L_up}")

    @property
    def p(self) -> float:
        return self.m + 1.0


class SpaceTimeGrid:
    """Uniform tensor grid on an axis-aligned box times a time interval.

    Nodes sit on the box corners exactly (vertex-centered); the spatial step h
    is the same along every axis.  Each node owns a cell of size h^n * dt for
    quadrature purposes; cells of boundary nodes stick halfway out of the box,
    which only matters for integrals over regions that are clipped anyway.
    """

    def __init__(self, box, t_range, shape, nt, max_nodes: int = 16_000_000):
        box = tuple((float(a), float(b)) for a, b in box)
        self.n = len(box)
        self.box = box
        self.t_range = (float(t_range[0]), float(t_range[1]))
        self.shape = tuple(int(k) for k in shape)
        self.nt = int(nt)
        if len(self.shape) != self.n:
            raise ValueError("shape must have one entry per spatial axis")
        if any(k < 2 for k in self.shape) or self.nt < 2:
            raise ValueError("need at least 2 nodes per axis")
        steps = [(b - a) / (k - 1) for (a, b), k in zip(box, self.shape)]
        if any(s <= 0 for s in steps) or self.t_range[1] <= self.t_range[0]:
            raise ValueError("degenerate box or time range")
        h = steps[0]
        if any(abs(s - h) > 1e-12 * h for s in steps[1:]):
            raise ValueError(f"spatial step must be uniform across axes, got {steps}")
        self.h = h
        self.dt = (self.t_range[1] - self.t_range[0]) / (self.nt - 1)
        total = self.nt * int(np.prod(self.shape))
        if total > max_nodes:
            raise ValueError(f"grid has {total} nodes, exceeding budget {max_nodes}")
        self.axes = tuple(
            np.linspace(a, b, k) for (a, b), k in zip(box, self.shape)
        )
        self.times = np.linspace(self.t_range[0], self.t_range[1], self.nt)
        # meshgrid of node coordinates, shape (n, *shape)
        self.coords = np.stack(np.meshgrid(*self.axes, indexing="ij"))

    @property
    def num_nodes(self) -> int:
        return self.nt * int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        """Space-time volume h^n * dt of one node cell."""
        return self.h**self.n * self.dt

    def spatial_distance(self, center) -> np.ndarray:
        """Euclidean node distance to ``center``, shape ``self.shape``."""
        c = np.asarray(center, dtype=float).reshape((self.n,) + (1,) * self.n)
        return np.sqrt(((self.coords - c) ** 2).sum(axis=0))

    def nearest_time_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def __repr__(self):
        return (
            f"SpaceTimeGrid(n={self.n}, box={self.box}, t_range={self.t_range}, "
            f"shape={self.shape}, nt={self.nt}, h={self.h:.6g}, dt={self.dt:.6g})"
        )


class ScalarField:
    """Immutable real-valued field on the nodes of a :class:`SpaceTimeGrid`.

    ``values`` has shape ``(nt, *grid.shape)``.  Fields that represent the
    solution u (or any quantity raised to fractional powers) carry
    ``nonneg=True`` and are validated on construction.
    """

    def __init__(self, grid: SpaceTimeGrid, values, nonneg: bool = False, name: str = ""):
        values = np.asarray(values, dtype=float)
        expected = (grid.nt,) + grid.shape
        if values.shape != expected:
            raise ValueError(f"values shape {values.shape} != grid shape {expected}")
        if nonneg and values.size and values.min() < 0:
            raise ValueError(f"nonnegative field has min {values.min()}")
        self.grid = grid
        self.values = values
        self.values.flags.writeable = False
        self.nonneg = bool(nonneg)
        self.name = name

    @classmethod
    def constant(cls, grid, c, nonneg=None, name=""):
        if nonneg is None:
            nonneg = c >= 0
        return cls(grid, np.full((grid.nt,) + grid.shape, float(c)), nonneg, name)

    @classmethod
    def from_function(cls, grid, fn, nonneg=False, name=""):
        """Sample ``fn(*coords, t)`` slice by slice; fn must broadcast over arrays."""
        vals = np.empty((grid.nt,) + grid.shape)
        for k, t in enumerate(grid.times):
            vals[k] = fn(*grid.coords, t)
        return cls(grid, vals, nonneg, name)

    def power(self, e: float) -> "ScalarField":
        """Nodewise power with the convention 0^e = 0 for e > 0."""
        if not self.nonneg and self.values.min() < 0:
            raise NegativeBase(f"power {e} of a field with min {self.values.min()}")
        return ScalarField(self.grid, self.values**e, nonneg=True,
                           name=f"{self.name}^{e}" if self.name else "")

    def slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def __repr__(self):
        return (f"ScalarField(name={self.name!r}, nonneg={self.nonneg}, "
                f"min={self.values.min():.4g}, max={self.values.max():.4g})")


class TimeConvention(Enum):
    """How a cylinder's nominal time size maps onto an actual interval."""

    CENTERED_2TAU = "centered_2tau"   # (t0 - tau, t0 + tau): total length 2*tau
    CONSTRUCTION_S = "construction_s" # (t0 - s/2, t0 + s/2): total length s
    TIME_OFFSET = "time_offset"       # explicit (t_lo, t_hi], e.g. vertex/backward cylinders


@dataclass(frozen=True)
class Cylinder:
    """Space-time cylinder: a Euclidean ball times a time interval.

    Use the named constructors; the two standard conventions disagree by a
    factor 2 in the time length and mixing them silently is the classic bug
    this type exists to prevent.
    """

    center_x: tuple
    t_lo: float
    t_hi: float
    radius: float
    convention: TimeConvention

    def __post_init__(self):
        if self.radius <= 0 or self.t_hi <= self.t_lo:
            raise ValueError(f"degenerate cylinder: radius={self.radius}, "
                             f"time=({self.t_lo}, {self.t_hi})")

    @classmethod
    def centered(cls, x0, t0, tau, rho):
        """(t0 - tau, t0 + tau) x B_rho(x0): total time length 2*tau."""
        x0 = tuple(float(v) for v in np.atleast_1d(x0))
        return cls(x0, float(t0) - float(tau), float(t0) + float(tau), float(rho),
                   TimeConvention.CENTERED_2TAU)

    @classmethod
    def construction(cls, x0, t0, s, rho):
        """(t0 - s/2, t0 + s/2) x B_rho(x0): total time length s."""
        x0 = tuple(float(v) for v in np.atleast_1d(x0))
        return cls(x0, float(t0) - 0.5 * float(s), float(t0) + 0.5 * float(s),
                   float(rho), TimeConvention.CONSTRUCTION_S)

    @classmethod
    def over_interval(cls, x0, t_lo, t_hi, rho):
        """Explicit time window, e.g. vertex cylinders B x (t0, t0 + t]."""
        x0 = tuple(float(v) for v in np.atleast_1d(x0))
        return cls(x0, float(t_lo), float(t_hi), float(rho), TimeConvention.TIME_OFFSET)

    @property
    def t_center(self) -> float:
        return 0.5 * (self.t_lo + self.t_hi)

    @property
    def time_length(self) -> float:
        return self.t_hi - self.t_lo

    def scaled(self, time_factor: float, radius_factor: float) -> "Cylinder":
        """Dilate about the center: time length and radius scale independently."""
        half = 0.5 * self.time_length * time_factor
        tc = self.t_center
        return Cylinder(self.center_x, tc - half, tc + half,
                        self.radius * radius_factor, self.convention)

    def with_radius(self, rho: float) -> "Cylinder":
        return Cylinder(self.center_x, self.t_lo, self.t_hi, float(rho), self.convention)

    def is_admissible(self, grid: SpaceTimeGrid, slack: float = 1e-12) -> bool:
        """True iff the cylinder lies inside the grid domain (no clipping)."""
        eps = slack * max(1.0, abs(grid.t_range[0]), abs(grid.t_range[1]))
        if self.t_lo < grid.t_range[0] - eps or self.t_hi > grid.t_range[1] + eps:
            return False
        for (a, b), c in zip(grid.box, self.center_x):
            if c - self.radius < a - eps or c + self.radius > b + eps:
                return False
        return True

    def contains_cylinder(self, other: "Cylinder", slack: float = 1e-12) -> bool:
        """Geometric containment other subset-of self (continuum, not nodewise)."""
        eps = slack * max(1.0, self.time_length)
        if other.t_lo < self.t_lo - eps or other.t_hi > self.t_hi + eps:
            return False
        d = math.dist(self.center_x, other.center_x)
        return d + other.radius <= self.radius + eps

    def intersects(self, other: "Cylinder") -> bool:
        """Open intersection test for two cylinders."""
        if other.t_lo >= self.t_hi or self.t_lo >= other.t_hi:
            return False
        return math.dist(self.center_x, other.center_x) < self.radius + other.radius

    def volume(self, n: int) -> float:
        """Continuum space-time volume |Q| = time_length * omega_n * rho^n."""
        return self.time_length * unit_ball_volume(n) * self.radius**n


# ---------------------------------------------------------------------------
# quadrature weights
# ---------------------------------------------------------------------------

def time_weights(grid: SpaceTimeGrid, t_lo: float, t_hi: float) -> np.ndarray:
    """Exact overlap fraction of each node's time cell with (t_lo, t_hi)."""
    lo = np.maximum(grid.times - 0.5 * grid.dt, t_lo)
    hi = np.minimum(grid.times + 0.5 * grid.dt, t_hi)
    return np.clip((hi - lo) / grid.dt, 0.0, 1.0)


def ball_weights(grid: SpaceTimeGrid, center, rho: float) -> np.ndarray:
    """Fractional cell weights for a ball: 1 inside, 0 outside, linear ramp
    of width h across the boundary band (radial overlap approximation).

    Monotone in rho, which the radius bisection in the geometry module relies
    on.  Balls smaller than one cell are resolved only up to the ramp.
    """
    d = grid.spatial_distance(center)
    return np.clip((rho - d) / grid.h + 0.5, 0.0, 1.0)


def ball_mask(grid: SpaceTimeGrid, center, rho: float) -> np.ndarray:
    """Node membership d <= rho (used by the covering module's exact counts)."""
    return grid.spatial_distance(center) <= rho


def time_mask(grid: SpaceTimeGrid, t_lo: float, t_hi: float) -> np.ndarray:
    """Strictly interior time slices t_lo < t < t_hi."""
    return (grid.times > t_lo) & (grid.times < t_hi)


def _spatial_sum(weighted_slice_shape_values: np.ndarray, n: int) -> np.ndarray:
    return weighted_slice_shape_values.sum(axis=tuple(range(1, 1 + n)))


def cylinder_integral(field: ScalarField, Q: Cylinder, exponent: float = 1.0,
                      use_abs: bool = True) -> float:
    """Plain space-time integral of |g|^exponent over Q (clipped to the grid)."""
    g = field.grid
    wt = time_weights(g, Q.t_lo, Q.t_hi)
    wb = ball_weights(g, Q.center_x, Q.radius)
    vals = np.abs(field.values) if use_abs else field.values
    if exponent != 1.0:
        vals = vals**exponent
    per_slice = _spatial_sum(vals * wb, g.n)
    return float((wt * per_slice).sum() * g.cell_volume)


def cylinder_measure(field_or_grid, Q: Cylinder) -> float:
    """Quadrature measure of Q intersected with the grid domain."""
    g = field_or_grid.grid if isinstance(field_or_grid, ScalarField) else field_or_grid
    wt = time_weights(g, Q.t_lo, Q.t_hi)
    wb = ball_weights(g, Q.center_x, Q.radius)
    return float(wt.sum() * wb.sum() * g.cell_volume)


def cylinder_mean(field: ScalarField, Q: Cylinder, exponent: float = 1.0) -> float:
    """Mean of |g|^exponent over Q, normalized by the quadrature measure.

    Raises ``EmptyIntersection`` if Q misses the domain, ``NegativeBase`` if a
    fractional exponent meets a negative value inside Q.
    """
    if exponent <= 0:
        raise ValueError(f"exponent must be > 0, got {exponent}")
    g = field.grid
    wt = time_weights(g, Q.t_lo, Q.t_hi)
    wb = ball_weights(g, Q.center_x, Q.radius)
    total_w = wt.sum() * wb.sum()
    if total_w <= 0:
        raise EmptyIntersection(f"cylinder {Q} misses the grid domain")
    if exponent != round(exponent):
        support = np.outer(wt > 0, wb.ravel() > 0).reshape((g.nt,) + g.shape)
        if (field.values[support] < 0).any():
            raise NegativeBase("fractional exponent on negative values inside Q")
    vals = np.abs(field.values) ** exponent
    per_slice = _spatial_sum(vals * wb, g.n)
    return float((wt * per_slice).sum() / total_w)


def slice_ball_integral(field: ScalarField, k: int, center, rho: float,
                        exponent: float = 1.0) -> float:
    """Spatial integral of |g|^exponent over the ball at time slice k."""
    g = field.grid
    wb = ball_weights(g, center, rho)
    vals = np.abs(field.values[k]) ** exponent if exponent != 1.0 else np.abs(field.values[k])
    return float((vals * wb).sum() * g.h**g.n)


def slice_ball_mean(field: ScalarField, k: int, center, rho: float,
                    exponent: float = 1.0) -> float:
    g = field.grid
    wb = ball_weights(g, center, rho)
    tot = wb.sum()
    if tot <= 0:
        raise EmptyIntersection("ball misses the grid domain")
    vals = np.abs(field.values[k]) ** exponent if exponent != 1.0 else np.abs(field.values[k])
    return float((vals * wb).sum() / tot)


def weighted_slice_mean(field: ScalarField, t: float, ball, eta) -> float:
    """Weighted spatial mean (g)^eta = int(g eta) / int(eta) over a ball.

    ``ball`` is a (center, radius) pair; ``eta`` is a nonnegative weight,
    given either as an array on the spatial grid or a callable of the node
    coordinates.  The slice nearest to t is used.
    """
    g = field.grid
    center, rho = ball
    k = g.nearest_time_index(t)
    if callable(eta):
        eta_vals = np.asarray(eta(*g.coords), dtype=float)
    else:
        eta_vals = np.asarray(eta, dtype=float)
    if eta_vals.shape != g.shape:
        raise ValueError(f"eta shape {eta_vals.shape} != grid spatial shape {g.shape}")
    if eta_vals.min() < -1e-15:
        raise ValueError("eta must be nonnegative")
    w = np.clip(eta_vals, 0.0, None) * ball_weights(g, center, rho)
    norm = w.sum()
    if norm <= 0:
        raise ZeroWeight("eta vanishes on the ball")
    return float((field.values[k] * w).sum() / norm)


# ---------------------------------------------------------------------------
# discrete gradients
# ---------------------------------------------------------------------------

def discrete_gradient_of_power(u: ScalarField, m: float) -> np.ndarray:
    """Spatial gradient of u^m: central differences inside, one-sided (2nd
    order) at the spatial boundary.  Returns shape (n, nt, *grid.shape)."""
    if not u.nonneg and u.values.min() < 0:
        raise NegativeBase("gradient of a fractional power needs u >= 0")
    v = u.values**m
    g = u.grid
    out = np.empty((g.n,) + v.shape)
    for ax in range(g.n):
        out[ax] = np.gradient(v, g.h, axis=1 + ax, edge_order=2)
    return out


def grad_energy_field(u: ScalarField, m: float) -> ScalarField:
    """|D(u^m)|^2 nodewise, as a nonnegative field."""
    grad = discrete_gradient_of_power(u, m)
    return ScalarField(u.grid, (grad**2).sum(axis=0), nonneg=True,
                       name=f"|D({u.name or 'u'}^{m})|^2")


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def _header_dict(field: ScalarField) -> dict:
    g = field.grid
    return {
        "dimension": g.n,
        "shape": list(g.shape),
        "nt": g.nt,
        "box": [list(ab) for ab in g.box],
        "t_range": list(g.t_range),
        "h": g.h,
        "dt": g.dt,
        "name": field.name,
        "nonneg": field.nonneg,
    }


def save_snapshot(field: ScalarField, path: str) -> None:
    """Binary snapshot: header JSON + row-major float64 node values (.npz)."""
    np.savez_compressed(path, header=json.dumps(_header_dict(field), sort_keys=True),
                        values=field.values)


def load_snapshot(path: str) -> ScalarField:
    with np.load(path, allow_pickle=False) as data:
        hdr = json.loads(str(data["header"]))
        values = data["values"]
    grid = SpaceTimeGrid(box=[tuple(ab) for ab in hdr["box"]], t_range=tuple(hdr["t_range"]),
                         shape=tuple(hdr["shape"]), nt=hdr["nt"])
    return ScalarField(grid, values, nonneg=hdr["nonneg"], name=hdr["name"])


def save_snapshot_csv(field: ScalarField, path: str) -> None:
    """CSV snapshot: '#'-prefixed header lines, then one row per time slice."""
    hdr = _header_dict(field)
    with open(path, "w", newline="") as fh:
        for key in sorted(hdr):
            fh.write(f"# {key}={json.dumps(hdr[key])}\n")
        writer = csv.writer(fh)
        for k in range(field.grid.nt):
            writer.writerow(["%.17g" % v for v in field.values[k].ravel()])


def load_snapshot_csv(path: str) -> ScalarField:
    hdr = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, val = line[1:].strip().split("=", 1)
                hdr[key.strip()] = json.loads(val)
            elif line.strip():
                rows.append(line)
    values = np.array([[float(v) for v in next(csv.reader(io.StringIO(r)))] for r in rows])
    grid = SpaceTimeGrid(box=[tuple(ab) for ab in hdr["box"]], t_range=tuple(hdr["t_range"]),
                         shape=tuple(hdr["shape"]), nt=hdr["nt"])
    return ScalarField(grid, values.reshape((grid.nt,) + grid.shape),
                       nonneg=hdr["nonneg"], name=hdr["name"])
