"""Finite-difference solver for u_t = div A(x,t,u,Du^m) + f with u >= 0.

Cell-centered flux form, second order in space.  Two time schemes: explicit
(CFL-guarded, kept for cross-validation) and semi-implicit backward Euler with
lagged diffusivity (the default; unconditionally stable).  The radial
self-similar source solution provides the exact oracle for validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import ModelParams, ScalarField, SpaceTimeGrid, discrete_gradient_of_power


class CflViolation(Exception):
    """Explicit time step exceeds the stability bound."""


class LinearSolveDiverged(Exception):
    """Semi-implicit inner iteration failed to reach tolerance."""


class InvalidExponent(Exception):
    """Self-similar solution undefined: n(m-1) + 2 <= 0."""


class StructureKind(Enum):
    MODEL_IDENTITY = "model_identity"
    DIAGONAL_ANISOTROPIC = "diagonal_anisotropic"


@dataclass(frozen=True)
class StructureField:
    """The nonlinearity A(x,t,u,xi).

    MODEL_IDENTITY is A(xi) = xi (nu = L = 1).  DIAGONAL_ANISOTROPIC applies
    per-axis coefficients d_i(x, t) with nu <= d_i <= L; ``coeffs`` holds one
    callable per axis taking (*spatial coords, t) and broadcasting.
    """

    kind: StructureKind = StructureKind.MODEL_IDENTITY
    coeffs: tuple = ()
    nu: float = 1.0
    L_up: float = 1.0

    def node_coefficients(self, grid: SpaceTimeGrid, t: float) -> list[np.ndarray]:
        """Per-axis coefficient d_i at the nodes of one time slice."""
        if self.kind is StructureKind.MODEL_IDENTITY:
            return [np.ones(grid.shape) for _ in range(grid.n)]
        return [np.broadcast_to(np.asarray(c(*grid.coords, t), dtype=float),
                                grid.shape).copy() for c in self.coeffs]

    def apply(self, xi: np.ndarray, grid: SpaceTimeGrid, t: float) -> np.ndarray:
        """A(x,t,u,xi) for a slice gradient xi of shape (n, *grid.shape)."""
        if self.kind is StructureKind.MODEL_IDENTITY:
            return xi
        coef = self.node_coefficients(grid, t)
        return np.stack([c * xi[ax] for ax, c in enumerate(coef)])

    def check_structure(self, grid: SpaceTimeGrid, rng, n_samples: int = 10_000):
        """Sample random nodes and directions; verify the two-sided bounds
        A.xi >= nu |xi|^2 and |A| <= L |xi|.  Returns (min ratio, max ratio)."""
        t_samples = rng.uniform(*grid.t_range, size=n_samples)
        xi = rng.standard_normal((grid.n, n_samples))
        pts = [rng.uniform(a, b, size=n_samples) for a, b in grid.box]
        if self.kind is StructureKind.MODEL_IDENTITY:
            d = np.ones((grid.n, n_samples))
        else:
            d = np.stack([np.broadcast_to(c(*pts, t_samples), (n_samples,))
                          for c in self.coeffs])
        a_xi = d * xi
        lower = (a_xi * xi).sum(axis=0) / (xi**2).sum(axis=0)
        upper = np.sqrt((a_xi**2).sum(axis=0) / (xi**2).sum(axis=0))
        return float(lower.min()), float(upper.max())


@dataclass
class SolverConfig:
    """Scheme selection and the regularization/iteration knobs."""

    scheme: str = "semi_implicit"  # or "explicit"
    u_floor: float = 1e-6
    cfl_safety: float = 0.5
    picard_tol: float = 1e-10
    picard_maxiter: int = 40
    boundary: object = None  # callable(*coords, t) -> slice values; None = homogeneous

    def __post_init__(self):
        if self.u_floor <= 0:
            raise ValueError("u_floor must be > 0")
        if not (0 < self.cfl_safety < 1):
            raise ValueError("cfl_safety must lie in (0,1)")
        if self.scheme not in ("explicit", "semi_implicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


# ---------------------------------------------------------------------------
# exact radial source solution (oracle)
# ---------------------------------------------------------------------------

def barenblatt_exponents(params: ModelParams):
    """(alpha, beta, k) of the self-similar profile; InvalidExponent if the
    similarity exponent degenerates (n(m-1) + 2 <= 0)."""
    n, m = params.n, params.m
    denom = n * (m - 1.0) + 2.0
    if denom <= 0:
        raise InvalidExponent(f"n(m-1)+2 = {denom} <= 0 for n={n}, m={m}")
    alpha = n / denom
    beta = alpha / n
    k = (1.0 - m) * alpha / (2.0 * m * n)
    return alpha, beta, k


def barenblatt(params: ModelParams, C: float, x, t):
    """Radial self-similar solution u(x,t) = t^-a (C + k|x|^2 t^-2b)^(-1/(1-m)).

    ``x`` has the dimension along its first axis (a point or a coordinate
    stack); t > 0 scalar or broadcastable.
    """
    alpha, beta, k = barenblatt_exponents(params)
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("self-similar solution needs t > 0")
    r2 = (x**2).sum(axis=0)
    return t**(-alpha) * (C + k * r2 * t**(-2 * beta)) ** (-1.0 / (1.0 - params.m))


def barenblatt_power_gradient(params: ModelParams, C: float, x, t):
    """Analytic spatial gradient of u^m for the profile above; shape like x."""
    alpha, beta, k = barenblatt_exponents(params)
    m = params.m
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    r2 = (x**2).sum(axis=0)
    phi = C + k * r2 * t**(-2 * beta)
    pref = t**(-alpha * m) * (-m / (1.0 - m)) * phi ** (-m / (1.0 - m) - 1.0)
    return pref * 2.0 * k * t**(-2 * beta) * x


def barenblatt_field(grid: SpaceTimeGrid, params: ModelParams, C: float) -> ScalarField:
    """The exact solution sampled on every node of the grid (t_range > 0)."""
    def fn(*coords_t):
        coords, t = coords_t[:-1], coords_t[-1]
        return barenblatt(params, C, np.stack(coords), t)
    return ScalarField.from_function(grid, fn, nonneg=True, name="barenblatt")


def barenblatt_trace(params: ModelParams, C: float):
    """Boundary callable for SolverConfig: exact Dirichlet trace."""
    def bc(*coords_t):
        coords, t = coords_t[:-1], coords_t[-1]
        return barenblatt(params, C, np.stack(coords), t)
    return bc


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def _boundary_mask(shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for ax in range(len(shape)):
        sl = [slice(None)] * len(shape)
        sl[ax] = 0
        mask[tuple(sl)] = True
        sl[ax] = -1
        mask[tuple(sl)] = True
    return mask


def _divergence_of_flux(v: np.ndarray, coef: list[np.ndarray], h: float) -> np.ndarray:
    """div_h(coef * grad_h v) in flux form; zero on the boundary ring."""
    div = np.zeros_like(v)
    n = v.ndim
    for ax in range(n):
        dn = coef[ax]
        sl_lo = [slice(None)] * n
        sl_hi = [slice(None)] * n
        sl_lo[ax] = slice(None, -1)
        sl_hi[ax] = slice(1, None)
        face_c = 0.5 * (dn[tuple(sl_lo)] + dn[tuple(sl_hi)])
        flux = face_c * (v[tuple(sl_hi)] - v[tuple(sl_lo)]) / h
        sl_mid = [slice(None)] * n
        sl_mid[ax] = slice(1, -1)
        sl_f_hi = [slice(None)] * n
        sl_f_hi[ax] = slice(1, None)
        sl_f_lo = [slice(None)] * n
        sl_f_lo[ax] = slice(None, -1)
        div_ax = np.zeros_like(v)
        div_ax[tuple(sl_mid)] = (flux[tuple(sl_f_hi)] - flux[tuple(sl_f_lo)]) / h
        div += div_ax
    return div


def explicit_cfl_limit(grid: SpaceTimeGrid, u_now: np.ndarray, m: float,
                       cfg: SolverConfig, L_up: float = 1.0) -> float:
    """Largest stable dt.  The diffusivity m u^(m-1) blows up as u drops, so
    the binding value is the slice minimum, floored at u_floor."""
    u_small = max(cfg.u_floor, float(u_now.min()))
    diff_max = m * u_small ** (m - 1.0) * L_up
    return cfg.cfl_safety * grid.h**2 / (2.0 * grid.n * diff_max)


def step(grid: SpaceTimeGrid, u_now: np.ndarray, f_slice, A: StructureField,
         cfg: SolverConfig, dt: float, t_now: float, m: float):
    """Advance one slice by dt.  Returns (u_next, stats dict).

    Explicit: forward Euler on div_h A(grad_h u^m) + f, CFL-checked.
    Semi-implicit: backward Euler with diffusivity m*max(u,floor)^(m-1)
    lagged inside a Picard loop around a linear diffusion solve.
    Negative roundoff values are clamped to zero and counted.
    """
    f_slice = np.zeros_like(u_now) if f_slice is None else f_slice
    t_next = t_now + dt
    if cfg.scheme == "explicit":
        dt_max = explicit_cfl_limit(grid, u_now, m, cfg, A.L_up)
        if dt > dt_max:
            raise CflViolation(f"dt={dt:.3e} exceeds stable limit {dt_max:.3e}")
        v = u_now**m
        coef = A.node_coefficients(grid, t_now)
        u_next = u_now + dt * (_divergence_of_flux(v, coef, grid.h) + f_slice)
        iterations = 0
    else:
        u_next, iterations = _semi_implicit_solve(grid, u_now, f_slice, A, cfg,
                                                  dt, t_next, m)
    if cfg.boundary is not None:
        bmask = _boundary_mask(grid.shape)
        bc_vals = np.broadcast_to(
            np.asarray(cfg.boundary(*grid.coords, t_next), dtype=float), grid.shape)
        u_next = u_next.copy()
        u_next[bmask] = bc_vals[bmask]
    clamped = int((u_next < 0).sum())
    if clamped:
        u_next = np.maximum(u_next, 0.0)
    stats = {"clamped": clamped, "min": float(u_next.min()),
             "max": float(u_next.max()), "iterations": iterations,
             "cfl_margin": (dt / explicit_cfl_limit(grid, u_now, m, cfg, A.L_up))
             if cfg.scheme == "explicit" else None}
    return u_next, stats


def _semi_implicit_solve(grid, u_now, f_slice, A, cfg, dt, t_next, m):
    shape = grid.shape
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)
    interior = ~_boundary_mask(shape)
    rhs_base = (u_now + dt * f_slice).ravel()
    if cfg.boundary is not None:
        bc_vals = np.broadcast_to(
            np.asarray(cfg.boundary(*grid.coords, t_next), dtype=float), shape).ravel()
    else:
        bc_vals = np.zeros(N)
    d_axes = A.node_coefficients(grid, t_next)
    u_lag = u_now.copy()
    for it in range(cfg.picard_maxiter):
        diff = m * np.maximum(u_lag, cfg.u_floor) ** (m - 1.0)
        rows, cols, vals = [], [], []
        diag = np.ones(N)
        w0 = dt / grid.h**2
        for ax in range(grid.n):
            dn = diff * d_axes[ax]
            sl_lo = [slice(None)] * grid.n
            sl_hi = [slice(None)] * grid.n
            sl_lo[ax] = slice(None, -1)
            sl_hi[ax] = slice(1, None)
            face = 0.5 * (dn[tuple(sl_lo)] + dn[tuple(sl_hi)]) * w0
            left = idx[tuple(sl_lo)].ravel()
            right = idx[tuple(sl_hi)].ravel()
            fr = face.ravel()
            int_flat = interior.ravel()
            ml = int_flat[left]
            mr = int_flat[right]
            np.add.at(diag, left[ml], fr[ml])
            rows.append(left[ml]); cols.append(right[ml]); vals.append(-fr[ml])
            np.add.at(diag, right[mr], fr[mr])
            rows.append(right[mr]); cols.append(left[mr]); vals.append(-fr[mr])
        rows.append(np.arange(N)); cols.append(np.arange(N)); vals.append(diag)
        mat = sp.csr_matrix((np.concatenate(vals),
                             (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        rhs = rhs_base.copy()
        bd = ~interior.ravel()
        rhs[bd] = bc_vals[bd]
        u_new = spla.spsolve(mat, rhs).reshape(shape)
        if not np.isfinite(u_new).all():
            raise LinearSolveDiverged("linear solve produced non-finite values")
        delta = float(np.abs(u_new - u_lag).max())
        u_lag = u_new
        if delta <= cfg.picard_tol * (1.0 + float(np.abs(u_now).max())):
            return u_lag, it + 1
    raise LinearSolveDiverged(
        f"Picard iteration did not reach {cfg.picard_tol} in {cfg.picard_maxiter} steps")


@dataclass
class SolveResult:
    """Full trajectory plus per-step diagnostics."""

    u: ScalarField
    clamp_counts: list = field(default_factory=list)
    min_values: list = field(default_factory=list)
    max_values: list = field(default_factory=list)
    cfl_margins: list = field(default_factory=list)

    @property
    def total_clamped(self) -> int:
        return sum(self.clamp_counts)


def solve(grid: SpaceTimeGrid, u0, f, A: StructureField, cfg: SolverConfig,
          m: float) -> SolveResult:
    """March the initial slice across the grid's time axis.

    ``u0`` is an array on the spatial grid (or a callable of the coordinates);
    ``f`` is a ScalarField or None.  The trajectory stores one slice per grid
    time; boundary values come from ``cfg.boundary``.
    """
    if callable(u0):
        u0 = np.asarray(u0(*grid.coords), dtype=float)
    u0 = np.broadcast_to(np.asarray(u0, dtype=float), grid.shape).copy()
    if u0.min() < 0:
        raise ValueError("initial data must be nonnegative")
    traj = np.empty((grid.nt,) + grid.shape)
    traj[0] = u0
    result = SolveResult(u=None)
    current = u0
    for k in range(grid.nt - 1):
        # forward schemes read f at the departure slice, backward at arrival
        if f is None:
            f_slice = None
        elif cfg.scheme == "explicit":
            f_slice = f.values[k]
        else:
            f_slice = f.values[k + 1]
        current, stats = step(grid, current, f_slice, A, cfg, grid.dt,
                              float(grid.times[k]), m)
        traj[k + 1] = current
        result.clamp_counts.append(stats["clamped"])
        result.min_values.append(stats["min"])
        result.max_values.append(stats["max"])
        result.cfl_margins.append(stats["cfl_margin"])
    result.u = ScalarField(grid, traj, nonneg=True, name="solution")
    return result


# ---------------------------------------------------------------------------
# weak residual
# ---------------------------------------------------------------------------

class BumpTest:
    """Smooth compactly supported product bump, with analytic derivatives."""

    def __init__(self, center_x, center_t, width_x, width_t):
        self.cx = np.atleast_1d(np.asarray(center_x, dtype=float))
        self.ct = float(center_t)
        self.wx = float(width_x)
        self.wt = float(width_t)

    @staticmethod
    def _psi(s):
        out = np.zeros_like(s)
        inside = np.abs(s) < 1.0
        out[inside] = np.exp(1.0 / (s[inside]**2 - 1.0))
        return out

    @staticmethod
    def _dpsi(s):
        out = np.zeros_like(s)
        inside = np.abs(s) < 1.0
        si = s[inside]
        out[inside] = np.exp(1.0 / (si**2 - 1.0)) * (-2.0 * si / (si**2 - 1.0) ** 2)
        return out

    def _parts(self, coords, t):
        sx = [(coords[i] - self.cx[i]) / self.wx for i in range(len(self.cx))]
        st = (t - self.ct) / self.wt
        return sx, st

    def value(self, coords, t):
        sx, st = self._parts(coords, t)
        phi = self._psi(np.full(coords[0].shape, st))
        for s in sx:
            phi = phi * self._psi(s)
        return phi

    def dt(self, coords, t):
        sx, st = self._parts(coords, t)
        phi_t = self._dpsi(np.full(coords[0].shape, st)) / self.wt
        for s in sx:
            phi_t = phi_t * self._psi(s)
        return phi_t

    def grad(self, coords, t):
        sx, st = self._parts(coords, t)
        base = self._psi(np.full(coords[0].shape, st))
        out = []
        for i in range(len(sx)):
            g = base * self._dpsi(sx[i]) / self.wx
            for j, s in enumerate(sx):
                if j != i:
                    g = g * self._psi(s)
            out.append(g)
        return np.stack(out)


def default_bump_battery(grid: SpaceTimeGrid) -> list[BumpTest]:
    """Five bumps: one centered, four offset, all supported strictly inside."""
    cx = np.array([0.5 * (a + b) for a, b in grid.box])
    ct = 0.5 * sum(grid.t_range)
    half_x = min(0.5 * (b - a) for a, b in grid.box)
    half_t = 0.5 * (grid.t_range[1] - grid.t_range[0])
    bumps = [BumpTest(cx, ct, 0.9 * half_x, 0.9 * half_t)]
    for sign in (-1, 1):
        off = np.zeros_like(cx)
        off[0] = sign * 0.3 * half_x
        bumps.append(BumpTest(cx + off, ct, 0.55 * half_x, 0.8 * half_t))
        bumps.append(BumpTest(cx, ct + sign * 0.3 * half_t, 0.8 * half_x, 0.55 * half_t))
    return bumps


def weak_residual(u: ScalarField, f, A: StructureField, m: float,
                  battery: list[BumpTest] | None = None) -> float:
    """Max over the bump battery of |integral(-u phi_t + A(Du^m).Dphi - f phi)|,
    normalized per bump by integral(|phi| + |phi_t| + |Dphi|)."""
    grid = u.grid
    if battery is None:
        battery = default_bump_battery(grid)
    grad_vm = discrete_gradient_of_power(u, m)
    cellvol = grid.cell_volume
    worst = 0.0
    for bump in battery:
        acc = 0.0
        norm = 0.0
        for k, t in enumerate(grid.times):
            phi = bump.value(grid.coords, t)
            phi_t = bump.dt(grid.coords, t)
            dphi = bump.grad(grid.coords, t)
            a_grad = A.apply(grad_vm[:, k], grid, t)
            term = -u.values[k] * phi_t + (a_grad * dphi).sum(axis=0)
            if f is not None:
                term = term - f.values[k] * phi
            acc += term.sum()
            norm += (np.abs(phi) + np.abs(phi_t) + np.abs(dphi).sum(axis=0)).sum()
        if norm > 0:
            worst = max(worst, abs(acc * cellvol) / (norm * cellvol))
    return worst
