"""Empirical evaluation of the inequality suite: both sides of every estimate
are computed by quadrature and reported with the empirical constant
LHS / sum(RHS terms).  Nothing here asserts magnitudes; pass/fail decisions
against configured tolerances happen in the report layer and the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from .grid import (
    Cylinder,
    ScalarField,
    TimeConvention,
    ball_weights,
    cylinder_integral,
    cylinder_mean,
    grad_energy_field,
    slice_ball_mean,
    time_weights,
    weighted_slice_mean,
)
from .geometry import ScalingProfile, check_intrinsic


class HypothesisUnmet(Exception):
    """An estimate's stated hypothesis fails on the given data."""


class NotSubIntrinsic(Exception):
    pass


class NotIntrinsic(Exception):
    pass


class FSmallnessFails(Exception):
    pass


class RegimeMismatch(Exception):
    pass


class ZeroSolution(Exception):
    pass


DEGENERATE = "DEGENERATE"
OK = "OK"


@dataclass
class InequalityReport:
    """LHS / RHS record of one inequality evaluation.

    ``empirical_constant`` is lhs / sum(rhs_terms); a vanishing right-hand
    side is recorded as the DEGENERATE outcome instead of a number (constant
    fields must pass trivially, not crash).
    """

    name: str
    lhs: float
    rhs_terms: dict
    tolerance: float | None = None
    geometry: dict = dc_field(default_factory=dict)
    outcome: str = OK
    empirical_constant: float | None = None
    passed: bool | None = None

    @classmethod
    def make(cls, name, lhs, rhs_terms, tolerance=None, geometry=None):
        total = sum(rhs_terms.values())
        rep = cls(name=name, lhs=float(lhs),
                  rhs_terms={k: float(v) for k, v in rhs_terms.items()},
                  tolerance=tolerance, geometry=geometry or {})
        if total <= 0.0:
            rep.outcome = DEGENERATE
            rep.empirical_constant = None
            rep.passed = lhs <= 1e-12 if tolerance is not None else None
        else:
            rep.empirical_constant = float(lhs) / float(total)
            if tolerance is not None:
                rep.passed = rep.empirical_constant <= tolerance
        return rep

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs_terms": self.rhs_terms,
            "tolerance": self.tolerance,
            "geometry": self.geometry,
            "outcome": self.outcome,
            "empirical_constant": self.empirical_constant,
            "passed": self.passed,
        }


class RegimeLabel(Enum):
    DEGENERATE_REGIME = "DEGENERATE"
    NON_DEGENERATE_REGIME = "NON_DEGENERATE"


@dataclass
class Regime:
    label: RegimeLabel
    epsilon: float
    oscillation_ratio: float
    zero_solution: bool = False


@dataclass
class HigherIntegrabilityProbe:
    """Exponents (strictly above 1, at most 1.5) probed for gradient
    integrability beyond square-summability."""

    p_list: tuple
    region: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        for q in self.p_list:
            if not (1.0 < q <= 1.5):
                raise ValueError(f"probe exponents must lie in (1, 1.5], got {q}")


# ---------------------------------------------------------------------------
# scalar auxiliary bounds
# ---------------------------------------------------------------------------

def aux_integral_bounds(u_val: float, a: float, m: float) -> dict:
    """Closed-form integral of y^m - a^m between a and u, with the sandwich
    bounds: factors [1/2, 1] for u >= a and [m/2, 1] for u < a."""
    if u_val < 0 or a < 0:
        raise ValueError("u and a must be nonnegative")
    if u_val >= a:
        integral = (u_val ** (m + 1) - a ** (m + 1)) / (m + 1) - a**m * (u_val - a)
        product = (u_val - a) * (u_val**m - a**m)
        lower = 0.5 * product
    else:
        integral = a**m * (a - u_val) - (a ** (m + 1) - u_val ** (m + 1)) / (m + 1)
        product = (a - u_val) * (a**m - u_val**m)
        lower = 0.5 * m * product
    upper = product
    slack = 1e-12 * max(1.0, abs(product))
    return {
        "integral": integral,
        "lower": lower,
        "upper": upper,
        "ok": lower - slack <= integral <= upper + slack,
    }


def power_inequality(a: float, b: float, m: float) -> bool:
    """|a^m - b^m| <= |a - b|^m for a, b >= 0 and 0 < m < 1."""
    if a < 0 or b < 0 or not (0 < m < 1):
        raise ValueError("need a, b >= 0 and m in (0,1)")
    return abs(a**m - b**m) <= abs(a - b) ** m + 1e-12


# ---------------------------------------------------------------------------
# mean-change lemmas (slice-level, plain arrays)
# ---------------------------------------------------------------------------

def best_constant_property(g: np.ndarray, eta: np.ndarray, q: float,
                           constants) -> dict:
    """Weighted q-oscillation about the weighted mean vs about arbitrary
    constants: the former never exceeds twice the latter."""
    g = np.asarray(g, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    if eta.min() < 0 or eta.sum() <= 0:
        raise ZeroWeightError("eta must be nonnegative with positive mass")
    norm = eta.sum()
    mean_eta = (g * eta).sum() / norm
    lhs = ((np.abs(g - mean_eta) ** q * eta).sum() / norm) ** (1 / q)
    worst = 0.0
    for c in constants:
        rhs = 2.0 * ((np.abs(g - c) ** q * eta).sum() / norm) ** (1 / q)
        if rhs > 0:
            worst = max(worst, lhs / rhs)
        elif lhs > 0:
            worst = math.inf
    return {"worst_ratio": worst, "ok": worst <= 1.0 + 1e-12}


class ZeroWeightError(Exception):
    pass


def mean_change_factor2(g: np.ndarray, eta: np.ndarray, q: float) -> dict:
    """For 0 <= eta <= 1: the eta-weighted q-oscillation about the weighted
    mean is at most twice the unweighted one, and the two means differ by at
    most that same bound."""
    g = np.asarray(g, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    if eta.min() < -1e-15 or eta.max() > 1 + 1e-15:
        raise ValueError("mean-change bound needs 0 <= eta <= 1")
    norm = eta.sum()
    if norm <= 0:
        raise ZeroWeightError("eta has no mass")
    mean_eta = (g * eta).sum() / norm
    mean_plain = g.mean()
    lhs = ((np.abs(g - mean_eta) ** q * eta).sum() / norm) ** (1 / q)
    rhs = 2.0 * (np.abs(g - mean_plain) ** q).mean() ** (1 / q)
    gap = abs(mean_eta - mean_plain)
    return {
        "oscillation_ok": lhs <= rhs + 1e-12,
        "mean_gap_ok": gap <= lhs + 1e-12 and gap <= rhs + 1e-12,
        "lhs": lhs, "rhs": rhs, "mean_gap": gap,
    }


def power_mean_square_equivalence(g: np.ndarray, q: float, K_cap: float | None = None) -> dict:
    """Square oscillation of g^q about (mean g)^q vs about mean(g^q): the two
    are equivalent for q > 1/2, and for q <= 1/2 under sup g <= K mean g.
    Records the empirical constants of both directions."""
    g = np.asarray(g, dtype=float).ravel()
    if g.min() < 0:
        raise ValueError("g must be nonnegative")
    if q <= 0.5:
        mean_g = g.mean()
        if mean_g <= 0 or K_cap is None or g.max() > K_cap * mean_g:
            raise HypothesisUnmet(
                "q <= 1/2 requires sup g <= K mean g with the K supplied")
    gq = g**q
    a = np.abs(gq - g.mean() ** q) ** 2
    b = np.abs(gq - gq.mean()) ** 2
    A, B = a.mean(), b.mean()
    if A <= 0 and B <= 0:
        return {"c_forward": None, "c_backward": None, "degenerate": True}
    return {
        "c_forward": A / B if B > 0 else math.inf,
        "c_backward": B / A if A > 0 else math.inf,
        "degenerate": False,
    }


def convex_mean_change(u: np.ndarray, eta: np.ndarray, p: float, m: float) -> dict:
    """Weighted p-oscillation of u^m about (weighted mean of u)^m vs about the
    weighted mean of u^m; valid for p >= 1/m, two-sided with factor 2."""
    if p < 1.0 / m:
        raise HypothesisUnmet(f"need p >= 1/m = {1/m}, got {p}")
    u = np.asarray(u, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    if u.min() < 0 or eta.min() < 0 or eta.sum() <= 0:
        raise ValueError("need u >= 0 and admissible eta")
    norm = eta.sum()
    lam = (u * eta).sum() / norm
    um = u**m
    em = (um * eta).sum() / norm
    lhs = ((np.abs(um - lam**m) ** p * eta).sum() / norm) ** (1 / p)
    mid = ((np.abs(um - em) ** p * eta).sum() / norm) ** (1 / p)
    if lhs <= 0 and mid <= 0:
        return {"c_forward": None, "c_backward": None, "degenerate": True}
    return {
        "c_forward": lhs / mid if mid > 0 else math.inf,
        "c_backward": mid / lhs if lhs > 0 else math.inf,
        "degenerate": False,
    }


def small_mean_comparison(f_outer: np.ndarray, f_inner: np.ndarray,
                          q: float, vol_ratio: float, eps: float) -> dict:
    """Two nested regions: if the inner mean is eps-small against the outer
    q-mean, it is controlled by the outer q-oscillation with the stated
    blowup in eps and the volume ratio."""
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0,1)")
    f_outer = np.asarray(f_outer, dtype=float).ravel()
    f_inner = np.asarray(f_inner, dtype=float).ravel()
    inner_mean = abs(f_inner.mean())
    outer_q = (np.abs(f_outer) ** q).mean() ** (1 / q)
    hypothesis = inner_mean <= eps * outer_q + 1e-15
    osc = (np.abs(f_outer - f_outer.mean()) ** q).mean() ** (1 / q)
    bound = eps / (1 - eps) * (1 + vol_ratio ** (1 / q)) * osc
    return {
        "hypothesis_met": bool(hypothesis),
        "inner_mean": inner_mean,
        "bound": bound,
        "ok": (inner_mean <= bound + 1e-12) if hypothesis else None,
    }


def mean_change_checks(g: np.ndarray, eta: np.ndarray, q_or_p: float, m: float,
                       K_cap: float | None = None) -> dict:
    """Bundle of the slice-level mean-change checks on one sample."""
    out = {"square_equivalence": power_mean_square_equivalence(g, q_or_p, K_cap)}
    if q_or_p >= 1.0 / m:
        out["convex_mean_change"] = convex_mean_change(g, eta, q_or_p, m)
    out["factor2"] = mean_change_factor2(g, np.clip(eta, 0.0, 1.0), max(q_or_p, 1.0))
    return out


# ---------------------------------------------------------------------------
# energy estimates
# ---------------------------------------------------------------------------

def _slice_indices_in(grid, t_lo, t_hi):
    """Indices of slices with positive cell overlap with (t_lo, t_hi),
    falling back to the nearest slice when the window is sub-cell."""
    idx = np.nonzero(time_weights(grid, t_lo, t_hi) > 0)[0]
    if idx.size == 0:
        idx = np.array([grid.nearest_time_index(0.5 * (t_lo + t_hi))])
    return idx


def energy_estimate(u: ScalarField, f, z0, rho: float, theta: float,
                    c_level: float, variant: str = "FULL",
                    F: ScalarField | None = None, m: float = 0.5) -> InequalityReport:
    """Caccioppoli-type bound on an inner cylinder from data on its double.

    FULL uses oscillations of u^m against c^m on the right; MODIFIED replaces
    them with powers of |u - c|.  Grid sup realizes the essential sup.
    """
    if c_level < 0:
        raise ValueError("comparison level must be >= 0")
    if variant not in ("FULL", "MODIFIED"):
        raise ValueError(f"unknown variant {variant!r}")
    grid = u.grid
    x0, t0 = z0
    inner = Cylinder.centered(x0, t0, theta * rho**2, rho)
    outer = Cylinder.centered(x0, t0, theta * (2 * rho) ** 2, 2 * rho)
    admissible = outer.is_admissible(grid)
    if F is None:
        F = grad_energy_field(u, m)
    vm = u.values**m
    cm = c_level**m
    w = np.abs(vm - cm)

    sup1 = 0.0
    sup2 = 0.0
    for k in _slice_indices_in(grid, inner.t_lo, inner.t_hi):
        wb = ball_weights(grid, x0, rho)
        cell = grid.h**grid.n
        sup1 = max(sup1, float((w[k] ** ((m + 1) / m) * wb).sum() * cell))
        sup2 = max(sup2, float((w[k] * np.abs(u.values[k] - c_level) * wb).sum() * cell))
    w_field = ScalarField(grid, w)
    mixed_field = ScalarField(grid, w * np.abs(u.values - c_level))
    grad_term = cylinder_integral(F, inner)

    rhs_f = cylinder_integral(f, outer, exponent=2.0) * rho**2 if f is not None else 0.0
    if variant == "FULL":
        lhs = sup1 + sup2 + grad_term
        rhs = {
            "time_term": cylinder_integral(mixed_field, outer) / (theta * rho**2),
            "space_term": cylinder_integral(w_field, outer, exponent=2.0) / rho**2,
            "source_term": rhs_f,
        }
    else:
        lhs = sup1 + grad_term
        diff = ScalarField(grid, np.abs(u.values - c_level))
        rhs = {
            "time_term": cylinder_integral(diff, outer, exponent=m + 1.0) / (theta * rho**2),
            "space_term": cylinder_integral(diff, outer, exponent=2.0 * m) / rho**2,
            "source_term": rhs_f,
        }
    return InequalityReport.make(
        f"energy_{variant.lower()}", lhs, rhs,
        geometry={"z0": [list(np.atleast_1d(x0).astype(float)), float(t0)],
                  "rho": rho, "theta": theta, "c_level": c_level,
                  "admissible": admissible})


def subintrinsic_energy(u: ScalarField, f, z0, s: float, theta: float,
                        K: float, m: float, F: ScalarField | None = None) -> InequalityReport:
    """Homogeneous energy bound on cylinders whose scaling dominates the
    solution's size; the measured constant seeds the covering configuration."""
    grid = u.grid
    x0, t0 = z0
    r = math.sqrt(s / theta)
    Q = Cylinder.centered(x0, t0, s, r)
    chk = check_intrinsic(u, Q, theta, K, m)
    if not chk["subintrinsic"]:
        raise NotSubIntrinsic(
            f"(mean u^(m+1))^((1-m)/(m+1)) = {chk['rho_star']:.4g} > K*theta = {K * theta:.4g}")
    if F is None:
        F = grad_energy_field(u, m)
    r_half = math.sqrt(s / (4.0 * theta))
    sup_term = 0.0
    for k in _slice_indices_in(grid, t0 - 0.5 * s, t0 + 0.5 * s):
        sup_term = max(sup_term, slice_ball_mean(u, k, x0, r_half, exponent=m + 1.0))
    inner = Cylinder.centered(x0, t0, 0.5 * s, r_half)
    lhs = sup_term / s + cylinder_mean(F, inner)
    rhs = {"scaling_term": theta ** ((m + 1.0) / (1.0 - m)) / s}
    if f is not None:
        wt = time_weights(grid, Q.t_lo, Q.t_hi)
        wb = ball_weights(grid, x0, r)
        support = np.outer(wt > 0, wb.ravel() > 0).reshape((grid.nt,) + grid.shape)
        f_sup = float(np.abs(f.values[support]).max()) if support.any() else 0.0
        rhs["source_sup"] = (s / theta) * f_sup**2
    else:
        rhs["source_sup"] = 0.0
    return InequalityReport.make(
        "subintrinsic_energy", lhs, rhs,
        geometry={"z0": [list(np.atleast_1d(x0).astype(float)), float(t0)],
                  "s": s, "theta": theta, "K": K,
                  "admissible": Q.is_admissible(grid),
                  "intrinsic_ratio": chk["ratio"]})


@dataclass(frozen=True)
class ZetaSpec:
    """Product cutoff zeta(x,t) = zeta1(x) zeta2(t): spatial plateau of
    relative radius ``space_plateau`` (of the outer radius) with a linear
    radial ramp to zero at the outer boundary; time ramp from 0 at the window
    bottom to 1 after ``time_ramp`` of the window."""

    space_plateau: float = 0.5
    time_ramp: float = 0.5


def truncation_energy(u: ScalarField, f, z0, rho: float, theta: float,
                      k_level: float, zeta: ZetaSpec | None = None,
                      m: float = 0.5, nu: float = 1.0) -> InequalityReport:
    """Energy bound for the truncation (u^m - k^m)_+ on a backward cylinder
    with a piecewise-smooth product cutoff."""
    if k_level <= 0:
        raise ValueError("truncation level must be > 0")
    zeta = zeta or ZetaSpec()
    grid = u.grid
    x0, t0 = z0
    T = theta * (2 * rho) ** 2
    t_lo, t_hi = t0 - T, t0
    R_out = 2 * rho
    plateau = zeta.space_plateau * R_out

    d = grid.spatial_distance(x0)
    zeta1 = np.clip((R_out - d) / (R_out - plateau), 0.0, 1.0)
    dzeta1 = np.where((d > plateau) & (d < R_out), 1.0 / (R_out - plateau), 0.0)
    ramp_end = t_lo + zeta.time_ramp * T
    zeta2 = np.clip((grid.times - t_lo) / (ramp_end - t_lo), 0.0, 1.0)
    dzeta2 = np.where((grid.times > t_lo) & (grid.times < ramp_end),
                      1.0 / (ramp_end - t_lo), 0.0)

    km = k_level**m
    w = np.maximum(u.values**m - km, 0.0)
    grad_w = np.zeros((grid.n,) + w.shape)
    for ax in range(grid.n):
        grad_w[ax] = np.gradient(w, grid.h, axis=1 + ax, edge_order=2)
    grad_w_sq = (grad_w**2).sum(axis=0)

    wt = time_weights(grid, t_lo, t_hi)
    wb = ball_weights(grid, x0, R_out)
    cell_x = grid.h**grid.n

    def st_integral(nodal):
        per_slice = (nodal * wb).reshape(grid.nt, -1).sum(axis=1)
        return float((wt * per_slice).sum() * grid.cell_volume)

    sup_term = 0.0
    for k in _slice_indices_in(grid, t_lo, t_hi):
        val = (w[k] ** ((m + 1) / m) * zeta1**2 * wb).sum() * cell_x * zeta2[k] ** 2
        sup_term = max(sup_term, float(val) / (m + 1))
    k0 = grid.nearest_time_index(t_lo)
    anti = np.maximum(
        (u.values[k0] ** (m + 1) - k_level ** (m + 1)) / (m + 1)
        - km * (u.values[k0] - k_level), 0.0) * (u.values[k0] > k_level)
    initial_term = float((anti * zeta1**2 * wb).sum() * cell_x * zeta2[k0] ** 2)
    z2 = zeta2.reshape((-1,) + (1,) * grid.n)
    dz2 = dzeta2.reshape((-1,) + (1,) * grid.n)
    grad_term = 0.25 * nu * st_integral(grad_w_sq * zeta1**2 * z2**2)
    chi = (w > 0).astype(float)
    rhs = {
        "time_cutoff_term": st_integral(u.values ** (m + 1) * chi * zeta1 * z2
                                        * np.abs(zeta1 * dz2)),
        "space_cutoff_term": st_integral(w**2 * (dzeta1 * z2) ** 2),
        "source_term": st_integral(z2**2 * zeta1**2 * w
                                   * (np.abs(f.values) if f is not None else 0.0)),
    }
    lhs = sup_term - initial_term + grad_term
    return InequalityReport.make(
        "truncation_energy", lhs, rhs,
        geometry={"z0": [list(np.atleast_1d(x0).astype(float)), float(t0)],
                  "rho": rho, "theta": theta, "k_level": k_level,
                  "admissible": Cylinder.over_interval(x0, t_lo, t_hi, R_out
                                                       ).is_admissible(grid)})


# ---------------------------------------------------------------------------
# sup bounds and reverse Hoelder for u (vertex cylinders)
# ---------------------------------------------------------------------------

def _vertex_cylinders(profile: ScalingProfile, t_height: float):
    """Snap t to the profile grid and build the vertex family: the one-sided
    cylinder at height t plus the enlargements at 3t/2 and 2t."""
    i = profile.ceil_index(t_height)
    if i is None:
        raise ValueError(f"height {t_height} above the profile cap")
    t_h = float(profile.s[i])
    x0, t0 = profile.z
    j32 = profile.ceil_index(1.5 * t_h)
    j2 = profile.ceil_index(2.0 * t_h)
    if j32 is None or j2 is None:
        raise ValueError("enlarged heights exceed the profile cap")
    Qv = Cylinder.over_interval(x0, t0, t0 + t_h, profile.r[i])
    Q32 = Cylinder.over_interval(x0, t0 - 0.5 * t_h, t0 + t_h, profile.r[j32])
    Q2 = Cylinder.over_interval(x0, t0 - t_h, t0 + t_h, profile.r[j2])
    return i, j2, t_h, Qv, Q32, Q2


def _f_smallness(f, Q2, r2, theta2, t_h, m, cap, grid):
    if f is None:
        return 0.0, True
    wt = time_weights(grid, Q2.t_lo, Q2.t_hi)
    wb = ball_weights(grid, Q2.center_x, Q2.radius)
    support = np.outer(wt > 0, wb.ravel() > 0).reshape((grid.nt,) + grid.shape)
    f_sup = float(np.abs(f.values[support]).max()) if support.any() else 0.0
    lhs = r2**2 * f_sup**2
    rhs = theta2 ** ((1 + m) / (1 - m)) / t_h
    return (lhs / rhs if rhs > 0 else math.inf), lhs <= cap * rhs


def sup_bound(u: ScalarField, f, profile: ScalingProfile, t_height: float,
              p_mean: float, m: float, K: float = 4.0,
              fsmall_cap: float = 10.0) -> InequalityReport:
    """Pointwise bound over a vertex cylinder by a power mean over its
    doubled, centered enlargement; requires the vertex cylinder intrinsic."""
    if p_mean <= 0:
        raise ValueError("p_mean must be > 0")
    grid = u.grid
    i, j2, t_h, Qv, _, Q2 = _vertex_cylinders(profile, t_height)
    theta_t = float(profile.theta[i])
    chk = check_intrinsic(u, Qv, theta_t, K, m)
    if not chk["intrinsic"]:
        raise NotIntrinsic(f"vertex cylinder at height {t_h:.4g} has ratio "
                           f"{chk['ratio']:.4g} outside [1/{K}, {K}]")
    theta2 = float(profile.theta[j2])
    fs_ratio, fs_ok = _f_smallness(f, Q2, Q2.radius, theta2, t_h, m, fsmall_cap, grid)
    if not fs_ok:
        raise FSmallnessFails(f"sup of r^2 f^2 exceeds the cap: ratio {fs_ratio:.4g}")
    x0, t0 = profile.z
    tmask = (grid.times >= t0 - 1e-12) & (grid.times <= t0 + t_h + 1e-12)
    bmask = grid.spatial_distance(x0) <= Qv.radius
    lhs = float(u.values[tmask][:, bmask].max()) if tmask.any() and bmask.any() else 0.0
    rhs_val = cylinder_mean(u, Q2, exponent=p_mean) ** (1.0 / p_mean)
    return InequalityReport.make(
        f"sup_bound_p{p_mean:g}", lhs, {"power_mean": rhs_val},
        geometry={"z0": [list(x0), t0], "t": t_h, "r_t": Qv.radius,
                  "r_2t": Q2.radius, "intrinsic_ratio": chk["ratio"],
                  "f_smallness_ratio": fs_ratio,
                  "admissible": Q2.is_admissible(grid)})


def reverse_holder_u(u: ScalarField, f, profile: ScalingProfile, t_height: float,
                     m: float, K: float = 4.0, fsmall_cap: float = 10.0) -> InequalityReport:
    """Higher power mean of u on the 3t/2 vertex cylinder bounded by a lower
    power mean on the 2t one; the enlargement is what makes it non-trivial."""
    grid = u.grid
    i, j2, t_h, Qv, Q32, Q2 = _vertex_cylinders(profile, t_height)
    theta_t = float(profile.theta[i])
    chk = check_intrinsic(u, Qv, theta_t, K, m)
    if not chk["intrinsic"]:
        raise NotIntrinsic(f"vertex cylinder at height {t_h:.4g} not intrinsic")
    theta2 = float(profile.theta[j2])
    fs_ratio, fs_ok = _f_smallness(f, Q2, Q2.radius, theta2, t_h, m, fsmall_cap, grid)
    if not fs_ok:
        raise FSmallnessFails(f"ratio {fs_ratio:.4g}")
    lhs = cylinder_mean(u, Q32, exponent=m + 1.0) ** (1.0 / (m + 1.0))
    rhs = cylinder_mean(u, Q2, exponent=m) ** (1.0 / m)
    jensen_lhs = cylinder_mean(u, Q2, exponent=m) ** (1.0 / m)
    jensen_rhs = cylinder_mean(u, Q2, exponent=m + 1.0) ** (1.0 / (m + 1.0))
    return InequalityReport.make(
        "reverse_holder_u", lhs, {"lower_power_mean": rhs},
        geometry={"z0": [list(profile.z[0]), profile.z[1]], "t": t_h,
                  "jensen_ok": bool(jensen_lhs <= jensen_rhs * (1 + 1e-10)),
                  "intrinsic_ratio": chk["ratio"],
                  "f_smallness_ratio": fs_ratio,
                  "admissible": Q2.is_admissible(grid)})


def intrinsic_persistence(u: ScalarField, profile: ScalingProfile, m: float,
                          K: float = 4.0, factors=(1.25, 1.5, 2.0)) -> dict:
    """If the centered cylinder at height s is intrinsic, the ones at a*s for
    a in (1,2] stay intrinsic; returns the worst ratio drift observed."""
    worst = 1.0
    found = 0
    for i in range(len(profile.s)):
        Q = profile.cylinder(i, TimeConvention.CENTERED_2TAU)
        if not Q.is_admissible(u.grid):
            continue
        chk = check_intrinsic(u, Q, float(profile.theta[i]), K, m)
        if not chk["intrinsic"]:
            continue
        found += 1
        for a in factors:
            j = profile.ceil_index(a * profile.s[i])
            if j is None:
                continue
            Qa = profile.cylinder(j, TimeConvention.CENTERED_2TAU)
            if not Qa.is_admissible(u.grid):
                continue
            chk_a = check_intrinsic(u, Qa, float(profile.theta[j]), K, m)
            drift = max(chk_a["ratio"], 1.0 / chk_a["ratio"]) if chk_a["ratio"] > 0 else math.inf
            worst = max(worst, drift)
    return {"tested": found, "worst_drift": worst}


# ---------------------------------------------------------------------------
# regimes and gradient reverse Hoelder
# ---------------------------------------------------------------------------

def regime_classify(u: ScalarField, Q: Cylinder, theta: float, epsilon: float,
                    m: float) -> Regime:
    """Oscillation of u^m over Q relative to the size of u: at least epsilon
    means the degenerate regime, below means the nearly-heat-equation one."""
    denom_mean = cylinder_mean(u, Q, exponent=m + 1.0)
    if denom_mean <= 0:
        return Regime(RegimeLabel.NON_DEGENERATE_REGIME, epsilon, 0.0, zero_solution=True)
    vm_mean = cylinder_mean(u, Q, exponent=m)
    osc = ScalarField(u.grid, np.abs(u.values**m - vm_mean))
    num = cylinder_mean(osc, Q, exponent=(m + 1.0) / m) ** (1.0 / (m + 1.0))
    ratio = num / denom_mean ** (1.0 / (m + 1.0))
    label = (RegimeLabel.DEGENERATE_REGIME if ratio >= epsilon
             else RegimeLabel.NON_DEGENERATE_REGIME)
    return Regime(label, epsilon, float(ratio))


def grad_reverse_holder(u: ScalarField, f, profile: ScalingProfile,
                        s_height: float, regime: Regime, vartheta: float,
                        m: float, K: float = 4.0,
                        F: ScalarField | None = None) -> InequalityReport:
    """Reverse Hoelder inequality for the gradient energy on solution-adapted
    cylinders, in the variant matching the classified regime."""
    grid = u.grid
    if F is None:
        F = grad_energy_field(u, m)
    x0, t0 = profile.z
    if regime.label is RegimeLabel.DEGENERATE_REGIME:
        i = profile.ceil_index(s_height)
        if i is None:
            raise ValueError("height above cap")
        s, r = float(profile.s[i]), float(profile.r[i])
        Q = Cylinder.centered(x0, t0, s, r)
        chk = check_intrinsic(u, Q, float(profile.theta[i]), K, m)
        if not chk["intrinsic"]:
            raise NotIntrinsic(f"ratio {chk['ratio']:.4g}")
        live = regime_classify(u, Q, float(profile.theta[i]), regime.epsilon, m)
        if live.label is not regime.label:
            raise RegimeMismatch("cylinder classifies as non-degenerate")
        Q3 = Cylinder.centered(x0, t0, 3 * s, 3 * r)
        lhs = cylinder_mean(F, Q)
        rhs1 = cylinder_mean(F, Q3, exponent=vartheta) ** (1.0 / vartheta)
        if f is not None:
            wt = time_weights(grid, Q3.t_lo, Q3.t_hi)
            wb = ball_weights(grid, x0, Q3.radius)
            support = np.outer(wt > 0, wb.ravel() > 0).reshape((grid.nt,) + grid.shape)
            rhs2 = r**2 * float(np.abs(f.values[support]).max() ** 2) if support.any() else 0.0
        else:
            rhs2 = 0.0
        name = "grad_reverse_holder_degenerate"
        geometry = {"s": s, "r": r, "enlarged": [3 * s, 3 * r],
                    "oscillation_ratio": live.oscillation_ratio,
                    "admissible": Q3.is_admissible(grid)}
    else:
        j = profile.ceil_index(2.0 * s_height)
        if j is None:
            raise ValueError("doubled height above cap")
        s2, r2 = float(profile.s[j]), float(profile.r[j])
        s = 0.5 * s2
        Q2 = Cylinder.centered(x0, t0, s2, r2)
        chk = check_intrinsic(u, Q2, float(profile.theta[j]), K, m)
        if not chk["intrinsic"]:
            raise NotIntrinsic(f"ratio {chk['ratio']:.4g}")
        live = regime_classify(u, Q2, float(profile.theta[j]), regime.epsilon, m)
        if live.label is not regime.label:
            raise RegimeMismatch("cylinder classifies as degenerate")
        Q_half = Cylinder.centered(x0, t0, s, r2)
        lhs = cylinder_mean(F, Q_half)
        rhs1 = cylinder_mean(F, Q2, exponent=vartheta) ** (1.0 / vartheta)
        rhs2 = r2**2 * cylinder_mean(f, Q2, exponent=2.0) if f is not None else 0.0
        name = "grad_reverse_holder_nondegenerate"
        geometry = {"s": s, "r": r2, "enlarged": [s2, r2],
                    "oscillation_ratio": live.oscillation_ratio,
                    "admissible": Q2.is_admissible(grid)}
    return InequalityReport.make(name, lhs, {"power_mean": rhs1, "source": rhs2},
                                 geometry=geometry)


def time_mean_switch(u: ScalarField, f, z0, s: float, r: float,
                     sigma: float, tau: float, m: float,
                     F: ScalarField | None = None) -> InequalityReport:
    """Difference of weighted spatial means of u at two times, against the
    space-time means of |Du^m| and |f| over the enclosing cylinder."""
    grid = u.grid
    x0, t0 = z0
    if not (t0 - 2 * s <= sigma < tau <= t0 + 2 * s):
        raise ValueError("need t0 - 2s <= sigma < tau <= t0 + 2s")
    d = grid.spatial_distance(x0)
    ramp = np.clip((2 * r - d) / r, 0.0, 1.0)
    eta = ramp**2 * (3.0 - 2.0 * ramp)  # cubic smoothstep: 1 on B_r, 0 outside B_2r
    lhs_sq = abs(weighted_slice_mean(u, tau, (x0, 2 * r), eta**2)
                 - weighted_slice_mean(u, sigma, (x0, 2 * r), eta**2))
    lhs_lin = abs(weighted_slice_mean(u, tau, (x0, 2 * r), eta)
                  - weighted_slice_mean(u, sigma, (x0, 2 * r), eta))
    Q = Cylinder.centered(x0, t0, 2 * s, 2 * r)
    if F is None:
        F = grad_energy_field(u, m)
    grad_mag = ScalarField(grid, np.sqrt(F.values), nonneg=True)
    rhs = {
        "gradient_term": s / r * cylinder_mean(grad_mag, Q),
        "source_term": s * cylinder_mean(f, Q) if f is not None else 0.0,
    }
    return InequalityReport.make(
        "time_mean_switch", max(lhs_sq, lhs_lin), rhs,
        geometry={"z0": [list(np.atleast_1d(x0).astype(float)), float(t0)],
                  "s": s, "r": r, "sigma": sigma, "tau": tau,
                  "admissible": Q.is_admissible(grid)})


# ---------------------------------------------------------------------------
# higher integrability probe
# ---------------------------------------------------------------------------

def higher_integrability_level(u: ScalarField, f, z0, S: float, theta_o: float,
                               p_probe: float, m: float,
                               F: ScalarField | None = None) -> dict:
    """One refinement level of the probe: the 2p-th gradient power mean on the
    halved cylinder against the source term and the scaling term."""
    if F is None:
        F = grad_energy_field(u, m)
    x0, t0 = z0
    r = math.sqrt(S / theta_o)
    half = Cylinder.centered(x0, t0, 0.5 * S, 0.5 * r)
    lhs = cylinder_mean(F, half, exponent=p_probe) ** (1.0 / p_probe)
    big = Cylinder.centered(x0, t0, 2.0 * S, 2.0 * r)
    rhs_f = (cylinder_mean(f, big, exponent=2.0 * p_probe) ** (1.0 / p_probe)
             if f is not None else 0.0)
    rhs_scale = theta_o ** ((m + 1.0) / (1.0 - m)) / S
    return {"p": p_probe, "lhs": lhs, "rhs_source": rhs_f,
            "rhs_scaling": rhs_scale,
            "ratio": lhs / (rhs_f + rhs_scale) if rhs_f + rhs_scale > 0 else math.inf}


def higher_integrability_probe(levels: list, z0, S: float, theta_o: float,
                               probe: HigherIntegrabilityProbe, m: float) -> dict:
    """Run the probe over refinement levels; BOUNDED verdict per exponent when
    the two finest levels agree within 20 percent.

    ``levels`` is a list of (u, f) pairs at increasing resolution (f may be
    None); all levels use the same region.
    """
    table = {}
    for q in probe.p_list:
        rows = [higher_integrability_level(u, f, z0, S, theta_o, q, m)
                for (u, f) in levels]
        vals = [row["ratio"] for row in rows]
        if len(vals) >= 2 and vals[-1] > 0 and math.isfinite(vals[-1]):
            drift = abs(vals[-1] - vals[-2]) / vals[-1]
        else:
            drift = math.inf
        table[q] = {"rows": rows, "drift": drift,
                    "verdict": "BOUNDED" if drift < 0.2 else "UNSETTLED"}
    return table


def parabolic_form_check(u: ScalarField, f, z0, R: float, p_probe: float,
                         m: float, F: ScalarField | None = None) -> dict:
    """Standard parabolic cylinder variant: LHS and RHS of the final estimate
    with K = (mean of u^(m+1))^(1-m) on Q_(R^2, R)."""
    if F is None:
        F = grad_energy_field(u, m)
    x0, t0 = z0
    Q = Cylinder.centered(x0, t0, R**2, R)
    K = cylinder_mean(u, Q, exponent=m + 1.0) ** (1.0 - m)
    half = Q.scaled(0.5, 0.5)
    expo = (1.0 - m) / (2.0 * m * p_probe)
    lhs = cylinder_mean(F, half, exponent=p_probe) ** expo
    rhs_f = (R ** (2 * p_probe) * cylinder_mean(f, Q, exponent=2 * p_probe)) ** expo \
        if f is not None else 0.0
    return {"K": K, "lhs": lhs, "rhs_source": math.sqrt(K) * rhs_f,
            "rhs_K": K**1.5, "rhs_const": 1.0,
            "ratio": lhs / (math.sqrt(K) * rhs_f + K**1.5 + 1.0)}


def calibrate_gamma_1(u: ScalarField, f, profile: ScalingProfile, m: float,
                      max_heights: int = 24) -> dict:
    """Measure the homogeneous-energy constant at K = 1: the largest empirical
    constant of the sub-intrinsic energy bound over the profile heights whose
    cylinders are 1-sub-intrinsic and admissible.  Seeds the covering config."""
    worst = 0.0
    used = 0
    idx = np.linspace(0, len(profile.s) - 1, max_heights).astype(int)
    x0, t0 = profile.z
    for i in np.unique(idx):
        s = float(profile.s[i])
        theta = float(profile.theta[i])
        Q = Cylinder.centered(x0, t0, s, math.sqrt(s / theta))
        if not Q.is_admissible(u.grid):
            continue
        try:
            rep = subintrinsic_energy(u, f, (np.asarray(x0), t0), s, theta,
                                      K=1.0 + 1e-9, m=m)
        except NotSubIntrinsic:
            continue
        if rep.outcome == OK and math.isfinite(rep.empirical_constant):
            worst = max(worst, rep.empirical_constant)
            used += 1
    return {"gamma_1": max(worst, 1e-6), "cylinders_used": used}
