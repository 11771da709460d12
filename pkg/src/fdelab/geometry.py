"""Solution-adapted space-time cylinder construction and its property checks.

Given a nonnegative integrable field f (typically u^(m+1)) and a base point z,
this module builds the family of cylinders whose radius r(s) and scaling
theta_s = s / r(s)^2 balance the local mass of f against the time height s.
Every cylinder in the family is sub-intrinsic by construction; the module also
verifies the whole catalogue of structural properties the covering machinery
relies on (monotonicity, intrinsic stopping heights, dilation bounds, nesting,
and the two-point engulfing estimate).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .grid import (
    Cylinder,
    ModelParams,
    ScalarField,
    SpaceTimeGrid,
    TimeConvention,
    cylinder_mean,
    unit_ball_volume,
)


class ProfileMissing(Exception):
    """Engulfing check requested before profiles were built."""


@dataclass(frozen=True)
class GeometryConstants:
    """Exponents and caps of the cylinder construction.

    ``b_hat`` controls how fast radii may shrink with height; it must stay
    below (n+2)p - 2n and below 1/2.  Derived exponents: ``beta = 1 - 2 b_hat``
    (scaling decay on strictly sub-intrinsic stretches), ``a_hat`` (dilation
    exponent), ``a_check`` (ambient comparison exponent).  ``S``/``R`` cap the
    height and radius, ``K`` is the intrinsicity tolerance used for flags.
    """

    params: ModelParams
    S: float
    R: float
    b_hat: float = 0.25
    K: float = 4.0
    s_ratio_log2: float = 1.0 / 8.0   # geometric s-grid step, log2
    s_span_log2: float = 24.0         # grid spans S * 2^-span .. S
    bisect_iters: int = 60

    def __post_init__(self):
        n, p = self.params.n, self.params.p
        b0 = (n + 2) * p - 2 * n
        if not (0.0 < self.b_hat <= 0.5):
            raise ValueError(f"b_hat must lie in (0, 1/2], got {self.b_hat}")
        if not self.b_hat < b0:
            raise ValueError(f"b_hat={self.b_hat} must be < (n+2)p-2n = {b0}")
        if self.S <= 0 or self.R <= 0:
            raise ValueError("S and R must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def beta(self) -> float:
        return 1.0 - 2.0 * self.b_hat

    @property
    def a_hat(self) -> float:
        n, p = self.params.n, self.params.p
        return self.b_hat + 2.0 / (2.0 * p - (2.0 - p) * n)

    @property
    def a_check(self) -> float:
        n, p = self.params.n, self.params.p
        return 1.0 / (2.0 * p + n * (p - 2.0))

    def covering_admissible(self) -> bool:
        """The extra exponent window needed by the level-set pipeline:
        1 < 1/beta < (m+1)/(1-m)."""
        m = self.params.m
        return 1.0 < 1.0 / self.beta < (m + 1.0) / (1.0 - m)

    def s_grid(self) -> np.ndarray:
        """Geometric heights, ascending, from S*2^-span to S."""
        count = int(round(self.s_span_log2 / self.s_ratio_log2)) + 1
        exps = np.arange(count - 1, -1, -1, dtype=float) * self.s_ratio_log2
        return self.S * 2.0 ** (-exps)


class _BallQuadrature:
    """Sorted-distance prefix machinery for fast ball integrals around one
    spatial center, with the fractional boundary-band weights of grid.ball_weights."""

    def __init__(self, grid: SpaceTimeGrid, center):
        self.grid = grid
        self.h = grid.h
        d = grid.spatial_distance(center).ravel()
        self.order = np.argsort(d, kind="stable")
        self.d_sorted = d[self.order]

    def prefix(self, spatial_values: np.ndarray):
        """Prefix sums of values (and values*d) in distance order.
        ``spatial_values`` may be (N,) or (k, N) for k stacked integrands."""
        v = np.atleast_2d(spatial_values)[:, self.order]
        P = np.concatenate([np.zeros((v.shape[0], 1)), np.cumsum(v, axis=1)], axis=1)
        Pd = np.concatenate([np.zeros((v.shape[0], 1)),
                             np.cumsum(v * self.d_sorted, axis=1)], axis=1)
        return P, Pd

    def ball_integrals(self, P, Pd, rhos):
        """Integral over B_rho for each row of P at each rho (rhos aligned
        rowwise).  Returns the same shape as rhos."""
        rhos = np.asarray(rhos, dtype=float)
        i_full = np.searchsorted(self.d_sorted, rhos - 0.5 * self.h, side="right")
        i_band = np.searchsorted(self.d_sorted, rhos + 0.5 * self.h, side="left")
        rows = np.arange(P.shape[0])
        full = P[rows, i_full]
        band_v = P[rows, i_band] - P[rows, i_full]
        band_vd = Pd[rows, i_band] - Pd[rows, i_full]
        ramp = band_v * (rhos / self.h + 0.5) - band_vd / self.h
        return (full + ramp) * self.grid.h**self.grid.n


def _time_window_integrals(field: ScalarField, t_center: float,
                           s_array: np.ndarray) -> np.ndarray:
    """Integral of |f| dt over (t - s/2, t + s/2) at every spatial node,
    for each height in s_array.  Shape (len(s_array), n_spatial)."""
    g = field.grid
    s = np.asarray(s_array, dtype=float)[:, None]
    lo = np.maximum(g.times[None, :] - 0.5 * g.dt, t_center - 0.5 * s)
    hi = np.minimum(g.times[None, :] + 0.5 * g.dt, t_center + 0.5 * s)
    wt = np.clip((hi - lo) / g.dt, 0.0, 1.0)
    flat = np.abs(field.values).reshape(g.nt, -1)
    return (wt @ flat) * g.dt


def _mass_condition(I, rho, s, n, p):
    """LHS of the defining radius condition: I^(2-p) rho^(2p) |B_rho|^(p-2),
    compared against s^2.  Monotone increasing in rho."""
    omega = unit_ball_volume(n)
    with np.errstate(divide="ignore"):
        return I ** (2.0 - p) * rho ** (2.0 * p) * (omega * rho**n) ** (p - 2.0)


def tilde_r(f: ScalarField, z, s, R: float, consts: GeometryConstants) -> float:
    """Largest radius rho < R whose mass condition still holds at height s:
    sup { rho < R : (int_(t-s/2)^(t+s/2) int_B_rho |f|)^(2-p) rho^2p |B_rho|^(p-2) <= s^2 }.

    Computed by bisection (the left side is monotone in rho); returns R when
    the condition holds at rho = R, which covers f == 0 regions.
    """
    x, t = z
    out = _tilde_r_many(f, x, t, np.atleast_1d(np.asarray(s, dtype=float)), R, consts)
    return float(out[0]) if np.isscalar(s) or np.asarray(s).ndim == 0 else out


def _tilde_r_many(f, x, t_center, s_array, R, consts):
    grid = f.grid
    n, p = consts.params.n, consts.params.p
    quad = _BallQuadrature(grid, x)
    g_windows = _time_window_integrals(f, t_center, s_array)
    P, Pd = quad.prefix(g_windows)
    s2 = s_array**2

    def holds(rhos):
        I = quad.ball_integrals(P, Pd, rhos)
        return _mass_condition(I, rhos, s_array, n, p) <= s2

    at_cap = holds(np.full_like(s_array, R))
    lo = np.zeros_like(s_array)
    hi = np.full_like(s_array, R)
    for _ in range(consts.bisect_iters):
        mid = 0.5 * (lo + hi)
        ok = holds(mid)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return np.where(at_cap, R, lo)


@dataclass
class ScalingProfile:
    """The full height -> (raw radius, monotone radius, size, scaling) map at
    one base point, with sub-intrinsic / intrinsic flags per height.

    ``ratio`` is (mean of |f| over the construction cylinder)^((2-p)/p) / theta;
    sub-intrinsic means ratio <= K, intrinsic additionally ratio >= 1/K.
    Means are normalized with the continuum ball volume, which is what makes
    the sub-intrinsic bound exact up to bisection residue.
    """

    z: tuple                    # ((x...), t)
    consts: GeometryConstants
    s: np.ndarray               # ascending heights
    r_tilde: np.ndarray
    r: np.ndarray
    lam: np.ndarray
    theta: np.ndarray
    mean_construction: np.ndarray
    ratio: np.ndarray
    is_subintrinsic: np.ndarray
    is_intrinsic: np.ndarray
    field_name: str = ""
    min_gap_vs_envelope: np.ndarray = dc_field(default=None)

    def index_of(self, s: float) -> int:
        return int(np.argmin(np.abs(np.log(self.s) - math.log(s))))

    def ceil_index(self, s: float):
        """Smallest grid index with height >= s (None if above the cap)."""
        i = int(np.searchsorted(self.s, s * (1 - 1e-12), side="left"))
        return i if i < len(self.s) else None

    def cylinder(self, i: int, convention: TimeConvention) -> Cylinder:
        x, t = self.z
        if convention is TimeConvention.CENTERED_2TAU:
            return Cylinder.centered(x, t, self.s[i], self.r[i])
        if convention is TimeConvention.CONSTRUCTION_S:
            return Cylinder.construction(x, t, self.s[i], self.r[i])
        raise ValueError("profile cylinders use the centered or construction conventions")

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "r_tilde", "r", "lambda", "theta",
                        "subintrinsic", "intrinsic"])
            for i in range(len(self.s)):
                w.writerow(["%.17g" % self.s[i], "%.17g" % self.r_tilde[i],
                            "%.17g" % self.r[i], "%.17g" % self.lam[i],
                            "%.17g" % self.theta[i],
                            int(self.is_subintrinsic[i]), int(self.is_intrinsic[i])])


def build_profile(f: ScalarField, z, consts: GeometryConstants) -> ScalingProfile:
    """Evaluate the raw radius on the geometric height grid, enforce the
    power-law monotone envelope r(s) = min_(a >= s) (s/a)^b_hat rtilde(a),
    and derive size and scaling with their intrinsicity flags."""
    x, t = z
    grid = f.grid
    n, p = consts.params.n, consts.params.p
    s_grid = consts.s_grid()
    rt = _tilde_r_many(f, x, t, s_grid, consts.R, consts)

    # suffix minimum of rtilde(a)/a^b_hat realizes the envelope exactly on the grid
    q = rt / s_grid**consts.b_hat
    q_suffix = np.minimum.accumulate(q[::-1])[::-1]
    r = s_grid**consts.b_hat * q_suffix
    theta = s_grid / r**2
    lam = theta ** (1.0 / (2.0 - p))

    # construction-convention means with continuum ball normalization
    quad = _BallQuadrature(grid, x)
    g_windows = _time_window_integrals(f, t, s_grid)
    P, Pd = quad.prefix(g_windows)
    I = quad.ball_integrals(P, Pd, r)
    omega = unit_ball_volume(n)
    mean_c = I / (s_grid * omega * r**n)
    ratio = mean_c ** ((2.0 - p) / p) / theta
    K = consts.K
    return ScalingProfile(
        z=(tuple(np.atleast_1d(x).astype(float)), float(t)),
        consts=consts, s=s_grid, r_tilde=rt, r=r, lam=lam, theta=theta,
        mean_construction=mean_c, ratio=ratio,
        is_subintrinsic=ratio <= K * (1 + 1e-12),
        is_intrinsic=(ratio <= K * (1 + 1e-12)) & (ratio >= (1 - 1e-12) / K),
        field_name=f.name,
        min_gap_vs_envelope=q / q_suffix - 1.0,
    )


def check_intrinsic(u: ScalarField, Q: Cylinder, theta: float, K: float,
                    m: float) -> dict:
    """Compare rho* = (mean of u^(m+1) over Q)^((1-m)/(m+1)) against theta.

    sub-intrinsic iff rho* <= K theta; intrinsic iff additionally
    theta / K <= rho*.  The all-zero field gives rho* = 0: sub-intrinsic for
    every theta, intrinsic for none.
    """
    mean = cylinder_mean(u, Q, exponent=m + 1.0)
    rho_star = mean ** ((1.0 - m) / (m + 1.0))
    return {
        "rho_star": rho_star,
        "ratio": rho_star / theta,
        "subintrinsic": rho_star <= K * theta,
        "intrinsic": (rho_star <= K * theta) and (theta / K <= rho_star),
    }


# ---------------------------------------------------------------------------
# property verification
# ---------------------------------------------------------------------------

@dataclass
class PropertyCheck:
    name: str
    passed: bool
    worst_slack: float
    detail: str = ""


def verify_profile(profile: ScalingProfile, gamma_grid=(0.5, 0.25, 0.125),
                   strict_margin: float = 1e-3) -> list[PropertyCheck]:
    """Run the structural property suite on a built profile.

    Returns one PropertyCheck per property; ``worst_slack`` is the largest
    multiplicative constant required to make the stated inequality true
    (1.0 means it holds as printed).
    """
    c = profile.consts
    s, r, theta = profile.s, profile.r, profile.theta
    b_hat, beta, a_hat = c.b_hat, c.beta, c.a_hat
    n = c.params.n
    checks = []

    # (a) r(s)^2 theta_s = s to machine precision
    ident = np.abs(r**2 * theta / s - 1.0).max()
    checks.append(PropertyCheck("radius_scaling_identity", ident < 1e-12, 1.0 + ident))

    # (b) power-law monotonicity: r(s)/s^b_hat nondecreasing, r nondecreasing
    qq = r / s**b_hat
    mono = (np.diff(qq) >= -1e-14 * qq[:-1]).all() and (np.diff(r) >= -1e-14 * r[:-1]).all()
    worst = float(np.max(np.maximum(0.0, -np.diff(qq) / qq[:-1]), initial=0.0))
    checks.append(PropertyCheck("power_law_monotone", bool(mono), 1.0 + worst))

    # (c) every cylinder sub-intrinsic at K = 1 up to quadrature/bisection residue
    worst_ratio = float(profile.ratio.max())
    checks.append(PropertyCheck("subintrinsic_all", worst_ratio <= 1.0 + 1e-6, worst_ratio))

    # (d) strict envelope gap implies an intrinsic stopping height in between:
    # r(s_i) < (s_i/s_j)^b_hat r(s_j) strictly <=> qq[i] < qq[j] strictly, and
    # once the smallest such j has a witness, every larger j shares it
    ok_d = True
    worst_d = 1.0
    intrinsic = profile.is_intrinsic
    for i in range(len(s)):
        gapped = np.nonzero(qq[i + 1:] / qq[i] > 1.0 + strict_margin)[0]
        if gapped.size == 0:
            continue
        j = i + 1 + int(gapped[0])
        if not intrinsic[i:j].any():
            ok_d = False
            worst_d = max(worst_d, float(qq[j] / qq[i]))
    checks.append(PropertyCheck("intrinsic_stopping_exists", ok_d, worst_d))

    # (e) scaling decay on strictly sub-intrinsic stretches: if no height in
    # [i, j) comes close to intrinsic, theta_i <= (s_i/s_j)^beta theta_j
    strict = profile.ratio < 1.0 - strict_margin
    worst_e = 1.0
    for i in range(len(s)):
        if not strict[i]:
            continue
        run_end = i
        while run_end + 1 < len(s) and strict[run_end]:
            run_end += 1
        for j in range(i + 1, run_end + 1):
            bound = (s[i] / s[j]) ** beta * theta[j]
            worst_e = max(worst_e, float(theta[i] / bound))
    checks.append(PropertyCheck("strict_subintrinsic_decay", worst_e <= 1.0 + 1e-6, worst_e))

    # (f) dilation bounds at grid-exact gamma values
    steps_per_factor = 1.0 / c.s_ratio_log2
    worst_f = 1.0
    for gamma in gamma_grid:
        k = int(round(-math.log2(gamma) * steps_per_factor))
        if k <= 0 or k >= len(s):
            continue
        g_exact = 2.0 ** (-k * c.s_ratio_log2)
        r_big, r_small = r[k:], r[:-k]
        worst_f = max(worst_f, float((r_big / (g_exact**-a_hat * r_small)).max()))
        vol_big = s[k:] * r_big**n
        vol_small = s[:-k] * r_small**n
        worst_f = max(worst_f, float((vol_big / (g_exact ** (-n * a_hat - 2) * vol_small)).max()))
        th_small, th_big = theta[:-k], theta[k:]
        bound = g_exact ** (-max(2 * a_hat, beta))
        worst_f = max(worst_f, float((th_small / (bound * th_big)).max()))
    checks.append(PropertyCheck("dilation_bounds", worst_f <= 4.0, worst_f,
                                detail="empirical constant of the gamma-dilation bounds"))

    # (g) nesting under joint dilation: Q_(cs, c r(s)) inside Q_(c~ s, r(c~ s))
    worst_g = 1.0
    ok_g = True
    for factor in (1.5, 2.0, 3.0):
        c_tilde = factor ** (1.0 / b_hat)
        for i in range(len(s)):
            target = c_tilde * s[i]
            j = profile.ceil_index(target)
            if j is None:
                continue
            if factor * r[i] > r[j] * (1 + 1e-12):
                ok_g = False
            worst_g = max(worst_g, factor * r[i] / r[j])
    checks.append(PropertyCheck("nesting_under_dilation", ok_g, worst_g))

    # the two dilation chains used downstream, with recorded constants
    worst_chain = 1.0
    for k in (4, 8, 16):
        if k >= len(s):
            continue
        g_exact = 2.0 ** (-k * c.s_ratio_log2)
        # r(gamma s) <= gamma^b_hat r(s) <= c gamma^(b_hat - a_hat) r(gamma s)
        worst_chain = max(worst_chain, float((r[:-k] / (g_exact**b_hat * r[k:])).max()))
        worst_chain = max(worst_chain, float(
            ((g_exact**b_hat * r[k:]) / (g_exact ** (b_hat - a_hat) * r[:-k])).max()))
        # theta_s <= gamma^(2 b_hat - 1) theta_(gamma s) <= gamma^(2(b_hat - a_hat)) theta_s
        worst_chain = max(worst_chain, float(
            (theta[k:] / (g_exact ** (2 * b_hat - 1) * theta[:-k])).max()))
        worst_chain = max(worst_chain, float(
            ((g_exact ** (2 * b_hat - 1) * theta[:-k]) / (g_exact ** (2 * (b_hat - a_hat)) * theta[k:])).max()))
    checks.append(PropertyCheck("dilation_chains", worst_chain <= 4.0, worst_chain))

    return checks


def radius_continuity_modulus(f: ScalarField, z, consts: GeometryConstants):
    """Empirical continuity surrogate for the raw radius: the largest jump
    between consecutive heights must not grow when the height grid is refined
    2x.  Returns (coarse modulus, fine modulus)."""
    rt_coarse = _tilde_r_many(f, z[0], z[1], consts.s_grid(), consts.R, consts)
    fine = GeometryConstants(params=consts.params, S=consts.S, R=consts.R,
                             b_hat=consts.b_hat, K=consts.K,
                             s_ratio_log2=consts.s_ratio_log2 / 2.0,
                             s_span_log2=consts.s_span_log2,
                             bisect_iters=consts.bisect_iters)
    rt_fine = _tilde_r_many(f, z[0], z[1], fine.s_grid(), consts.R, consts)
    coarse_mod = float(np.abs(np.diff(rt_coarse)).max())
    fine_mod = float(np.abs(np.diff(rt_fine)).max())
    return coarse_mod, fine_mod


# ---------------------------------------------------------------------------
# two-point comparisons (shared ambient cylinder)
# ---------------------------------------------------------------------------

def ambient_scaling_bounds(f: ScalarField, z, z0, consts: GeometryConstants):
    """Compare the per-point scaling at full height against the ambient one.

    The ambient cylinder (centered at z0, height 2S, radius 2R) is assumed
    sub-intrinsic with some K >= 1; returns a dict with theta_o = S/R^2, the
    per-point theta at full height, the ambient K, and the empirical constant
    in theta_o <= theta_(S,z) <= c K^(2p*a_check) theta_o.
    """
    p = consts.params.p
    x0, t0 = z0
    ambient = Cylinder.centered(x0, t0, 2.0 * consts.S, 2.0 * consts.R)
    mean_amb = cylinder_mean(f, ambient, exponent=1.0)
    theta_o = consts.S / consts.R**2
    K_amb = max(1.0, mean_amb ** ((2.0 - p) / p) / theta_o)
    rt_S = tilde_r(f, z, consts.S, consts.R, consts)
    theta_S = consts.S / rt_S**2
    c_emp = (theta_S / theta_o) / K_amb ** (2.0 * p * consts.a_check)
    return {"theta_o": theta_o, "theta_S_z": theta_S, "K_ambient": K_amb,
            "lower_ok": theta_S >= theta_o * (1 - 1e-12), "empirical_c": c_emp}


def two_point_engulfing(f: ScalarField, z, y, s: float,
                        consts: GeometryConstants,
                        profiles: dict | None = None):
    """If the height-s cylinders at z and y intersect, find the smallest
    grid multiple c1 such that each is contained in the other's height-(c1 s)
    cylinder.  Returns (c1, detail dict); c1 is inf if containment never
    happens below the height cap, None if the cylinders are disjoint.

    Cylinders follow the centered convention: (t - s, t + s) x B_r(s).
    """
    if profiles is None:
        profiles = {}
    for point, tag in ((z, "z"), (y, "y")):
        key = (tuple(np.atleast_1d(point[0]).astype(float)), float(point[1]))
        if key not in profiles:
            profiles[key] = build_profile(f, point, consts)
    pz = profiles[(tuple(np.atleast_1d(z[0]).astype(float)), float(z[1]))]
    py = profiles[(tuple(np.atleast_1d(y[0]).astype(float)), float(y[1]))]
    if pz is None or py is None:
        raise ProfileMissing("profiles for both base points are required")
    i = pz.ceil_index(s)
    j = py.ceil_index(s)
    if i is None or j is None:
        raise ValueError(f"height {s} above the profile cap {consts.S}")
    Qz = pz.cylinder(i, TimeConvention.CENTERED_2TAU)
    Qy = py.cylinder(j, TimeConvention.CENTERED_2TAU)
    if not Qz.intersects(Qy):
        return None, {"intersect": False}

    def minimal_factor(inner_prof, inner_idx, outer_prof):
        Q_in = inner_prof.cylinder(inner_idx, TimeConvention.CENTERED_2TAU)
        base_s = inner_prof.s[inner_idx]
        for k in range(outer_prof.ceil_index(base_s) or 0, len(outer_prof.s)):
            Q_out = outer_prof.cylinder(k, TimeConvention.CENTERED_2TAU)
            if Q_out.contains_cylinder(Q_in):
                return outer_prof.s[k] / base_s
        return math.inf

    c_zy = minimal_factor(pz, i, py)   # Q(s,z) inside Q(c1 s, y)
    c_yz = minimal_factor(py, j, pz)
    c1 = max(c_zy, c_yz)
    return c1, {"intersect": True, "c_zy": c_zy, "c_yz": c_yz,
                "s_z": pz.s[i], "s_y": py.s[j]}
