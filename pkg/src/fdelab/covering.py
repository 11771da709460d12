"""Level-set coverings of the gradient energy by solution-adapted cylinders.

Pipeline: rescale a sub-intrinsic run to the unit cylinder, build a family of
adapted cylinders over a base-point lattice, form the intrinsic maximal
function of F = |D(u^m)|^2, and for each level lambda construct the
stopping-time covering with its case analysis (degenerate / non-degenerate /
never-intrinsic) and Vitali selection.  Everything is verified nodewise; all
constants are recorded, never assumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .estimates import NotSubIntrinsic, regime_classify, RegimeLabel
from .geometry import GeometryConstants, ScalingProfile, build_profile
from .grid import (
    Cylinder,
    ModelParams,
    ScalarField,
    SpaceTimeGrid,
    cylinder_mean,
    grad_energy_field,
)


class BadRange(Exception):
    """Guard-threshold window outside [1/2, 1]."""


class DilationEscapesDomain(Exception):
    """A stopping triple left the target cube: the level was at or below the
    guard threshold."""


class NotInLevelSet(Exception):
    pass


class CaseLabel(Enum):
    CASE1_DEG_INTRINSIC = 1
    CASE2_NONDEG_INTRINSIC = 2
    CASE3_NEVER_INTRINSIC = 3


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------

@dataclass
class RescaledSetup:
    """A solution transported to the unit cylinder: grid over [-2,2]^n x
    (-2,2), scaled solution and right-hand side, gradient energy F (cut off
    outside the unit-scale cylinder), and the scaling bookkeeping."""

    grid: SpaceTimeGrid
    u: ScalarField
    f: ScalarField | None
    F: ScalarField
    params: ModelParams
    lambda_o: float
    theta_o: float
    R: float
    mean_f_sq: float
    mean_u_power: float

    @property
    def unit_cylinder(self) -> Cylinder:
        return Cylinder.centered(np.zeros(self.grid.n), 0.0, 2.0, 2.0)


def rescale_to_unit(u: ScalarField, f, z0, R: float, theta_o: float,
                    params: ModelParams, shape, nt,
                    sub_intrinsic_cap: float = 1.5) -> RescaledSetup:
    """Map the cylinder of height 2*theta_o*R^2 and radius 2R at z0 onto the
    unit cylinder: u_tilde(y,s) = lambda_o u(x0 + R y, t0 + theta_o R^2 s)
    with lambda_o = theta_o^(1/(m-1)), f scaled accordingly, both resampled
    by linear interpolation.  Requires the source cylinder sub-intrinsic."""
    m = params.m
    x0, t0 = z0
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    ambient = Cylinder.centered(x0, t0, 2.0 * theta_o * R**2, 2.0 * R)
    if not ambient.is_admissible(u.grid):
        raise ValueError("source cylinder leaves the computed domain")
    size = cylinder_mean(u, ambient, exponent=m + 1.0) ** ((1.0 - m) / (m + 1.0))
    if size > sub_intrinsic_cap * theta_o:
        raise NotSubIntrinsic(
            f"(mean u^(m+1))^((1-m)/(m+1)) = {size:.4g} > cap*theta_o = "
            f"{sub_intrinsic_cap * theta_o:.4g}")
    lambda_o = theta_o ** (1.0 / (m - 1.0))

    unit = SpaceTimeGrid(box=[(-2.0, 2.0)] * u.grid.n, t_range=(-2.0, 2.0),
                         shape=shape, nt=nt)
    src_pts = (u.grid.times,) + tuple(u.grid.axes)
    interp_u = RegularGridInterpolator(src_pts, u.values, method="linear",
                                       bounds_error=True)
    tgt_x = [x0[i] + R * unit.coords[i] for i in range(unit.n)]
    vals = np.empty((unit.nt,) + unit.shape)
    for k, s in enumerate(unit.times):
        t_src = t0 + theta_o * R**2 * s
        pts = np.stack([np.full(unit.shape, t_src)] + tgt_x, axis=-1)
        vals[k] = interp_u(pts)
    u_tilde = ScalarField(unit, np.maximum(lambda_o * vals, 0.0), nonneg=True,
                          name="u_rescaled")
    f_tilde = None
    if f is not None:
        interp_f = RegularGridInterpolator(src_pts, f.values, method="linear",
                                           bounds_error=True)
        fvals = np.empty((unit.nt,) + unit.shape)
        for k, s in enumerate(unit.times):
            t_src = t0 + theta_o * R**2 * s
            pts = np.stack([np.full(unit.shape, t_src)] + tgt_x, axis=-1)
            fvals[k] = interp_f(pts)
        f_tilde = ScalarField(unit, lambda_o**m * R**2 * fvals, name="f_rescaled")

    F = grad_energy_field(u_tilde, m)
    chi = (unit.spatial_distance(np.zeros(unit.n)) <= 2.0).astype(float)
    F = ScalarField(unit, F.values * chi, nonneg=True, name="grad_energy_unit")
    Q22 = Cylinder.centered(np.zeros(unit.n), 0.0, 2.0, 2.0)
    mean_f_sq = cylinder_mean(f_tilde, Q22, exponent=2.0) if f_tilde is not None else 0.0
    mean_u_power = cylinder_mean(u_tilde, Q22, exponent=m + 1.0)
    return RescaledSetup(grid=unit, u=u_tilde, f=f_tilde, F=F, params=params,
                         lambda_o=lambda_o, theta_o=theta_o, R=R,
                         mean_f_sq=mean_f_sq, mean_u_power=mean_u_power)


# ---------------------------------------------------------------------------
# adapted cylinder family over a base-point lattice
# ---------------------------------------------------------------------------

class CylinderFamily:
    """Adapted cylinders Q(s, y) = (t_y - s, t_y + s) x B_(r(s,y)) for base
    points y on a lattice of the unit-scale core and heights on the geometric
    grid.  Membership and means are exact node counts, which is what makes
    the brute-force oracles and stopping rules match bit for bit."""

    def __init__(self, mass: ScalarField, consts: GeometryConstants,
                 lattice_stride: int = 4, core_half: float = 1.0):
        grid = mass.grid
        self.grid = grid
        self.consts = consts
        self.core_half = core_half
        self.s_grid = consts.s_grid()
        sp_idx = [np.nonzero(np.abs(ax) <= core_half + 1e-12)[0][::lattice_stride]
                  for ax in grid.axes]
        t_idx = np.nonzero(np.abs(grid.times) <= core_half + 1e-12)[0][::lattice_stride]
        self.base_space = list(np.stack(np.meshgrid(*sp_idx, indexing="ij"))
                               .reshape(grid.n, -1).T)
        self.base_time = list(t_idx)
        self.profiles: list[ScalingProfile] = []
        self.base_points = []
        for ti in self.base_time:
            for sp in self.base_space:
                x = np.array([grid.axes[ax][sp[ax]] for ax in range(grid.n)])
                t = float(grid.times[ti])
                self.base_points.append((x, t, tuple(int(v) for v in sp), int(ti)))
        # one profile per spatial base point is not enough: radii depend on the
        # full space-time base point, so build one per (x, t)
        for (x, t, _, _) in self.base_points:
            self.profiles.append(build_profile(mass, (x, t), consts))
        self.radii = np.stack([p.r for p in self.profiles])          # (nb, ns)
        self.theta = np.stack([p.theta for p in self.profiles])
        self.intrinsic = np.stack([p.is_intrinsic for p in self.profiles])
        self.n_base = len(self.base_points)
        self.n_s = len(self.s_grid)

    def cylinder(self, bi: int, sj: int) -> Cylinder:
        x, t, _, _ = self.base_points[bi]
        return Cylinder.centered(x, t, self.s_grid[sj], self.radii[bi, sj])

    def ceil_s_index(self, s: float):
        j = int(np.searchsorted(self.s_grid, s * (1 - 1e-12), side="left"))
        return j if j < self.n_s else None

    def min_height_reaching_core(self, bi: int, a: float):
        """Smallest height index whose cylinder at base ``bi`` contains at
        least one grid node of the (a,a)-core cube; None if it never does.

        Containment splits over time and space, so the minimum over node
        pairs of max(time index, radius index) is the max of the two
        coordinate-wise minima.
        """
        g = self.grid
        x, t, _, _ = self.base_points[bi]
        t_core = g.times[np.abs(g.times) < a]
        d = g.spatial_distance(x)
        core_sp = g.spatial_distance(np.zeros(g.n)) <= a
        if t_core.size == 0 or not core_sp.any():
            return None
        dt_min = float(np.abs(t_core - t).min())
        d_min = float(d[core_sp].min())
        j_t = int(np.searchsorted(self.s_grid, dt_min, side="right"))
        j_r = int(np.searchsorted(self.radii[bi], d_min, side="left"))
        j = max(j_t, j_r)
        return j if j < self.n_s else None

    def node_counts(self, bi: int, sj: int):
        g = self.grid
        x, t, _, _ = self.base_points[bi]
        s, r = self.s_grid[sj], self.radii[bi, sj]
        nt = int(((g.times > t - s) & (g.times < t + s)).sum())
        nsp = int((g.spatial_distance(x) <= r).sum())
        return nt, nsp

    def node_mask(self, bi: int, sj: int) -> np.ndarray:
        g = self.grid
        x, t, _, _ = self.base_points[bi]
        s, r = self.s_grid[sj], self.radii[bi, sj]
        tmask = (g.times > t - s) & (g.times < t + s)
        bmask = g.spatial_distance(x) <= r
        return tmask.reshape((-1,) + (1,) * g.n) & bmask[None]

    def means(self, field: ScalarField) -> np.ndarray:
        """Node-count means of ``field`` over every family cylinder,
        shape (n_base, n_s); NaN where the cylinder holds no node."""
        g = self.grid
        flat = field.values.reshape(g.nt, -1)
        ct = np.concatenate([np.zeros((1, flat.shape[1])), np.cumsum(flat, axis=0)])
        out = np.full((self.n_base, self.n_s), np.nan)
        order_cache = {}
        for bi, (x, t, sp, ti) in enumerate(self.base_points):
            k_lo = np.searchsorted(g.times, t - self.s_grid, side="right")
            k_hi = np.searchsorted(g.times, t + self.s_grid, side="left")
            counts_t = k_hi - k_lo
            key = sp
            if key not in order_cache:
                d = g.spatial_distance(x).ravel()
                order = np.argsort(d, kind="stable")
                order_cache[key] = (order, d[order])
            order, d_sorted = order_cache[key]
            W = ct[k_hi] - ct[k_lo]                      # (ns, n_spatial)
            Wp = np.concatenate([np.zeros((self.n_s, 1)),
                                 np.cumsum(W[:, order], axis=1)], axis=1)
            i_ball = np.searchsorted(d_sorted, self.radii[bi], side="right")
            sums = Wp[np.arange(self.n_s), i_ball]
            counts = counts_t * i_ball
            with np.errstate(invalid="ignore", divide="ignore"):
                out[bi] = np.where(counts > 0, sums / counts, np.nan)
        return out

    def maximal(self, field: ScalarField, means: np.ndarray | None = None,
                entry_mask: np.ndarray | None = None) -> ScalarField:
        """Intrinsic maximal function over the family: at every grid node the
        max of the family means over cylinders containing that node.  An
        optional (n_base, n_s) mask restricts the family."""
        g = self.grid
        if means is None:
            means = self.means(field)
        M = np.zeros((g.nt,) + g.shape)
        M_flat = M.reshape(g.nt, -1)
        for bi, (x, t, sp, ti) in enumerate(self.base_points):
            mvals = means[bi]
            valid = ~np.isnan(mvals)
            if entry_mask is not None:
                valid = valid & entry_mask[bi]
            if not valid.any():
                continue
            suff = np.full(self.n_s + 1, -np.inf)
            vals = np.where(valid, mvals, -np.inf)
            suff[:-1] = np.maximum.accumulate(vals[::-1])[::-1]
            dt_nodes = np.abs(g.times - t)
            # smallest s index whose window contains the slice: s > |dt|
            idx_t = np.searchsorted(self.s_grid, dt_nodes, side="right")
            d = g.spatial_distance(x).ravel()
            idx_r = np.searchsorted(self.radii[bi], d, side="left")
            idx = np.maximum(idx_t[:, None], idx_r[None, :])
            contrib = suff[idx]
            np.maximum(M_flat, contrib, out=M_flat)
        return ScalarField(g, M, name=f"maximal({field.name})")


def intrinsic_maximal(F: ScalarField, family: CylinderFamily,
                      means: np.ndarray | None = None) -> ScalarField:
    return family.maximal(F, means)


# ---------------------------------------------------------------------------
# box maximal function
# ---------------------------------------------------------------------------

def box_maximal(g_field: ScalarField, dyadic: bool = True) -> ScalarField:
    """Maximal function over node-centered interval x ball windows.

    Dyadic mode halves the time half-width and the radius level by level
    (an under-approximation of the full window family; enlarging a window by
    one dyadic level oversamples the mean by at most 2^(n+1)).  Exhaustive
    mode enumerates every contiguous slice window and every occupied radius
    and is meant for small oracle grids only.
    """
    g = g_field.grid
    if not dyadic:
        return _box_maximal_exhaustive(g_field)
    vals = np.abs(g_field.values).reshape(g.nt, -1)
    ct = np.concatenate([np.zeros((1, vals.shape[1])), np.cumsum(vals, axis=0)])
    out = np.zeros_like(vals)
    t_half_max = 0.5 * (g.t_range[1] - g.t_range[0])
    r_max = 0.5 * min(b - a for a, b in g.box)
    tau = t_half_max
    while True:
        eps = 1e-12 * max(1.0, tau)
        k_lo = np.maximum(np.searchsorted(g.times, g.times - tau - eps, side="left"), 0)
        k_hi = np.minimum(np.searchsorted(g.times, g.times + tau + eps, side="right"), g.nt)
        counts = (k_hi - k_lo).astype(float)
        slab = (ct[k_hi] - ct[k_lo]) / counts[:, None]   # time-window mean per node
        rho = r_max
        while True:
            ball_mean = _ball_mean_all_centers(g, slab, rho)
            np.maximum(out, ball_mean, out=out)
            if rho / 2.0 < g.h:
                break
            rho /= 2.0
        if tau / 2.0 < g.dt:
            break
        tau /= 2.0
    return ScalarField(g, out.reshape((g.nt,) + g.shape),
                       name=f"box_maximal({g_field.name})")


def _ball_mean_all_centers(g: SpaceTimeGrid, slab: np.ndarray, rho: float) -> np.ndarray:
    """Mean of slab values over the ball of radius rho centered at every node
    (ball clipped to the box), via convolution with a disc stencil."""
    from scipy.ndimage import convolve

    reach = int(math.floor(rho / g.h + 1e-9))
    grids = np.meshgrid(*([np.arange(-reach, reach + 1)] * g.n), indexing="ij")
    stencil = (sum(gr.astype(float) ** 2 for gr in grids) <= (rho / g.h + 1e-9) ** 2
               ).astype(float)
    ones = np.ones(g.shape)
    norm = convolve(ones, stencil, mode="constant", cval=0.0)
    out = np.empty_like(slab)
    for k in range(slab.shape[0]):
        sl = slab[k].reshape(g.shape)
        out[k] = (convolve(sl, stencil, mode="constant", cval=0.0) / norm).ravel()
    return out


def _box_maximal_exhaustive(g_field: ScalarField) -> ScalarField:
    """All contiguous slice windows x all occupied ball radii at all centers.
    O(large); intended for grids of a few thousand nodes."""
    g = g_field.grid
    vals = np.abs(g_field.values).reshape(g.nt, -1)
    ct = np.concatenate([np.zeros((1, vals.shape[1])), np.cumsum(vals, axis=0)])
    n_sp = vals.shape[1]
    out = np.zeros((g.nt, n_sp))
    coords_flat = g.coords.reshape(g.n, -1)
    for ci in range(n_sp):
        center = coords_flat[:, ci]
        d = np.sqrt(((coords_flat - center[:, None]) ** 2).sum(axis=0))
        order = np.argsort(d, kind="stable")
        d_sorted = d[order]
        # real balls end at distance-tie-group boundaries; a node belongs to
        # every ball whose group end is at or beyond its own group's end
        ends = np.nonzero(np.diff(d_sorted, append=np.inf) > 1e-13)[0]
        group_of = np.searchsorted(ends, np.arange(n_sp), side="left")
        for k1 in range(g.nt):
            for k2 in range(k1 + 1, g.nt + 1):
                W = (ct[k2] - ct[k1])[order]
                csum = np.cumsum(W)
                means = csum[ends] / ((k2 - k1) * (ends + 1.0))
                best = np.maximum.accumulate(means[::-1])[::-1]
                out[k1:k2, order] = np.maximum(out[k1:k2, order],
                                               best[group_of][None, :])
    return ScalarField(g, out.reshape((g.nt,) + g.shape),
                       name=f"box_maximal_exhaustive({g_field.name})")


# ---------------------------------------------------------------------------
# covering configuration
# ---------------------------------------------------------------------------

@dataclass
class CoveringConfig:
    """Measured and chosen constants of the level-set covering.

    ``gamma_1`` is the measured homogeneous-energy constant (K = 1);
    ``c_1`` the measured engulfing constant; ``delta_tilde`` the smallness
    parameter; ``c_mu`` the guard-threshold prefactor.  ``c_o`` and ``c_2``
    are derived so that gamma_1 (2/c_o)^((m+1)/(1-m) beta - 1) = delta_tilde
    and c_2 = 2 c_1 3^(1/b_hat) c_o.
    """

    epsilon: float = 0.1
    delta_tilde: float = 0.25
    gamma_1: float = 2.0
    c_1: float = 3.0
    c_mu: float = 1.0
    K: float = 4.0
    vartheta: float = 0.75
    lattice_stride: int = 4

    def __post_init__(self):
        if not (0.0 < self.delta_tilde < 0.5):
            raise ValueError("delta_tilde must lie in (0, 1/2)")
        if self.gamma_1 <= 0 or self.c_1 <= 1:
            raise ValueError("need gamma_1 > 0 and c_1 > 1")

    def derived(self, consts: GeometryConstants) -> dict:
        m = consts.params.m
        decay = (m + 1.0) / (1.0 - m) * consts.beta - 1.0
        if decay <= 0:
            raise ValueError("scaling-decay exponent must be positive; "
                             "pick b_hat admissible for the covering")
        c_o = 2.0 * (self.gamma_1 / self.delta_tilde) ** (1.0 / decay)
        tilde3 = 3.0 ** (1.0 / consts.b_hat)
        c_2 = 2.0 * self.c_1 * tilde3 * c_o
        return {"c_o": max(c_o, 2.0 + 1e-9), "c_2": c_2, "tilde3": tilde3,
                "decay_exponent": decay}

    def refine_delta(self, c3: float, c4: float) -> "CoveringConfig":
        """Tighten delta_tilde to min(1/(2 c3), 1/(2 c4)) from measured
        absorption constants."""
        new_delta = min(0.5 * (1.0 / c3 if c3 > 0 else math.inf),
                        0.5 * (1.0 / c4 if c4 > 0 else math.inf),
                        self.delta_tilde)
        return CoveringConfig(epsilon=self.epsilon, delta_tilde=new_delta,
                              gamma_1=self.gamma_1, c_1=self.c_1, c_mu=self.c_mu,
                              K=self.K, vartheta=self.vartheta,
                              lattice_stride=self.lattice_stride)


def mu_threshold(a: float, b: float, setup: RescaledSetup,
                 config: CoveringConfig, consts: GeometryConstants) -> float:
    """Guard level: above it, no stopping triple can reach outside the
    (b,b)-cube.  mu = C(f, delta) / |b-a|^tau with
    tau = max(a_hat, 1) n + 1/b_hat."""
    if not (0.5 <= a < b <= 1.0):
        raise BadRange(f"need 1/2 <= a < b <= 1, got a={a}, b={b}")
    m = setup.params.m
    tau = max(consts.a_hat, 1.0) * setup.params.n + 1.0 / consts.b_hat
    C = config.c_mu * (setup.mean_f_sq
                       + setup.mean_u_power ** (2.0 * m / (m + 1.0)))
    return C / abs(b - a) ** tau


class _TriplePlanner:
    """Shared case analysis: given a hypothetical witness height, find the
    first intrinsic height in the scan window, classify the regime there, and
    produce the snapped star / double-star height indices.

    Heights live on an exact geometric grid, so dilation factors become index
    offsets; the sigma scan is a precomputed next-intrinsic table.  Regime
    classifications (the only expensive part) are cached per (base, sigma)
    and, for escape tests, are consulted only when the degenerate and
    non-degenerate dilations would disagree about escaping.
    """

    def __init__(self, family: CylinderFamily, setup: RescaledSetup,
                 config: CoveringConfig):
        self.family = family
        self.setup = setup
        self.config = config
        self.derived = config.derived(family.consts)
        self._regime_cache: dict = {}
        ns = family.n_s
        nxt = np.full((family.n_base, ns + 1), ns, dtype=int)
        for j in range(ns - 1, -1, -1):
            nxt[:, j] = np.where(family.intrinsic[:, j], j, nxt[:, j + 1])
        self._next_intrinsic = nxt
        self._steps = 1.0 / family.consts.s_ratio_log2

    def offset(self, factor: float) -> int:
        """Index offset realizing ceil-snapping of height * factor."""
        return max(int(math.ceil(self._steps * math.log2(factor) - 1e-9)), 0)

    def sigma_index(self, bi: int, sj: int):
        j_lo = sj + self.offset(2.0)
        j_hi = sj + int(math.floor(self._steps * math.log2(self.derived["c_o"])
                                   + 1e-9))
        if j_lo >= self.family.n_s:
            return None
        j = int(self._next_intrinsic[bi, j_lo])
        return j if j <= min(j_hi, self.family.n_s - 1) else None

    def regime_at(self, bi: int, j: int):
        key = (bi, j)
        if key not in self._regime_cache:
            Q = self.family.cylinder(bi, j)
            self._regime_cache[key] = regime_classify(
                self.setup.u, Q, float(self.family.theta[bi, j]),
                self.config.epsilon, self.setup.params.m)
        return self._regime_cache[key]

    def plan(self, bi: int, sj: int):
        """(case, sigma_idx, star_idx, star2_idx, regime) with star2_idx None
        when the required height overflows the family cap."""
        family = self.family
        sigma_idx = self.sigma_index(bi, sj)
        off_2c1 = self.offset(2.0 * self.config.c_1)
        if sigma_idx is not None:
            regime = self.regime_at(bi, sigma_idx)
            if regime.label is RegimeLabel.DEGENERATE_REGIME:
                case = CaseLabel.CASE1_DEG_INTRINSIC
                star = sigma_idx + self.offset(self.derived["tilde3"])
                star2 = star + off_2c1
            else:
                case = CaseLabel.CASE2_NONDEG_INTRINSIC
                star = sigma_idx
                star2 = sigma_idx + off_2c1
            ns = family.n_s
            star = star if star < ns else None
            star2 = star2 if (star is not None and star2 < ns) else None
            return case, sigma_idx, star, star2, regime
        base_j = sj + self.offset(2.0)
        ns = family.n_s
        if base_j >= ns:
            return CaseLabel.CASE3_NEVER_INTRINSIC, None, None, None, None
        star2 = base_j + off_2c1
        return (CaseLabel.CASE3_NEVER_INTRINSIC, None, base_j,
                star2 if star2 < ns else None, None)

    def fits(self, bi: int, j: int | None, b_cube: float) -> bool:
        """Does the family cylinder (bi, j) sit inside the (b,b)-cube?"""
        if j is None:
            return False
        x, t, _, _ = self.family.base_points[bi]
        s = self.family.s_grid[j]
        r = self.family.radii[bi, j]
        eps = 1e-12
        return (abs(t) + s <= b_cube + eps
                and float(np.linalg.norm(x)) + r <= b_cube + eps)

    def escapes(self, bi: int, sj: int, b_cube: float) -> bool:
        """Would the realized double-star leave the (b,b)-cube?  Avoids the
        regime call whenever both case variants agree."""
        sigma_idx = self.sigma_index(bi, sj)
        off_2c1 = self.offset(2.0 * self.config.c_1)
        ns = self.family.n_s
        if sigma_idx is None:
            base_j = sj + self.offset(2.0)
            star2 = base_j + off_2c1
            return star2 >= ns or not self.fits(bi, star2, b_cube)
        star2_nondeg = sigma_idx + off_2c1
        star2_deg = sigma_idx + self.offset(self.derived["tilde3"]) + off_2c1
        esc_nondeg = star2_nondeg >= ns or not self.fits(bi, star2_nondeg, b_cube)
        esc_deg = star2_deg >= ns or not self.fits(bi, star2_deg, b_cube)
        if esc_nondeg == esc_deg:
            return esc_nondeg
        regime = self.regime_at(bi, sigma_idx)
        return esc_deg if regime.label is RegimeLabel.DEGENERATE_REGIME else esc_nondeg

    def fit_table(self, b_cube: float) -> np.ndarray:
        """(n_base, n_s) boolean: realized double-star stays in the cube."""
        key = ("fit", b_cube)
        if not hasattr(self, "_fit_cache"):
            self._fit_cache = {}
        if key not in self._fit_cache:
            out = np.zeros((self.family.n_base, self.family.n_s), dtype=bool)
            for bi in range(self.family.n_base):
                for sj in range(self.family.n_s):
                    out[bi, sj] = not self.escapes(bi, sj, b_cube)
            self._fit_cache[key] = out
        return self._fit_cache[key]


def calibrate_c_mu(setup: RescaledSetup, family: CylinderFamily,
                   means_F: np.ndarray, config: CoveringConfig,
                   a: float, b: float, safety: float = 1.02,
                   planner: "_TriplePlanner | None" = None,
                   maximal_F: ScalarField | None = None) -> float:
    """Measure the guard prefactor from the cursed-node threshold.

    A core node is cursed at level lambda when its maximal value exceeds
    lambda but no family cylinder through it with mean above lambda has a
    realizable (in-cube) stopping triple.  The guard must sit above the
    largest maximal value of a cursed node; c_mu is backed out of the guard
    formula so that mu = safety * that threshold.  The paper-side constant is
    qualitative, so it is measured, like the energy constant.
    """
    if not (0.5 <= a < b <= 1.0):
        raise BadRange(f"need 1/2 <= a < b <= 1, got a={a}, b={b}")
    consts = family.consts
    planner = planner or _TriplePlanner(family, setup, config)
    grid = setup.grid
    if maximal_F is None:
        maximal_F = family.maximal(setup.F, means_F)
    fit = planner.fit_table(b)
    maximal_fit = family.maximal(setup.F, means_F, entry_mask=fit)
    core = _node_mask(grid, Cylinder.centered(np.zeros(grid.n), 0.0, a, a))
    M = maximal_F.values[core]
    Mfit = maximal_fit.values[core]
    cursed = Mfit < M * (1.0 - 1e-9)
    threshold = float(M[cursed].max()) if cursed.any() else 0.0
    m = setup.params.m
    tau = max(consts.a_hat, 1.0) * setup.params.n + 1.0 / consts.b_hat
    denom = setup.mean_f_sq + setup.mean_u_power ** (2.0 * m / (m + 1.0))
    if denom <= 0:
        return config.c_mu
    return max(safety * threshold * abs(b - a) ** tau / denom, 1e-12)


def measure_engulfing_constant(family: CylinderFamily, n_pairs: int = 200,
                               seed: int = 0, safety: float = 1.05,
                               s_range: tuple = (2.0**-6, 0.5)) -> float:
    """Empirical two-point engulfing constant of the family: for sampled
    intersecting same-height pairs, the smallest height multiple at which each
    cylinder swallows the other, maximized over the sample.

    Heights are sampled from ``s_range`` (relative to the cap), the band where
    the Vitali selection actually works; far below it the base-point lattice
    spacing dominates the radii and the constant degenerates.
    """
    rng = np.random.default_rng(seed)
    s_lo, s_hi = s_range[0] * family.consts.S, s_range[1] * family.consts.S
    j_candidates = np.nonzero((family.s_grid >= s_lo) & (family.s_grid <= s_hi))[0]
    if j_candidates.size == 0:
        j_candidates = np.arange(family.n_s)
    worst = 1.0
    tried = 0
    attempts = 0
    while tried < n_pairs and attempts < 50 * n_pairs:
        attempts += 1
        b1, b2 = rng.integers(0, family.n_base, size=2)
        if b1 == b2:
            continue
        sj = int(rng.choice(j_candidates))
        Q1 = family.cylinder(int(b1), sj)
        Q2 = family.cylinder(int(b2), sj)
        if not Q1.intersects(Q2):
            continue
        tried += 1
        factor = math.inf
        for k in range(sj, family.n_s):
            if (family.cylinder(int(b2), k).contains_cylinder(Q1)
                    and family.cylinder(int(b1), k).contains_cylinder(Q2)):
                factor = family.s_grid[k] / family.s_grid[sj]
                break
        if math.isfinite(factor):
            worst = max(worst, factor)
    return max(worst * safety, 1.0 + 1e-6)


def geometric_levels(lo: float, hi: float, count: int,
                     margin: float = 1.01) -> np.ndarray:
    """Geometric ladder of levels strictly inside (lo, hi)."""
    lo_eff, hi_eff = lo * margin, hi / margin
    if hi_eff <= lo_eff or count < 1:
        return np.array([])
    return np.geomspace(lo_eff, hi_eff, count)


# ---------------------------------------------------------------------------
# stopping cylinders
# ---------------------------------------------------------------------------

@dataclass
class StoppingCylinder:
    base_index: int
    s_index: int
    base_point: tuple          # (x array, t)
    s_value: float
    mean_value: float
    case: CaseLabel | None = None
    sigma_index: int | None = None
    core: Cylinder | None = None
    star: Cylinder | None = None
    star2: Cylinder | None = None
    star_s_index: int | None = None
    star2_s_index: int | None = None
    means: dict = dc_field(default_factory=dict)
    diagnostics: dict = dc_field(default_factory=dict)


def _containment_matrix_mark(family: CylinderFamily, container_list, cand_b, cand_s):
    """Boolean: candidate (cand_b[i], cand_s[i]) contained in ANY container."""
    out = np.zeros(len(cand_b), dtype=bool)
    for (bj, sj) in container_list:
        Qc = family.cylinder(bj, sj)
        xc = np.asarray(Qc.center_x)
        for i in range(len(cand_b)):
            if out[i]:
                continue
            bi, si = cand_b[i], cand_s[i]
            if bi == bj and si == sj:
                continue
            Qi = family.cylinder(bi, si)
            if Qc.contains_cylinder(Qi):
                out[i] = True
    return out


def stopping_cylinder(family: CylinderFamily, means: np.ndarray, z, lam: float):
    """Largest family cylinder through z whose mean exceeds lam while every
    strictly containing family cylinder stays at or below 2 lam.

    ``z`` is a space-time point (x, t).  Ties prefer larger height, then the
    lexicographically smaller base point.  Raises NotInLevelSet when no
    family cylinder through z exceeds lam.
    """
    x, t = np.atleast_1d(np.asarray(z[0], dtype=float)), float(z[1])
    candidates = []
    for bi, (xb, tb, _, _) in enumerate(family.base_points):
        dt = abs(t - tb)
        d = float(np.linalg.norm(x - xb))
        for sj in range(family.n_s):
            if np.isnan(means[bi, sj]) or means[bi, sj] <= lam:
                continue
            if dt < family.s_grid[sj] and d <= family.radii[bi, sj]:
                candidates.append((bi, sj))
    if not candidates:
        raise NotInLevelSet(f"no family cylinder through z exceeds {lam}")
    key = lambda c: (-family.s_grid[c[1]],
                     family.base_points[c[0]][1],
                     tuple(family.base_points[c[0]][0]))
    violators = [(bi, sj) for bi in range(family.n_base) for sj in range(family.n_s)
                 if not np.isnan(means[bi, sj]) and means[bi, sj] > 2.0 * lam]
    for bi, sj in sorted(candidates, key=key):
        contained = _containment_matrix_mark(family, violators, [bi], [sj])[0]
        if not contained:
            xb, tb, _, _ = family.base_points[bi]
            return StoppingCylinder(bi, sj, (xb, tb), float(family.s_grid[sj]),
                                    float(means[bi, sj]))
    raise NotInLevelSet("every admissible cylinder has an over-threshold ancestor")


# ---------------------------------------------------------------------------
# case analysis and covering
# ---------------------------------------------------------------------------

def classify_and_dilate(family: CylinderFamily, witness: StoppingCylinder,
                        setup: RescaledSetup, config: CoveringConfig,
                        means_F: np.ndarray, b_cube: float,
                        mstar_f2: ScalarField | None, lam: float,
                        planner: "_TriplePlanner | None" = None) -> StoppingCylinder:
    """Complete a stopping witness into its (core, star, double-star) triple
    following the three-case table, verifying the dilations stay inside the
    (b,b)-cube."""
    planner = planner or _TriplePlanner(family, setup, config)
    derived = planner.derived
    tilde3, c_1 = derived["tilde3"], config.c_1
    bi, sj = witness.base_index, witness.s_index
    s_z = witness.s_value
    x, t = witness.base_point
    m = setup.params.m

    case, sigma_idx, star_j, star2_j, regime = planner.plan(bi, sj)
    if star_j is None or star2_j is None:
        raise DilationEscapesDomain(
            f"required height exceeds the family cap (level {lam:.4g} too "
            f"close to the guard threshold)")
    witness.case = case
    witness.sigma_index = sigma_idx
    if case is CaseLabel.CASE1_DEG_INTRINSIC:
        sigma = float(family.s_grid[sigma_idx])
        witness.core = family.cylinder(bi, sigma_idx)
        witness.diagnostics["dilation_within_c2"] = bool(
            2.0 * c_1 * tilde3 * sigma <= derived["c_2"] * s_z * (1 + 1e-9))
        witness.diagnostics["oscillation_ratio"] = regime.oscillation_ratio
    elif case is CaseLabel.CASE2_NONDEG_INTRINSIC:
        sigma = float(family.s_grid[sigma_idx])
        witness.core = family.cylinder(bi, sigma_idx).scaled(0.5, 1.0)
        witness.diagnostics["dilation_within_c2"] = bool(
            2.0 * c_1 * sigma <= derived["c_2"] * s_z * (1 + 1e-9))
        witness.diagnostics["oscillation_ratio"] = regime.oscillation_ratio
    else:
        witness.core = family.cylinder(bi, star_j).scaled(0.5, 1.0)
        witness.diagnostics["dilation_within_c2"] = bool(
            4.0 * c_1 * s_z <= derived["c_2"] * s_z * (1 + 1e-9))

    witness.star_s_index = star_j
    witness.star2_s_index = star2_j
    witness.star = family.cylinder(bi, star_j)
    witness.star2 = family.cylinder(bi, star2_j)

    target = Cylinder.centered(np.zeros(setup.grid.n), 0.0, b_cube, b_cube)
    if not target.contains_cylinder(witness.star2):
        raise DilationEscapesDomain(
            f"double-star cylinder leaves the ({b_cube},{b_cube}) cube at level {lam:.4g}")

    witness.means = {
        "core": _mask_mean(setup.F, witness.core),
        "star": float(means_F[bi, star_j]),
        "star2": float(means_F[bi, star2_j]),
    }
    n = setup.grid.n
    witness.diagnostics["volume_ratio_star2_over_core"] = (
        witness.star2.volume(n) / witness.core.volume(n))
    witness.diagnostics["lambda_over_core_mean"] = (
        lam / witness.means["core"] if witness.means["core"] > 0 else math.inf)

    if witness.case is CaseLabel.CASE3_NEVER_INTRINSIC:
        theta_2s = float(family.theta[bi, star_j])
        lhs = config.gamma_1 * theta_2s ** ((m + 1.0) / (1.0 - m)) / (2.0 * s_z)
        mstar_val = 0.0
        if mstar_f2 is not None:
            ti = setup.grid.nearest_time_index(t)
            si = tuple(int(np.argmin(np.abs(setup.grid.axes[ax] - x[ax])))
                       for ax in range(setup.grid.n))
            mstar_val = float(mstar_f2.values[(ti,) + si])
        witness.diagnostics["absorption_lhs"] = lhs
        witness.diagnostics["absorption_rhs"] = 0.5 * lam + mstar_val
        witness.diagnostics["absorption_ok"] = bool(lhs <= 0.5 * lam + mstar_val + 1e-12)
        # measured constants feeding the delta refinement
        j_up = None
        for j in range(star_j, family.n_s):
            if family.intrinsic[bi, j]:
                j_up = j
                break
        if j_up is not None:
            th = float(family.theta[bi, j_up]) / float(family.s_grid[j_up])
            if family.s_grid[j_up] > 1.0 / derived["tilde3"]:
                witness.diagnostics["c3_observed"] = th / lam
            else:
                witness.diagnostics["c4_observed"] = th / lam
    return witness


def _mask_mean(field: ScalarField, Q: Cylinder) -> float:
    g = field.grid
    tmask = (g.times > Q.t_lo) & (g.times < Q.t_hi)
    bmask = g.spatial_distance(Q.center_x) <= Q.radius
    count = int(tmask.sum()) * int(bmask.sum())
    if count == 0:
        return math.nan
    return float(field.values[tmask][:, bmask].sum() / count)


# ---------------------------------------------------------------------------
# Vitali selection
# ---------------------------------------------------------------------------

@dataclass
class VitaliResult:
    selected: list                 # indices into the input list
    cores: list                    # selected core cylinders
    dilations: list                # their dilations
    disjoint_ok: bool
    coverage_ok: bool | None
    union_measure: float
    sum_core_measure: float
    empirical_constant: float | None


def vitali_select(items: list, grid: SpaceTimeGrid | None = None,
                  check_coverage: bool = True) -> VitaliResult:
    """Greedy disjoint subfamily in decreasing size order.

    ``items`` is a list of (core: Cylinder, size: float, dilated: Cylinder).
    Ties in size break on the core's center/time so the selection is invariant
    under input permutation.  If ``grid`` is given, verifies nodewise that the
    dilations of the selected cores cover every input core.
    """
    order = sorted(range(len(items)),
                   key=lambda i: (-items[i][1], items[i][0].t_center,
                                  items[i][0].center_x, items[i][0].radius))
    chosen = []
    for i in order:
        core = items[i][0]
        if all(not core.intersects(items[j][0]) for j in chosen):
            chosen.append(i)
    cores = [items[i][0] for i in chosen]
    dilations = [items[i][2] for i in chosen]
    disjoint_ok = all(not cores[a].intersects(cores[b])
                      for a in range(len(cores)) for b in range(a + 1, len(cores)))
    coverage_ok = None
    union_measure = 0.0
    if grid is not None and check_coverage:
        union_inputs = np.zeros((grid.nt,) + grid.shape, dtype=bool)
        for core, _, _ in items:
            union_inputs |= _node_mask(grid, core)
        union_dil = np.zeros_like(union_inputs)
        for d in dilations:
            union_dil |= _node_mask(grid, d)
        coverage_ok = bool((union_dil | ~union_inputs).all())
        union_measure = float(union_inputs.sum()) * grid.cell_volume
    sum_core = sum(c.volume(grid.n if grid is not None else len(c.center_x))
                   for c in cores)
    emp = union_measure / sum_core if sum_core > 0 else None
    return VitaliResult(chosen, cores, dilations, disjoint_ok, coverage_ok,
                        union_measure, sum_core, emp)


def _node_mask(grid: SpaceTimeGrid, Q: Cylinder) -> np.ndarray:
    tmask = (grid.times > Q.t_lo) & (grid.times < Q.t_hi)
    bmask = grid.spatial_distance(Q.center_x) <= Q.radius
    return tmask.reshape((-1,) + (1,) * grid.n) & bmask[None]


# ---------------------------------------------------------------------------
# the full level-set covering
# ---------------------------------------------------------------------------

@dataclass
class CoveringResult:
    lam: float
    witnesses: list
    selected: list
    case_histogram: dict
    level_set_measure: float
    covered_measure: float
    coverage_ok: bool
    disjoint_ok: bool
    sum_core_measure: float
    empirical_covering_constant: float | None
    rh_constants: list
    absorption_ok: bool
    notes: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "n_witnesses": len(self.witnesses),
            "n_selected": len(self.selected),
            "case_histogram": {k.name: v for k, v in self.case_histogram.items()},
            "level_set_measure": self.level_set_measure,
            "covered_measure": self.covered_measure,
            "coverage_ok": self.coverage_ok,
            "disjoint_ok": self.disjoint_ok,
            "sum_core_measure": self.sum_core_measure,
            "empirical_covering_constant": self.empirical_covering_constant,
            "rh_constants": self.rh_constants,
            "absorption_ok": self.absorption_ok,
            "notes": self.notes,
        }


def cover_level_set(setup: RescaledSetup, family: CylinderFamily,
                    means_F: np.ndarray, lam: float, a: float, b: float,
                    config: CoveringConfig,
                    maximal_F: ScalarField | None = None,
                    mstar_f2: ScalarField | None = None,
                    planner: "_TriplePlanner | None" = None) -> CoveringResult:
    """Stopping-time covering of the super-level set of the intrinsic maximal
    function inside the (a,a)-cube, with dilations confined to the (b,b)-cube.

    Requires lam above the guard threshold; verifies disjointness of the
    selected star cylinders, nodewise coverage by the double stars, the
    mean bound on every double star, and records the reverse-Hoelder and
    absorption constants per witness.
    """
    mu = mu_threshold(a, b, setup, config, family.consts)
    if lam <= mu:
        raise ValueError(f"level {lam:.4g} not above the guard threshold {mu:.4g}")
    grid = setup.grid
    if maximal_F is None:
        maximal_F = family.maximal(setup.F, means_F)

    core_mask = _node_mask(grid, Cylinder.centered(np.zeros(grid.n), 0.0, a, a))
    level_mask = (maximal_F.values > lam) & core_mask
    level_measure = float(level_mask.sum()) * grid.cell_volume

    planner = planner or _TriplePlanner(family, setup, config)
    witnesses = []
    if level_mask.any():
        fit = planner.fit_table(b)
        hot = np.argwhere(fit & ~np.isnan(means_F) & (means_F > lam))
        violators = [(int(vb), int(vs)) for vb, vs in
                     np.argwhere(~np.isnan(means_F) & (means_F > 2.0 * lam))]
        stop_set = []
        if hot.size:
            bad = _containment_matrix_mark(family, violators,
                                           hot[:, 0].astype(int),
                                           hot[:, 1].astype(int))
            stop_set = [(int(bb), int(ss)) for (bb, ss), dead in zip(hot, bad)
                        if not dead]
        order = sorted(stop_set,
                       key=lambda c: (-family.s_grid[c[1]],
                                      family.base_points[c[0]][1],
                                      tuple(family.base_points[c[0]][0])))
        unclaimed = level_mask.copy()
        for bi, sj in order:
            if not unclaimed.any():
                break
            mask = family.node_mask(bi, sj)
            hit = mask & unclaimed
            if hit.any():
                unclaimed &= ~mask
                xb, tb, _, _ = family.base_points[bi]
                witnesses.append(StoppingCylinder(
                    bi, sj, (xb, tb), float(family.s_grid[sj]),
                    float(means_F[bi, sj])))
        if unclaimed.any():
            raise DilationEscapesDomain(
                f"{int(unclaimed.sum())} level-set nodes lack a realizable "
                f"stopping witness at level {lam:.4g}: level at or below the guard")

    completed = [classify_and_dilate(family, w, setup, config, means_F, b,
                                     mstar_f2, lam, planner=planner)
                 for w in witnesses]
    hist = {label: 0 for label in CaseLabel}
    for w in completed:
        hist[w.case] += 1

    items = [(w.star, float(family.s_grid[w.star_s_index]), w.star2)
             for w in completed]
    vit = vitali_select(items, grid=grid, check_coverage=False)
    covered = np.zeros_like(level_mask)
    for i in vit.selected:
        covered |= _node_mask(grid, completed[i].star2)
    coverage_ok = bool((covered | ~level_mask).all())
    covered_measure = float((covered & level_mask).sum()) * grid.cell_volume

    mean_bound_ok = all(w.means["star2"] <= 2.0 * lam + 1e-12 for w in completed)
    rh_constants = []
    for w in completed:
        q = config.vartheta
        star_pow = _mask_mean(ScalarField(grid, setup.F.values**q, nonneg=True),
                              w.star) ** (1.0 / q)
        mstar_val = 0.0
        if mstar_f2 is not None:
            x, t = w.base_point
            ti = grid.nearest_time_index(t)
            si = tuple(int(np.argmin(np.abs(grid.axes[ax] - x[ax])))
                       for ax in range(grid.n))
            mstar_val = float(mstar_f2.values[(ti,) + si])
        denom = star_pow + mstar_val
        rh_constants.append(lam / denom if denom > 0 else math.inf)

    absorption_ok = all(w.diagnostics.get("absorption_ok", True) for w in completed)
    return CoveringResult(
        lam=lam, witnesses=completed, selected=vit.selected,
        case_histogram=hist, level_set_measure=level_measure,
        covered_measure=covered_measure, coverage_ok=coverage_ok,
        disjoint_ok=vit.disjoint_ok, sum_core_measure=vit.sum_core_measure,
        empirical_covering_constant=(level_measure / vit.sum_core_measure
                                     if vit.sum_core_measure > 0 else None),
        rh_constants=rh_constants, absorption_ok=absorption_ok,
        notes={"mu_threshold": mu, "mean_bound_ok": mean_bound_ok,
               "n_level_nodes": int(level_mask.sum())})


# ---------------------------------------------------------------------------
# end-to-end pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineRun:
    setup: RescaledSetup
    family: CylinderFamily
    means_F: np.ndarray
    maximal_F: ScalarField
    mstar_f2: ScalarField | None
    config: CoveringConfig
    mu: float
    max_maximal: float
    levels: np.ndarray
    results: list

    def summary(self) -> dict:
        hist = {label.name: 0 for label in CaseLabel}
        for res in self.results:
            for k, v in res.case_histogram.items():
                hist[k.name] += v
        return {
            "mu": self.mu,
            "max_maximal": self.max_maximal,
            "n_levels": len(self.levels),
            "case_histogram": hist,
            "all_coverage_ok": all(r.coverage_ok for r in self.results),
            "all_disjoint_ok": all(r.disjoint_ok for r in self.results),
            "all_mean_bound_ok": all(r.notes["mean_bound_ok"] for r in self.results),
            "all_absorption_ok": all(r.absorption_ok for r in self.results),
        }


def run_covering_pipeline(u: ScalarField, f, z0, R: float, theta_o: float,
                          params: ModelParams, config: CoveringConfig,
                          shape, nt, b_hat: float = 0.25,
                          a: float = 0.5, b: float = 1.0,
                          n_levels: int = 8, s_span_log2: float = 24.0,
                          calibrate_guard: bool = True,
                          measure_c1: bool = True,
                          max_delta_refinements: int = 2) -> PipelineRun:
    """Rescale, build the family, measure the engulfing constant, calibrate
    the guard threshold, sweep levels, and cover.  If an absorption check
    fails at a never-intrinsic witness the smallness parameter is refined from
    the measured constants and the sweep reruns (at most
    ``max_delta_refinements`` times)."""
    setup = rescale_to_unit(u, f, z0, R, theta_o, params, shape, nt)
    consts = GeometryConstants(params=params, S=1.0, R=1.0, b_hat=b_hat,
                               K=config.K, s_span_log2=s_span_log2)
    if not consts.covering_admissible():
        raise ValueError("b_hat outside the admissible covering window")
    family = CylinderFamily(setup.u.power(params.m + 1.0), consts,
                            lattice_stride=config.lattice_stride)
    if measure_c1:
        config = CoveringConfig(
            epsilon=config.epsilon, delta_tilde=config.delta_tilde,
            gamma_1=config.gamma_1, c_1=measure_engulfing_constant(family),
            c_mu=config.c_mu, K=config.K, vartheta=config.vartheta,
            lattice_stride=config.lattice_stride)
    means_F = family.means(setup.F)
    maximal_F = family.maximal(setup.F, means_F)
    mstar = box_maximal(ScalarField(setup.grid, setup.f.values**2, nonneg=True),
                        dyadic=True) if setup.f is not None else None

    core_mask = _node_mask(setup.grid, Cylinder.centered(np.zeros(setup.grid.n),
                                                         0.0, a, a))
    max_max = float(maximal_F.values[core_mask].max()) if core_mask.any() else 0.0

    for attempt in range(max_delta_refinements + 1):
        planner = _TriplePlanner(family, setup, config)
        if calibrate_guard:
            config = CoveringConfig(
                epsilon=config.epsilon, delta_tilde=config.delta_tilde,
                gamma_1=config.gamma_1, c_1=config.c_1,
                c_mu=calibrate_c_mu(setup, family, means_F, config, a, b,
                                    planner=planner, maximal_F=maximal_F),
                K=config.K, vartheta=config.vartheta,
                lattice_stride=config.lattice_stride)
        mu = mu_threshold(a, b, setup, config, consts)
        levels = geometric_levels(mu, max_max, n_levels)
        if levels.size == 0:
            # guard sits above the maximal function: sweep a ladder above the
            # guard anyway; coverings are then verified (possibly vacuously)
            levels = np.geomspace(mu * 1.05, mu * 4.0, n_levels)
        results = [cover_level_set(setup, family, means_F, lam, a, b, config,
                                   maximal_F=maximal_F, mstar_f2=mstar,
                                   planner=planner)
                   for lam in levels]
        bad = [w for res in results for w in res.witnesses
               if not w.diagnostics.get("absorption_ok", True)]
        if not bad or attempt == max_delta_refinements:
            break
        c3 = max((w.diagnostics.get("c3_observed", 0.0) for res in results
                  for w in res.witnesses), default=0.0)
        c4 = max((w.diagnostics.get("c4_observed", 0.0) for res in results
                  for w in res.witnesses), default=0.0)
        config = config.refine_delta(max(c3, 1e-6), max(c4, 1e-6))
    return PipelineRun(setup=setup, family=family, means_F=means_F,
                       maximal_F=maximal_F, mstar_f2=mstar, config=config,
                       mu=mu, max_maximal=max_max, levels=levels,
                       results=results)
