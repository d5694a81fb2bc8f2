"""Heterogeneity-robust standard errors, the weak-IV robust test, and the
correlation diagnostic for delta-method reliability."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import optimize, stats

from .design import FEJIV_CAP, DesignContext, GMatrixSpec, Kind, dense_blocks, make_spec
from .errors import DegenerateDesignError, InputError
from .estimators import EstimatorResult, estimate, sandwich

log = logging.getLogger(__name__)

RHO_THRESHOLD = 0.76
GRID_POINTS = 401
GRID_HALF_WIDTH_SE = 10.0


@dataclass
class VarianceComponents:
    sigma_hat_sq: float
    residuals: np.ndarray
    leniency: np.ndarray
    numerator_terms: dict | None = None

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma_hat_sq))


def _scaled_resid(ctx: DesignContext, v):
    # first-stage style residual (M - H)v, rescaled so squares are unbiased
    # for the error variance under homoskedasticity
    r = ctx.annihilate(v) - ctx.project(v)
    return r / np.sqrt(ctx.gap)


def robust_se(result: EstimatorResult, ctx: DesignContext, y, x, *, spec: GMatrixSpec | None = None,
              decompose: bool | None = None, decompose_cap: int = FEJIV_CAP) -> VarianceComponents:
    """Plug-in heteroskedasticity- and heterogeneity-robust variance of ``result``.

    ``se^2 = sum_i e_i^2 (Gx)_i^2 / (x'Gx)^2`` where ``e`` is the control
    residual of ``y - x beta``. With many instruments the formula is slightly
    conservative. When ``decompose`` is true (default: ``n <= decompose_cap``)
    a descriptive split into main, heterogeneity and many-instrument terms is
    attached; it is not used for inference.
    """
    if not result.defined:
        raise DegenerateDesignError(f"{result.kind.value} estimate is undefined; variance not computed")
    y = ctx._check(y)
    x = ctx._check(x)
    if spec is None:
        spec = make_spec(ctx, result.kind)
    g = spec.apply(x)
    resid = ctx.annihilate(y - x * result.beta_hat)
    var = sandwich(g, resid, result.denominator)
    terms = None
    if decompose is None:
        decompose = ctx.n <= decompose_cap
    if decompose:
        terms = _decompose(ctx, spec, y, x, result.beta_hat, resid, result.denominator, decompose_cap)
    return VarianceComponents(var, resid, g, terms)


def _decompose(ctx, spec, y, x, beta, resid, den, cap):
    lhat = ctx.project(x)
    main = float(np.sum(lhat**2 * resid**2))
    nu = _scaled_resid(ctx, x)
    e = _scaled_resid(ctx, y - x * beta)
    signal = spec.apply_transpose(ctx.project(y - x * beta))
    hetero = float(np.sum(signal**2 * nu**2))
    G = spec.dense(cap)
    s_x = nu**2
    s_e = e**2
    s_ex = e * nu
    many = float(s_e @ (G**2) @ s_x + s_ex @ (G * G.T) @ s_ex)
    d2 = den**2
    return {"main": main / d2, "heterogeneity": hetero / d2, "many_instrument": many / d2}


# --------------------------------------------------------------------------
# weak-instrument robust test


@dataclass
class WeakIVTestResult:
    beta0: float
    statistic: float
    p_value: float
    alpha: float
    confidence_set: list = field(default_factory=list)
    grid: tuple | None = None
    open_ends: list = field(default_factory=list)
    cross_term: bool = False

    @property
    def empty(self) -> bool:
        return self.grid is not None and not self.confidence_set

    def to_dict(self) -> dict:
        out = {"beta0": self.beta0, "stat": self.statistic, "p": self.p_value, "alpha": self.alpha,
               "cross_term": self.cross_term}
        if self.grid is not None:
            out["grid"] = {"lo": self.grid[0], "hi": self.grid[1], "points": self.grid[2]}
            out["set"] = [[lo, hi] for lo, hi in self.confidence_set]
            out["open_ends"] = [list(o) for o in self.open_ends]
            out["empty"] = self.empty
            if len(self.confidence_set) == 1:
                out["ci_lo"], out["ci_hi"] = self.confidence_set[0]
        return out


def pair_products(spec: GMatrixSpec, cap: int = FEJIV_CAP):
    """Sparse matrix of ``G_ij G_ji`` for ``i != j``, built per connected
    component. Returns ``(matrix, complete)``; components above ``cap`` rows
    are left out and make ``complete`` false."""
    n = spec.context.n
    rows_, cols_, vals_ = [], [], []
    complete = True
    for rows, G in dense_blocks(spec, cap):
        if G is None:
            complete = False
            continue
        P = G * G.T
        np.fill_diagonal(P, 0.0)
        rr, cc = np.nonzero(P)
        rows_.append(rows[rr])
        cols_.append(rows[cc])
        vals_.append(P[rr, cc])
    if not rows_:
        return sp.csr_matrix((n, n)), complete
    Q = sp.csr_matrix((np.concatenate(vals_), (np.concatenate(rows_), np.concatenate(cols_))), shape=(n, n))
    return Q, complete


class _NullImposedStatistic:
    """``t(b) = (y - x b)'Gx / sqrt(V(b))`` with ``e0`` the control residual of
    ``y - x b`` and

        ``V(b) = sum_i e0_i^2 (Gx)_i^2 + sum_{i != j} G_ij G_ji x_i e0_i x_j e0_j``.

    The second sum estimates the many-instrument cross term
    ``sum G_ij G_ji s_i s_j`` (``s_i = cov(e_i, x_i)``), which the plug-in first
    sum misses and which matters when instruments are weak. Numerator and
    variance are polynomials in ``b`` so the statistic is cheap on a grid.
    """

    def __init__(self, ctx, y, x, spec, cross_term=True, cap=FEJIV_CAP):
        g = spec.apply(x)
        My, Mx = ctx.annihilate(y), ctx.annihilate(x)
        g2 = g * g
        self.a = float(y @ g)
        self.b = float(x @ g)
        self.cyy = float(np.sum(g2 * My * My))
        self.cyx = float(np.sum(g2 * My * Mx))
        self.cxx = float(np.sum(g2 * Mx * Mx))
        self.cross_term = False
        if cross_term:
            Q, complete = pair_products(spec, cap)
            if not complete:
                log.warning("weak-IV test: a connected component exceeds %d rows; the many-instrument "
                            "cross term is left out for it", cap)
            ay, ax = x * My, x * Mx
            Qax = Q @ ax
            self.cyy += float(ay @ (Q @ ay))
            self.cyx += float(ay @ Qax)
            self.cxx += float(ax @ Qax)
            self.cross_term = complete

    def num(self, b0):
        return self.a - self.b * np.asarray(b0, dtype=float)

    def var(self, b0):
        b0 = np.asarray(b0, dtype=float)
        return np.maximum(self.cyy - 2 * b0 * self.cyx + b0 * b0 * self.cxx, 0.0)

    def stat(self, b0):
        num, var = np.broadcast_arrays(self.num(b0), self.var(b0))
        out = np.zeros(num.shape)
        pos = var > 0
        out[pos] = num[pos] / np.sqrt(var[pos])
        zero_var = ~pos & (num != 0)
        out[zero_var] = np.sign(num[zero_var]) * np.inf
        return out

    def excess(self, b0, crit):
        # negative inside the acceptance region
        return float(self.num(b0) ** 2 - crit**2 * self.var(b0))


def parse_grid(text: str) -> tuple[float, float, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise InputError(f"grid must be lo:hi:points, got {text!r}")
    try:
        return float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise InputError(f"grid must be lo:hi:points, got {text!r}") from None


def weak_iv_test(ctx: DesignContext, y, x, beta0: float, *, grid=None, alpha: float = 0.05,
                 spec: GMatrixSpec | None = None, invert: bool = True, cross_term: bool = True,
                 cross_term_cap: int = FEJIV_CAP) -> WeakIVTestResult:
    """Test ``beta = beta0`` with null-imposed residuals and invert over a grid.

    ``grid`` is ``(lo, hi, points)``; by default 401 points spanning the
    UJIVE estimate plus or minus 10 robust standard errors. ``cross_term``
    adds the many-instrument covariance term to the variance; it needs dense
    blocks for each connected component of at most ``cross_term_cap`` rows.
    """
    y = ctx._check(y)
    x = ctx._check(x)
    if spec is None:
        spec = make_spec(ctx, Kind.UJIVE)
    T = _NullImposedStatistic(ctx, y, x, spec, cross_term, cross_term_cap)
    t0 = float(T.stat(beta0))
    p0 = float(2 * stats.norm.sf(abs(t0)))
    res = WeakIVTestResult(float(beta0), t0, p0, alpha, cross_term=T.cross_term)
    if not invert:
        return res
    if grid is None:
        est = estimate(ctx, y, x, spec=spec)
        if not est.defined or not est.se_robust:
            raise DegenerateDesignError("default grid needs a defined UJIVE estimate with positive se")
        half = GRID_HALF_WIDTH_SE * est.se_robust
        grid = (est.beta_hat - half, est.beta_hat + half, GRID_POINTS)
    lo, hi, num = grid
    if num < 1 or not np.isfinite(lo) or not np.isfinite(hi) or hi < lo:
        raise InputError(f"empty or invalid grid {grid!r}")
    pts = np.linspace(lo, hi, int(num))
    crit = stats.norm.isf(alpha / 2)
    accept = np.abs(T.stat(pts)) < crit
    intervals, open_ends = [], []
    i = 0
    while i < len(pts):
        if not accept[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(pts) and accept[j + 1]:
            j += 1
        left = pts[i] if i == 0 else _boundary(T, pts[i - 1], pts[i], crit)
        right = pts[j] if j == len(pts) - 1 else _boundary(T, pts[j], pts[j + 1], crit)
        intervals.append((float(left), float(right)))
        open_ends.append((i == 0, j == len(pts) - 1))
        i = j + 1
    res.confidence_set = intervals
    res.open_ends = open_ends
    res.grid = (float(lo), float(hi), int(num))
    return res


def _boundary(T, a, b, crit):
    fa, fb = T.excess(a, crit), T.excess(b, crit)
    if fa == 0:
        return a
    if fb == 0 or np.sign(fa) == np.sign(fb):
        return b if fb <= 0 else a
    return optimize.brentq(lambda t: T.excess(t, crit), a, b, xtol=1e-12, rtol=1e-12)


# --------------------------------------------------------------------------
# correlation diagnostic


@dataclass
class RhoDiagnostic:
    value: float | None
    range: tuple | None
    flag_076: bool
    sigma: np.ndarray

    def to_dict(self) -> dict:
        out = {"flag_076": self.flag_076,
               "sigma": [[float(v) for v in row] for row in self.sigma]}
        if self.range is not None:
            out["range"] = list(self.range)
        else:
            out["value"] = self.value
        return out


def sigma_hat(ctx: DesignContext, y, x, spec: GMatrixSpec | None = None) -> np.ndarray:
    """Plug-in covariance of ``(y'Gx, x'Gx)`` from per-observation contributions.

    Relative leniency is estimated by ``Hx``, the signal terms by ``G'`` applied
    to the full-design fitted values, and error terms by leverage-rescaled
    first-stage and reduced-form residuals.
    """
    y = ctx._check(y)
    x = ctx._check(x)
    if spec is None:
        spec = make_spec(ctx, Kind.UJIVE)
    lt = ctx.project(x)
    fit_x = ctx.project(x) + ctx.project_controls(x)
    fit_y = ctx.project(y) + ctx.project_controls(y)
    r_x = spec.apply_transpose(fit_x)
    r_y = spec.apply_transpose(fit_y)
    nu = _scaled_resid(ctx, x)
    nu_y = _scaled_resid(ctx, y)
    u = np.column_stack([lt * nu_y + r_y * nu, (lt + r_x) * nu])
    return u.T @ u


def rho_from_sigma(sigma: np.ndarray, beta_star: float) -> float:
    s11, s12, s22 = sigma[0, 0], sigma[0, 1], sigma[1, 1]
    if np.isinf(beta_star):
        return -float(np.sign(beta_star))
    inner = s11 - 2 * beta_star * s12 + beta_star**2 * s22
    if s22 <= 0 or inner <= 0:
        raise DegenerateDesignError("rho diagnostic unavailable: estimated covariance is degenerate")
    return float((s12 - s22 * beta_star) / np.sqrt(s22 * inner))


def rho_diagnostic(ctx: DesignContext, y, x, beta_star, *, spec: GMatrixSpec | None = None) -> RhoDiagnostic:
    """Correlation between ``(y - x b)'Gx`` and ``x'Gx`` at ``b = beta_star``.

    ``beta_star`` may be a number or a ``(lo, hi)`` pair; rho is monotone in
    ``beta_star`` so the range over an interval is attained at its ends.
    """
    sigma = sigma_hat(ctx, y, x, spec)
    if np.ndim(beta_star) == 0:
        rho = rho_from_sigma(sigma, float(beta_star))
        return RhoDiagnostic(rho, None, abs(rho) >= RHO_THRESHOLD, sigma)
    lo, hi = (float(b) for b in beta_star)
    ends = sorted((rho_from_sigma(sigma, lo), rho_from_sigma(sigma, hi)))
    flag = max(abs(ends[0]), abs(ends[1])) >= RHO_THRESHOLD
    return RhoDiagnostic(None, tuple(ends), flag, sigma)
