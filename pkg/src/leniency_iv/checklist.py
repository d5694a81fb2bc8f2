"""Balance, average-monotonicity and complier checks, each a UJIVE run with
a re-targeted outcome on the main specification's design."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
from scipy import stats

from .design import DesignContext, Kind, build_design, make_spec, probe_checksum
from .errors import DegenerateDesignError, InputError, UnsupportedOperationError
from .estimators import estimate
from .prune import prune

log = logging.getLogger(__name__)

MAX_VALUE_BINS = 20


@dataclass
class BalanceRow:
    covariate_name: str
    coefficient: float | None
    se: float | None
    n_used: int
    status: str = "ok"
    probe_checksum: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ComplierRow:
    covariate_name: str
    sample_mean: float | None
    complier_mean: float | None
    se: float | None
    within_logical_bounds: bool | None
    treated_mean: float | None = None
    untreated_mean: float | None = None
    treated_weight: float | None = None
    untreated_weight: float | None = None
    n_used: int = 0
    status: str = "ok"
    probe_checksum: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MonotonicityRow:
    bin: str
    lo: float
    hi: float
    n_in_bin: int
    treated_mass: float | None
    treated_se: float | None
    untreated_mass: float | None
    untreated_se: float | None
    flag_treated: bool
    flag_untreated: bool
    status: str = "ok"
    probe_checksum: str = ""

    @property
    def flagged(self) -> bool:
        return self.flag_treated or self.flag_untreated

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MonotonicityResult:
    rows: list
    alpha: float
    treated_total: float
    untreated_total: float

    @property
    def any_flagged(self) -> bool:
        return any(r.flagged for r in self.rows)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "treated_total": self.treated_total,
                "untreated_total": self.untreated_total, "any_flagged": self.any_flagged,
                "bins": [r.to_dict() for r in self.rows]}


def _as_items(covariates):
    if isinstance(covariates, dict):
        return list(covariates.items())
    return list(covariates)


def _context_for(ctx: DesignContext, v):
    """Context, positions and values for the non-missing part of ``v``.

    With no missing values the main context is reused; otherwise the
    subsample is re-pruned and its design rebuilt.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (ctx.n,):
        raise InputError(f"covariate has shape {v.shape}, expected ({ctx.n},)")
    ok = np.isfinite(v)
    if ok.all():
        return ctx, np.arange(ctx.n), v
    if ctx.dataset is None:
        raise InputError("missing covariate values need a context built from a Dataset")
    sub, _ = prune(ctx.dataset.subset(ok))
    sub_ctx = build_design(sub)
    pos = ctx.dataset.positions_of(sub)
    return sub_ctx, pos, v[pos]


def balance_check(ctx: DesignContext, x, covariates) -> list[BalanceRow]:
    """UJIVE of each covariate on the treatment.

    The covariate's control component is removed before forming the
    numerator, so any column of W returns exactly zero; when the UJIVE
    leniency is orthogonal to W (examiners nested in cells) this is the
    plain UJIVE regression.
    """
    x = ctx._check(x)
    rows = []
    for name, v in _as_items(covariates):
        try:
            c, pos, vv = _context_for(ctx, v)
        except DegenerateDesignError as exc:
            rows.append(BalanceRow(name, None, None, 0, f"skipped: {exc}"))
            continue
        if vv.size == 0:
            rows.append(BalanceRow(name, None, None, 0, "skipped: no observed values"))
            continue
        spec = make_spec(c, Kind.UJIVE)
        resid = c.annihilate(vv)
        # round-off floor: a covariate in the control space gives exact zeros
        if np.any(vv):
            resid[np.abs(resid) <= 1e-12 * np.max(np.abs(vv))] = 0.0
        res = estimate(c, resid, x[pos], spec=spec)
        rows.append(BalanceRow(name, res.beta_hat, res.se_robust, c.n,
                               "ok" if res.defined else "undefined: zero first stage",
                               probe_checksum(spec)))
    return rows


def _is_binary(v) -> bool:
    return bool(np.all((v == 0) | (v == 1)))


def complier_means(ctx: DesignContext, y, x, covariates) -> list[ComplierRow]:
    """Pooled complier mean of each covariate via the transformed treatment
    ``2x - 1``, with treated-only and untreated-only variants.

    Because ``G(2x-1) = 2Gx`` (constants lie in the control space), the pooled
    estimate equals ``w * (treated + untreated)`` with
    ``w = 2x'Gx / (2x-1)'G(2x-1)``, which is 1/2 when ``1'Gx = 0``.
    """
    x = ctx._check(x)
    if not _is_binary(x):
        raise UnsupportedOperationError("complier means need a binary (0/1) treatment")
    rows = []
    for name, v in _as_items(covariates):
        try:
            c, pos, vv = _context_for(ctx, v)
        except DegenerateDesignError as exc:
            rows.append(ComplierRow(name, None, None, None, None, status=f"skipped: {exc}"))
            continue
        xs = x[pos]
        xt = 2.0 * xs - 1.0
        spec = make_spec(c, Kind.UJIVE)
        pooled = estimate(c, vv * xt, xt, spec=spec)
        treated = estimate(c, vv * xs, xs, spec=spec, se=False)
        untreated = estimate(c, vv * (xs - 1.0), xs, spec=spec, se=False)
        mean = float(np.mean(vv))
        if not pooled.defined:
            rows.append(ComplierRow(name, mean, None, None, None, n_used=c.n,
                                    status="undefined: zero first stage", probe_checksum=probe_checksum(spec)))
            continue
        bounds = None
        if _is_binary(vv):
            slack = 2.0 * (pooled.se_robust or 0.0)
            bounds = bool(-slack <= pooled.beta_hat <= 1.0 + slack)
        w = 2.0 * treated.denominator / pooled.denominator if pooled.denominator else None
        rows.append(ComplierRow(name, mean, pooled.beta_hat, pooled.se_robust, bounds,
                                treated.beta_hat, untreated.beta_hat, w, w, c.n, "ok",
                                probe_checksum(spec)))
    return rows


# --------------------------------------------------------------------------
# monotonicity


@dataclass(frozen=True)
class Bin:
    """Closed-open interval ``[lo, hi)``; ``closed`` makes it ``[lo, hi]``."""

    lo: float
    hi: float
    closed: bool = False
    label: str | None = None

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        upper = (y <= self.hi) if self.closed else (y < self.hi)
        return (y >= self.lo) & upper

    @property
    def name(self) -> str:
        if self.label is not None:
            return self.label
        if self.lo == self.hi:
            return f"{self.lo:g}"
        return f"[{self.lo:g},{self.hi:g}{']' if self.closed else ')'}"


def default_bins(y) -> list[Bin]:
    """Each observed value when there are at most 20, else deciles."""
    y = np.asarray(y, dtype=float)
    vals = np.unique(y)
    if len(vals) <= MAX_VALUE_BINS:
        return [Bin(v, v, True) for v in vals]
    edges = np.unique(np.quantile(y, np.linspace(0, 1, 11)))
    return [Bin(lo, hi, closed=(k == len(edges) - 2)) for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:]))]


def parse_bins(text: str) -> list[Bin]:
    """``"v1,v2,..."`` value bins or ``"edges:e0,e1,..."`` interval bins."""
    text = text.strip()
    if text.startswith("edges:"):
        edges = sorted(float(t) for t in text[6:].split(",") if t.strip())
        if len(edges) < 2:
            raise InputError("edges need at least two values")
        return [Bin(lo, hi, closed=(k == len(edges) - 2)) for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:]))]
    try:
        return [Bin(float(t), float(t), True) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"cannot parse bins {text!r}") from exc


def _coerce_bins(bins) -> list[Bin]:
    out = []
    for b in bins:
        if isinstance(b, Bin):
            out.append(b)
        elif np.ndim(b) == 0:
            out.append(Bin(float(b), float(b), True))
        else:
            lo, hi = b
            out.append(Bin(float(lo), float(hi)))
    return out


def monotonicity_test(ctx: DesignContext, y, x, bins=None, alpha: float = 0.05) -> MonotonicityResult:
    """Per-bin complier outcome masses from UJIVE on ``1{y in b} x`` and
    ``1{y in b} (1 - x)`` (treatment ``1 - x``); a bin is flagged when the upper end of its
    two-sided ``1 - alpha`` confidence interval is below zero."""
    y = ctx._check(y)
    x = ctx._check(x)
    bins = default_bins(y) if bins is None else _coerce_bins(bins)
    if not bins:
        raise InputError("no bins given")
    member = np.column_stack([b.contains(y) for b in bins])
    counts = member.sum(axis=1)
    if np.any(counts != 1):
        i = int(np.flatnonzero(counts != 1)[0])
        what = "no bin" if counts[i] == 0 else "more than one bin"
        raise InputError(f"bins must partition the outcomes: {ctx.row_label(i)} (y={y[i]:g}) falls in {what}")
    spec = make_spec(ctx, Kind.UJIVE)
    check = probe_checksum(spec)
    crit = stats.norm.isf(alpha / 2)
    rows = []
    t_tot = u_tot = 0.0
    for k, b in enumerate(bins):
        ind = member[:, k].astype(float)
        nb = int(ind.sum())
        if nb == 0:
            log.warning("monotonicity: bin %s is empty; skipped", b.name)
            rows.append(MonotonicityRow(b.name, b.lo, b.hi, 0, None, None, None, None, False, False,
                                        "skipped: empty bin", check))
            continue
        tr = estimate(ctx, ind * x, x, spec=spec)
        # untreated side run on the treatment 1 - x: numerator is 1{y in b}(x-1)'Gx as
        # for the outcome 1{y in b}(x-1), normalized by (x-1)'Gx so masses sum to one
        # even when 1'Gx != 0 (crossed controls); identical when examiners are nested
        un = estimate(ctx, ind * (1.0 - x), 1.0 - x, spec=spec)
        if not tr.defined:
            raise DegenerateDesignError("first-stage denominator is zero; masses undefined")
        t_tot += tr.beta_hat
        u_tot += un.beta_hat
        ft = tr.beta_hat + crit * (tr.se_robust or 0.0) < 0
        fu = un.beta_hat + crit * (un.se_robust or 0.0) < 0
        rows.append(MonotonicityRow(b.name, b.lo, b.hi, nb, tr.beta_hat, tr.se_robust,
                                    un.beta_hat, un.se_robust, bool(ft), bool(fu), "ok", check))
    return MonotonicityResult(rows, alpha, t_tot, u_tot)
