"""Point estimators of the G-matrix family and first-stage diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .design import DesignContext, GMatrixSpec, Kind, make_spec
from .errors import InsufficientDFError


@dataclass(frozen=True)
class FirstStageStats:
    """Homoskedastic first-stage F for ``pi = 0`` and related quantities."""

    F: float
    partial_R2: float
    leniency_ss: float
    var_nu_hat: float
    df: int


@dataclass(frozen=True)
class EstimatorResult:
    kind: Kind
    beta_hat: float | None
    numerator: float
    denominator: float
    n: int
    K: int
    L: int
    first_stage: FirstStageStats | None
    se_plain: float | None = None
    se_robust: float | None = None

    @property
    def defined(self) -> bool:
        return self.beta_hat is not None

    def to_dict(self) -> dict:
        fs = self.first_stage
        return {
            "estimator": self.kind.value,
            "beta": self.beta_hat,
            "se_robust": self.se_robust,
            "se_plain": self.se_plain,
            "F": fs.F if fs else None,
            "partial_R2": fs.partial_R2 if fs else None,
            "n": self.n,
            "K": self.K,
            "L": self.L,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "defined": self.defined,
        }


def first_stage(ctx: DesignContext, x) -> FirstStageStats:
    df = ctx.df
    if df <= 0:
        raise InsufficientDFError(f"first stage needs n - K - L > 0 (n={ctx.n}, K={ctx.K}, L={ctx.L})")
    Mx = ctx.annihilate(x)
    Hx = ctx.project(x)
    # round-off floor so that exact fits read as exact zeros
    tiny = 1e-20 * float(x @ x)
    explained = float(Hx @ Hx)
    total = float(Mx @ Mx)
    if explained <= tiny:
        explained = 0.0
    resid_ss = max(total - explained, 0.0)
    if resid_ss <= tiny:
        resid_ss = 0.0
    var_nu = resid_ss / df
    if explained == 0.0:
        F = 0.0
    else:
        F = explained / (ctx.K * var_nu) if var_nu > 0 else np.inf
    r2 = explained / total if total > tiny else 0.0
    return FirstStageStats(F=float(F), partial_R2=float(r2), leniency_ss=explained,
                           var_nu_hat=float(var_nu), df=df)


def bias_rules(F_expect: float, R2: float, K: int, L: int) -> dict:
    """Rule-of-thumb relative biases under homoskedasticity.

    ``tsls_rel_bias`` is 2SLS bias as a fraction of OLS bias;
    ``jive_rel_bias_vs_tsls`` is JIVE bias as a multiple of 2SLS bias (None
    when ``(E[F]-1)K = L``).
    """
    if not 0.0 <= R2 < 1.0:
        raise ValueError("R2 must lie in [0, 1)")
    if F_expect <= 0:
        raise ValueError("E[F] must be positive")
    tsls = 1.0 / ((1.0 - R2) * F_expect)
    denom = (F_expect - 1.0) * K - L
    jive = None if denom == 0 else -F_expect * L / denom
    return {"tsls_rel_bias": tsls, "jive_rel_bias_vs_tsls": jive}


def sandwich(leniency, resid, denominator) -> float:
    """Plug-in variance ``sum(e_i^2 l_i^2) / (x'Gx)^2``."""
    return float(np.sum(resid**2 * leniency**2) / denominator**2)


def estimate(ctx: DesignContext, y, x, kind="ujive", *, spec: GMatrixSpec | None = None,
             se: bool = True) -> EstimatorResult:
    """``beta = y'Gx / x'Gx`` with G chosen by ``kind``.

    A zero denominator yields ``beta_hat=None`` rather than an infinity.
    """
    y = ctx._check(y)
    x = ctx._check(x)
    if spec is None:
        spec = make_spec(ctx, kind)
    Gx = spec.apply(x)
    num = float(y @ Gx)
    den = float(x @ Gx)
    try:
        fs = first_stage(ctx, x)
    except InsufficientDFError:
        fs = None
    if den == 0.0 or not np.isfinite(den):
        return EstimatorResult(spec.kind, None, num, den, ctx.n, ctx.K, ctx.L, fs)
    beta = num / den
    se_plain = se_robust = None
    if se:
        resid = ctx.annihilate(y - x * beta)
        se_robust = float(np.sqrt(sandwich(Gx, resid, den)))
        dof = ctx.n - ctx.L - 1
        if dof > 0:
            s2 = float(resid @ resid) / dof
            se_plain = float(np.sqrt(s2 * float(Gx @ Gx)) / abs(den))
    return EstimatorResult(spec.kind, beta, num, den, ctx.n, ctx.K, ctx.L, fs, se_plain, se_robust)


def estimate_many(ctx: DesignContext, y, x, kinds, fejiv_cap: int | None = None) -> list[EstimatorResult]:
    out = []
    for kind in kinds:
        kind = Kind.parse(kind)
        spec = make_spec(ctx, kind, **({"fejiv_cap": fejiv_cap} if fejiv_cap else {}))
        out.append(estimate(ctx, y, x, spec=spec))
    return out


def result_dict(res: EstimatorResult) -> dict:
    d = res.to_dict()
    if res.first_stage is not None:
        d["first_stage"] = asdict(res.first_stage)
    return d
