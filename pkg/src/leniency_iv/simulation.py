"""Synthetic leniency designs with known potential treatments, brute-force
LATE-weight oracles, and a Monte Carlo harness."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .data import Dataset, read_key_value_file
from .design import Kind, build_design, make_spec
from .errors import ConfigError, DesignError
from .estimators import estimate
from .inference import weak_iv_test
from .prune import prune

log = logging.getLogger(__name__)

BASE_SPREAD = 0.1     # cells' baseline treatment rates span 0.5 +- this
EDGE = 0.02           # examiner rates stay inside [EDGE, 1 - EDGE]
MAX_RERUNS = 20


@dataclass(frozen=True)
class SimConfig:
    n: int = 2000
    n_cells: int = 20
    examiners_per_cell: int = 6
    leniency_spread: float | None = None
    target_F: float | None = 5.0
    endogeneity: float = 0.5
    effect_model: str = "constant"
    beta: float = 1.0
    heterogeneity: float = 0.0
    defier_fraction: float = 0.0
    defier_shift: float = 0.0
    heteroskedasticity: str = "none"
    imbalance: float = 0.0
    outcome_type: str = "continuous"
    seed: int = 0

    def __post_init__(self):
        if self.n < 4 or self.n_cells < 1:
            raise ConfigError("need n >= 4 and n_cells >= 1")
        if self.examiners_per_cell < 2:
            raise ConfigError("examiners_per_cell must be at least 2")
        if self.n < 2 * self.n_cells * self.examiners_per_cell:
            raise ConfigError("n must allow at least two cases per examiner on average")
        if not 0 <= self.defier_fraction < 0.5:
            raise ConfigError("defier_fraction must lie in [0, 0.5)")
        if not -1 < self.endogeneity < 1:
            raise ConfigError("endogeneity must lie in (-1, 1)")
        if self.effect_model not in ("constant", "heterogeneous"):
            raise ConfigError(f"unknown effect_model {self.effect_model!r}")
        if self.effect_model == "constant" and (self.defier_fraction or self.heterogeneity or self.defier_shift):
            raise ConfigError("defiers and effect heterogeneity need effect_model=heterogeneous")
        if self.heteroskedasticity not in ("none", "leniency"):
            raise ConfigError(f"unknown heteroskedasticity {self.heteroskedasticity!r}")
        if self.outcome_type not in ("continuous", "count"):
            raise ConfigError(f"unknown outcome_type {self.outcome_type!r}")
        if (self.leniency_spread is None) == (self.target_F is None):
            raise ConfigError("give exactly one of leniency_spread and target_F")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def K(self) -> int:
        return self.n_cells * (self.examiners_per_cell - 1)

    @property
    def L(self) -> int:
        return self.n_cells

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "SimConfig":
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, types[key])
        if "leniency_spread" in kw and kw["leniency_spread"] is not None and "target_F" not in kw:
            kw["target_F"] = None
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        return cls.from_mapping(read_key_value_file(path))


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if raw.lower() in ("none", "null", ""):
            return None
        if typ in (int, "int"):
            return int(raw)
        if typ in (str, "str"):
            return raw
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


# --------------------------------------------------------------------------
# design calibration


def _slot_positions(J):
    return np.linspace(-1.0, 1.0, J)


def _cell_bases(n_cells):
    if n_cells == 1:
        return np.array([0.5])
    return 0.5 + BASE_SPREAD * np.linspace(-1.0, 1.0, n_cells)


def _max_spread(cfg) -> float:
    b = _cell_bases(cfg.n_cells)
    return float(np.min(np.minimum(b, 1 - b)) - EDGE)


def _examiner_rates(cfg, s):
    # p[c, k]: treatment rate of the k-th examiner in cell c among normal-type cases
    return _cell_bases(cfg.n_cells)[:, None] + s * _slot_positions(cfg.examiners_per_cell)[None, :]


def _leniency(cfg, p):
    d = cfg.defier_fraction
    return (1 - d) * p + d * (1 - p)


def design_strength(cfg: SimConfig, s: float) -> dict:
    """Expected first-stage F and partial R^2 for spread ``s``.

    Uses ``E[sum l~^2] = (n - L) var_k(l)`` for uniform multinomial assignment
    and ``var(nu) = E[l(1 - l)]``.
    """
    ell = _leniency(cfg, _examiner_rates(cfg, s))
    m = float(np.mean(ell.var(axis=1)))
    v = float(np.mean(ell * (1 - ell)))
    EF = (cfg.n - cfg.L) * m / (cfg.K * v) + 1
    ratio = cfg.K * (EF - 1) / cfg.n
    return {"spread": s, "E_F": EF, "R2": ratio / (1 + ratio), "var_nu": v, "var_leniency": m}


def calibrate_spread(cfg: SimConfig) -> float:
    if cfg.leniency_spread is not None:
        s = cfg.leniency_spread
        if not 0 <= s <= _max_spread(cfg):
            raise ConfigError(f"leniency_spread must lie in [0, {_max_spread(cfg):.3f}]")
        return s
    if cfg.target_F < 1:
        raise ConfigError("target_F must be at least 1")
    if cfg.target_F == 1:
        return 0.0
    hi = _max_spread(cfg)
    f = lambda s: design_strength(cfg, s)["E_F"] - cfg.target_F
    if f(hi) < 0:
        raise ConfigError(f"target_F={cfg.target_F} unreachable; maximum is {design_strength(cfg, hi)['E_F']:.2f}")
    return float(optimize.brentq(f, 0.0, hi, xtol=1e-14))


def _error_loading(cfg, p):
    # corr(eps, nu) = r * E[phi(q_k)] / sqrt(E[l(1 - l)]) for eps = r u + sqrt(1 - r^2) e
    ell = _leniency(cfg, p)
    kappa = float(np.mean(stats.norm.pdf(stats.norm.ppf(p)))) / np.sqrt(np.mean(ell * (1 - ell)))
    if kappa == 0:
        return 0.0
    r = cfg.endogeneity / kappa
    if abs(r) > 1:
        raise ConfigError(f"endogeneity {cfg.endogeneity} infeasible; max |corr| is {kappa:.3f} for this design")
    return r


# --------------------------------------------------------------------------
# truth and oracles


@dataclass
class SyntheticTruth:
    """Finite-population truth. ``potential_treatments[i, k]`` is case i's
    treatment under the k-th examiner of its own cell; ``slot[i]`` is the
    examiner actually assigned."""

    potential_treatments: np.ndarray
    slot: np.ndarray
    cell: np.ndarray
    assign_prob: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    beta_star_super: float | None = None
    design: dict = field(default_factory=dict)
    latent: np.ndarray | None = None
    defier_type: np.ndarray | None = None

    def __post_init__(self):
        self.potential_treatments = np.asarray(self.potential_treatments, dtype=float)
        self.slot = np.asarray(self.slot, dtype=np.int64)
        self.cell = np.asarray(self.cell, dtype=np.int64)
        self.assign_prob = np.asarray(self.assign_prob, dtype=float)
        if self.assign_prob.ndim == 1:
            self.assign_prob = np.broadcast_to(self.assign_prob, (self.cell.max() + 1, len(self.assign_prob))).copy()
        self.y0 = np.asarray(self.y0, dtype=float)
        self.y1 = np.asarray(self.y1, dtype=float)

    @property
    def n(self) -> int:
        return len(self.slot)

    @property
    def beta_i(self) -> np.ndarray:
        return self.y1 - self.y0

    @property
    def x(self) -> np.ndarray:
        return self.potential_treatments[np.arange(self.n), self.slot]

    @property
    def y(self) -> np.ndarray:
        return np.where(self.x == 1, self.y1, self.y0)

    def cell_leniency(self) -> np.ndarray:
        """``l(k, c)``: mean potential treatment over the cell's cases."""
        C = self.cell.max() + 1
        counts = np.bincount(self.cell, minlength=C)
        sums = np.zeros((C, self.potential_treatments.shape[1]))
        np.add.at(sums, self.cell, self.potential_treatments)
        return sums / counts[:, None]

    @property
    def lambda_i(self) -> np.ndarray:
        return oracle_lambda(self)

    @property
    def beta_star(self) -> float:
        return oracle_beta_star(self)


def _lambda_forms(truth: SyntheticTruth):
    X = truth.potential_treatments
    ell = truth.cell_leniency()[truth.cell]
    p = truth.assign_prob[truth.cell]
    J = X.shape[1]
    # (a) pairwise sum over k > j
    pairwise = np.zeros(truth.n)
    for k in range(J):
        for j in range(k):
            pairwise += p[:, j] * p[:, k] * (ell[:, k] - ell[:, j]) * (X[:, k] - X[:, j])
    # (b) P(1) P(0) [lbar(1) - lbar(0)]
    P1 = np.sum(p * X, axis=1)
    P0 = np.sum(p * (1 - X), axis=1)
    closed = np.zeros(truth.n)
    ok = (P1 > 0) & (P0 > 0)
    lbar1 = np.sum(p * X * ell, axis=1)[ok] / P1[ok]
    lbar0 = np.sum(p * (1 - X) * ell, axis=1)[ok] / P0[ok]
    closed[ok] = P1[ok] * P0[ok] * (lbar1 - lbar0)
    # (c) cov(x_i, l(k(i), w) | w) over the random assignment
    cov = np.sum(p * X * ell, axis=1) - P1 * np.sum(p * ell, axis=1)
    return pairwise, closed, cov


def oracle_lambda(truth: SyntheticTruth, cfg: SimConfig | None = None, tol: float = 1e-10) -> np.ndarray:
    """Per-case LATE weights, computed three ways that must agree to ``tol``."""
    a, b, c = _lambda_forms(truth)
    err = max(np.max(np.abs(a - b)), np.max(np.abs(a - c)))
    if err > tol:
        raise AssertionError(f"LATE-weight forms disagree by {err:.3g}")
    return a


def _beta_star_forms(truth: SyntheticTruth):
    X = truth.potential_treatments
    C, J = truth.assign_prob.shape
    ell_c = truth.cell_leniency()
    p_c = truth.assign_prob
    n = truth.n
    y_k = truth.y0[:, None] + truth.beta_i[:, None] * X   # y_i under each examiner
    # (a) ratio with the population relative leniency l(k, w) - sum_j p_j l(j, w)
    ldd = ell_c - np.sum(p_c * ell_c, axis=1, keepdims=True)
    w = p_c[truth.cell] * ldd[truth.cell]
    direct = np.sum(w * y_k) / np.sum(w * X)
    # (b) pairwise IV regressions weighted by omega
    counts = np.bincount(truth.cell, minlength=C)
    ey = np.zeros((C, J))
    np.add.at(ey, truth.cell, y_k)
    ey /= counts[:, None]
    num = den = 0.0
    for c in range(C):
        for k in range(J):
            for j in range(k):
                diff = ell_c[c, k] - ell_c[c, j]
                omega = p_c[c, j] * p_c[c, k] * diff**2
                if omega == 0:
                    continue
                b_jk = (ey[c, k] - ey[c, j]) / diff
                num += counts[c] / n * omega * b_jk
                den += counts[c] / n * omega
    pairwise = num / den
    # (c) individual weights
    lam = _lambda_forms(truth)[0]
    individual = np.sum(lam * truth.beta_i) / np.sum(lam)
    return direct, pairwise, individual, den, float(np.mean(lam))


def oracle_beta_star(truth: SyntheticTruth, cfg: SimConfig | None = None, tol: float = 1e-9) -> float:
    """Population leniency-IV estimand, computed three ways that must agree."""
    a, b, c, den, mean_lam = _beta_star_forms(truth)
    err = max(abs(a - b), abs(a - c))
    if not err <= tol * max(1.0, abs(a)):
        raise AssertionError(f"beta* forms disagree by {err:.3g}")
    if abs(den - mean_lam) > 1e-10:
        raise AssertionError("sum of LATE weights does not match the pairwise weight total")
    return float(a)


def _beta_star_super(cfg: SimConfig, p) -> float:
    """Infinite-population estimand for the threshold-crossing model.

    Uses ``E[u 1{u > q}] = phi(q)``; cells have equal size and examiners equal
    assignment probability.
    """
    d, eta = cfg.defier_fraction, cfg.heterogeneity
    q = stats.norm.ppf(1 - p)          # normal types treated when u > q
    qd = stats.norm.ppf(p)             # defier types treated when u > qd
    m = ((1 - d) * (cfg.beta * stats.norm.sf(q) + eta * stats.norm.pdf(q))
         + d * ((cfg.beta + cfg.defier_shift) * stats.norm.sf(qd) + eta * stats.norm.pdf(qd)))
    ell = _leniency(cfg, p)
    ldd = ell - ell.mean(axis=1, keepdims=True)
    return float(np.sum(ldd * m) / np.sum(ldd * ell))


# --------------------------------------------------------------------------
# generation


def _rng(cfg: SimConfig, spawn_key=()):
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=tuple(spawn_key)))


def generate(cfg: SimConfig, spawn_key=()) -> tuple[Dataset, SyntheticTruth]:
    """Draw one population and its realized sample; deterministic in
    ``(cfg.seed, spawn_key)``."""
    rng = _rng(cfg, spawn_key)
    J, C, n = cfg.examiners_per_cell, cfg.n_cells, cfg.n
    s = calibrate_spread(cfg)
    p = _examiner_rates(cfg, s)
    r = _error_loading(cfg, p)
    ell = _leniency(cfg, p)

    cell = np.repeat(np.arange(C), [len(a) for a in np.array_split(np.arange(n), C)])
    slot = rng.integers(0, J, size=n)
    u = rng.standard_normal(n)
    e = rng.standard_normal(n)
    defier = rng.random(n) < cfg.defier_fraction
    gamma = rng.normal(0.0, 1.0, size=C)

    pc = p[cell]
    thresh = np.where(defier[:, None], stats.norm.ppf(pc), stats.norm.ppf(1 - pc))
    X = (u[:, None] > thresh).astype(float)

    sigma = np.ones(n)
    if cfg.heteroskedasticity == "leniency":
        li = ell[cell, slot]
        sigma = np.sqrt(li / ell.mean())
    eps = sigma * (r * u + np.sqrt(1 - r * r) * e)
    beta_i = cfg.beta + cfg.heterogeneity * u + cfg.defier_shift * defier
    base = gamma[cell] + eps
    if cfg.outcome_type == "count":
        y0 = np.maximum(np.round(2.0 + base), 0.0)
        y1 = np.maximum(np.round(2.0 + base + beta_i), 0.0)
    else:
        y0, y1 = base, base + beta_i

    x = X[np.arange(n), slot]
    y = np.where(x == 1, y1, y0)
    t = _slot_positions(J)
    extra = {
        "v_indep": rng.standard_normal(n),
        "v_binary": (u + rng.standard_normal(n) > 0).astype(float),
        "v_imbalanced": cfg.imbalance * t[slot] + rng.standard_normal(n),
        "v_one": np.ones(n),
    }
    ds = Dataset.from_arrays(
        y, x, [f"c{c}_e{k}" for c, k in zip(cell, slot)], [f"c{c}" for c in cell], extra=extra,
    )
    strength = design_strength(cfg, s)
    super_star = _beta_star_super(cfg, p) if cfg.outcome_type == "continuous" else None
    truth = SyntheticTruth(X, slot, cell, np.full((C, J), 1.0 / J), y0, y1, super_star,
                           {**strength, "error_loading": r}, u, defier)
    return ds, truth


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass
class KindSummary:
    kind: str
    reps: int
    mean: float
    bias: float
    sd: float
    mc_se: float
    coverage: float | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MonteCarloSummary:
    config: dict
    reps: int
    target: float
    reruns: int
    kinds: dict
    design: dict
    bias_ratio: dict | None = None
    weak_iv: dict | None = None
    mean_F: float | None = None
    estimates: dict | None = None

    def to_dict(self, include_draws: bool = False) -> dict:
        out = {"config": self.config, "reps": self.reps, "target": self.target, "reruns": self.reruns,
               "design": self.design, "mean_F": self.mean_F,
               "kinds": {k: v.to_dict() for k, v in self.kinds.items()},
               "bias_ratio_tsls_ols": self.bias_ratio, "weak_iv": self.weak_iv}
        if include_draws:
            out["estimates"] = self.estimates
        return out


def _one_rep(cfg, rep, kinds, weak_iv_beta0, z):
    for attempt in range(MAX_RERUNS + 1):
        try:
            ds, truth = generate(cfg, spawn_key=(rep, attempt))
            ds, _ = prune(ds)
            ctx = build_design(ds)
            y, x = ds.outcome, ds.treatment
            row = {}
            for k in kinds:
                res = estimate(ctx, y, x, spec=make_spec(ctx, k))
                if not res.defined:
                    raise DesignError("undefined estimate")
                row[k.value] = (res.beta_hat, res.se_robust)
            fs = res.first_stage.F if res.first_stage else np.nan
            p = None
            if weak_iv_beta0 is not None:
                p = weak_iv_test(ctx, y, x, weak_iv_beta0, invert=False).p_value
            return row, fs, p, attempt
        except DesignError as exc:
            log.info("rep %d attempt %d degenerate (%s); rerunning", rep, attempt, exc)
    raise DesignError(f"replication {rep} stayed degenerate after {MAX_RERUNS} reruns")


def monte_carlo(cfg: SimConfig, reps: int, kinds=("ujive", "tsls", "ols"), *, threads: int = 1,
                weak_iv: bool = False, level: float = 0.95) -> MonteCarloSummary:
    """Repeated draws from ``cfg``; replication ``r`` uses sub-seed ``(seed, r)``
    so results do not depend on ``threads``."""
    if reps < 2:
        raise ConfigError("reps must be at least 2")
    kinds = [Kind.parse(k) for k in kinds]
    z = stats.norm.isf((1 - level) / 2)
    s = calibrate_spread(cfg)
    p = _examiner_rates(cfg, s)
    target = _beta_star_super(cfg, p) if cfg.outcome_type == "continuous" else cfg.beta
    beta0 = target if weak_iv else None
    work = lambda r: _one_rep(cfg, r, kinds, beta0, z)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(reps)))
    else:
        results = [work(r) for r in range(reps)]

    reruns = sum(r[3] for r in results)
    draws = {k.value: np.array([r[0][k.value] for r in results]) for k in kinds}
    summaries = {}
    for k, arr in draws.items():
        b, se = arr[:, 0], arr[:, 1]
        cover = float(np.mean(np.abs(b - target) <= z * se))
        sd = float(np.std(b, ddof=1))
        summaries[k] = KindSummary(k, reps, float(b.mean()), float(b.mean() - target), sd,
                                   sd / np.sqrt(reps), cover)
    design = design_strength(cfg, s)
    design.update(K=cfg.K, L=cfg.L)
    ratio = None
    if "tsls" in summaries and "ols" in summaries and summaries["ols"].bias != 0:
        predicted = 1.0 / ((1.0 - design["R2"]) * design["E_F"])
        empirical = summaries["tsls"].bias / summaries["ols"].bias
        ratio = {"empirical": empirical, "predicted": predicted,
                 "relative_error": abs(empirical - predicted) / predicted}
    wiv = None
    if weak_iv:
        pv = np.array([r[2] for r in results])
        wiv = {"beta0": target, "rejection_rate": float(np.mean(pv < 0.05)),
               "ks_uniform": float(stats.kstest(pv, "uniform").statistic)}
    return MonteCarloSummary(cfg.to_dict(), reps, target, reruns, summaries, design, ratio, wiv,
                             float(np.mean([r[1] for r in results])),
                             {k: v.tolist() for k, v in draws.items()})
