import numpy as np
import pytest

from conftest import pruned_context, random_dataset
from oracles import dataset_parts, dense_beta, dense_G, dummies, hat

from leniency_iv import DesignContext, bias_rules, build_design, estimate, estimate_many, first_stage
from leniency_iv.errors import FEJIVUnavailableError, InsufficientDFError
from leniency_iv.estimators import result_dict

KINDS = ["ols", "tsls", "ujive", "b2sls", "jive", "ijive"]


@pytest.mark.parametrize("kind", KINDS + ["fejiv"])
def test_hand_dataset_matches_dense(hand8, kind):
    ctx = build_design(hand8)
    M, H, _ = dataset_parts(hand8)
    y, x = hand8.outcome, hand8.treatment
    if kind == "fejiv":
        # two cases per examiner make the Hadamard system singular
        with pytest.raises(FEJIVUnavailableError):
            estimate(ctx, y, x, kind)
        return
    res = estimate(ctx, y, x, kind)
    assert res.beta_hat == pytest.approx(dense_beta(kind, M, H, y, x, ctx.L), abs=1e-10)
    assert res.beta_hat == res.numerator / res.denominator


@pytest.mark.parametrize("kind", KINDS + ["fejiv"])
def test_x_equals_y(rng, kind):
    ds = random_dataset(rng, per_examiner=(3, 5))
    ds, ctx, _ = pruned_context(ds)
    res = estimate(ctx, ds.treatment, ds.treatment, kind)
    assert res.beta_hat == 1.0


def test_affine_instrument_invariance(rng):
    n = 40
    z = (rng.random(n) < 0.5).astype(float)
    x = z * 0.4 + rng.random(n)
    y = 2 * x + rng.standard_normal(n)
    W = np.ones((n, 1))
    base = estimate(DesignContext(z[:, None], W), y, x, "tsls").beta_hat
    shifted = estimate(DesignContext((3.0 - 2.5 * z)[:, None], W), y, x, "tsls").beta_hat
    assert shifted == pytest.approx(base, abs=1e-10)


def test_two_step_equals_tsls(rng):
    ds = random_dataset(rng, n_cells=4, crossed=True)
    ds, ctx, _ = pruned_context(ds)
    y, x = ds.outcome, ds.treatment
    W = np.hstack([dummies(ds.fe[:, j]) for j in range(ds.fe.shape[1])])
    Q = np.hstack([dummies(ds.examiner), W])
    xhat = hat(Q) @ x
    M = np.eye(ds.n) - hat(W)
    two_step = (xhat @ M @ y) / (xhat @ M @ x)
    assert estimate(ctx, y, x, "tsls").beta_hat == pytest.approx(two_step, abs=1e-8)


def test_ujive_equals_jive_without_controls(rng):
    codes = np.repeat(np.arange(6), 5)
    ctx = DesignContext(dummies(codes), None)
    x = (rng.random(30) < 0.3 + 0.1 * codes).astype(float)
    y = x + rng.standard_normal(30)
    a = estimate(ctx, y, x, "ujive").beta_hat
    b = estimate(ctx, y, x, "jive").beta_hat
    assert a == pytest.approx(b, abs=1e-10)


def test_b2sls_closed_form(rng):
    ds = random_dataset(rng, n_cells=3)
    ds, ctx, _ = pruned_context(ds)
    y, x = ds.outcome, ds.treatment
    M, H, _ = dataset_parts(ds)
    n, K, L = ctx.n, ctx.K, ctx.L
    num = y @ H @ x - K * (y @ (M - H) @ x) / (n - K - L)
    den = x @ H @ x - K * (x @ (M - H) @ x) / (n - K - L)
    res = estimate(ctx, y, x, "b2sls")
    assert res.numerator == pytest.approx(num, abs=1e-10)
    assert res.denominator == pytest.approx(den, abs=1e-10)


def test_zero_denominator_is_undefined(hand8):
    ctx = build_design(hand8)
    x = np.array([1.0] * 4 + [0.0] * 4)    # a cell indicator, annihilated by every G
    res = estimate(ctx, hand8.outcome, x, "ujive")
    assert res.denominator == pytest.approx(0, abs=1e-12)
    if res.denominator == 0:
        assert res.beta_hat is None and not res.defined
    assert res.first_stage is not None and res.first_stage.F == pytest.approx(0, abs=1e-12)


def test_first_stage_values(rng):
    ds = random_dataset(rng, n_cells=3)
    ds, ctx, _ = pruned_context(ds)
    x = ds.treatment
    M, H, _ = dataset_parts(ds)
    fs = first_stage(ctx, x)
    df = ctx.n - ctx.K - ctx.L
    s2 = x @ (M - H) @ x / df
    assert fs.F == pytest.approx(x @ H @ x / (ctx.K * s2), rel=1e-10)
    assert fs.partial_R2 == pytest.approx(x @ H @ x / (x @ M @ x), rel=1e-10)
    assert fs.leniency_ss == pytest.approx(x @ H @ x, rel=1e-10)
    assert fs.df == df and 0 <= fs.partial_R2 < 1 and fs.F >= 0


def test_first_stage_perfect_fit(hand8):
    ctx = build_design(hand8)
    x = (np.asarray(hand8.examiner) == 1).astype(float)   # examiner b's dummy
    fs = first_stage(ctx, x)
    assert fs.partial_R2 == pytest.approx(1.0, abs=1e-12)
    assert fs.var_nu_hat == pytest.approx(0.0, abs=1e-12)


def test_insufficient_df():
    Z = dummies(np.arange(3))[:, 1:]
    ctx = DesignContext(Z, np.ones((3, 1)), check_leverage=False)
    assert ctx.df == 0
    with pytest.raises(InsufficientDFError):
        first_stage(ctx, np.array([0.0, 1.0, 1.0]))
    res = estimate(ctx, np.arange(3.0), np.array([0.0, 1.0, 1.0]), "tsls")
    assert res.first_stage is None


def test_bias_rules_examples():
    assert bias_rules(10, 0.0, 100, 20)["tsls_rel_bias"] == pytest.approx(0.10)
    assert bias_rules(1 + 1e-9, 0.0, 100, 20)["tsls_rel_bias"] == pytest.approx(1.0, rel=1e-6)
    assert bias_rules(5, 0.0, 100, 50)["jive_rel_bias_vs_tsls"] == pytest.approx(-5 * 50 / (4 * 100 - 50))
    assert bias_rules(5, 0.0, 100, 50)["jive_rel_bias_vs_tsls"] == pytest.approx(-0.7143, abs=1e-4)
    assert bias_rules(2, 0.2, 50, 50)["jive_rel_bias_vs_tsls"] is None
    with pytest.raises(ValueError):
        bias_rules(5, 1.0, 10, 10)


def test_estimate_many_and_serialization(hand8):
    ctx = build_design(hand8)
    results = estimate_many(ctx, hand8.outcome, hand8.treatment, ["ujive", "2sls", "ols"])
    assert [r.kind.value for r in results] == ["ujive", "tsls", "ols"]
    d = result_dict(results[0])
    for key in ("estimator", "beta", "se_robust", "F", "partial_R2", "n", "K", "L"):
        assert key in d
    assert all(r.se_robust is not None and r.se_robust >= 0 for r in results)


def test_ols_is_within_slope(rng):
    ds = random_dataset(rng, n_cells=3, crossed=True)
    ds, ctx, _ = pruned_context(ds)
    W = np.hstack([dummies(ds.fe[:, j]) for j in range(ds.fe.shape[1])])
    coef = np.linalg.lstsq(np.column_stack([ds.treatment, W]), ds.outcome, rcond=None)[0]
    assert estimate(ctx, ds.outcome, ds.treatment, "ols").beta_hat == pytest.approx(coef[0], abs=1e-10)
