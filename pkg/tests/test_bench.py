import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from egcimpute.bench import (MaskSpec, baseline_impute, cross_entropy, evaluate, generate_synthetic,
                             marginal_fit_diagnostic, mask, run_cell, terciles, true_category_conditionals)
from egcimpute.data_model import MixedDataset, VariableSchema, VariableSpec
from egcimpute.em_fit import CopulaModel, FitConfig
from egcimpute.marginals import CategoricalMarginal


def binom_ok(k, n, p, z=3.0):
    return abs(k - n * p) <= z * np.sqrt(n * p * (1 - p)) + 1


# generator

def test_latent_dimension():
    data, truth = generate_synthetic(10, 0, 6, 0)
    assert data.p == 10 and truth.d == 10
    data, truth = generate_synthetic(2000, 5, 6, 0)
    assert data.p == 15 and truth.d == 40


def test_generator_deterministic():
    a, ta = generate_synthetic(200, 2, 3, 7)
    b, tb = generate_synthetic(200, 2, 3, 7)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(ta.sigma, tb.sigma)
    c, _ = generate_synthetic(200, 2, 3, 8)
    assert not np.array_equal(a.values, c.values)


@pytest.mark.parametrize("mu_scale", [0.0, 1.0])
def test_category_frequencies_match_locations(mu_scale):
    data, truth = generate_synthetic(20000, 3, 6, 1, mu_scale=mu_scale)
    z = np.random.default_rng(0).standard_normal((400_000, 6))
    for j in range(10, 13):
        mu = truth.marginals[j].mu
        assert mu[0] == 0.0
        p = np.bincount(np.argmax(z + mu, axis=1), minlength=6) / len(z)
        freq = np.bincount(data.values[:, j].astype(int) - 1, minlength=6) / data.n
        se = np.sqrt(p * (1 - p) / data.n)
        assert (np.abs(freq - p) <= 4 * se + 1e-3).all()


def test_generated_domains_and_truth():
    data, truth = generate_synthetic(3000, 2, 4, 2, cutoffs="uniform", mu_scale=1.0)
    X = data.values
    assert (X[:, :5] > 0).all()
    assert set(np.unique(X[:, 5:10])) <= {1, 2, 3, 4, 5}
    assert set(np.unique(X[:, 10:])) <= {1, 2, 3, 4}
    np.testing.assert_allclose(np.diag(truth.sigma), 1.0)
    assert np.linalg.eigvalsh(truth.sigma).min() > 0
    # continuous columns are exponential with the recorded scale
    scale = truth.info["generator"]["exp_scale"]
    assert stats.kstest(X[:, 0], "expon", args=(0, scale)).pvalue > 1e-3


def test_generator_arguments():
    with pytest.raises(ValueError):
        generate_synthetic(0, 1, 3)
    with pytest.raises(ValueError):
        generate_synthetic(5, -1, 3)
    with pytest.raises(ValueError):
        generate_synthetic(5, 1, 3, cutoffs="odd")


# masking

def test_zero_ratio_masks_nothing():
    data, _ = generate_synthetic(100, 1, 3, 0)
    masked, hidden = mask(data, MaskSpec("MCAR", 0.0, 0))
    assert not hidden.any()
    np.testing.assert_array_equal(masked.values, data.values)


def test_mcar_fraction():
    data, _ = generate_synthetic(10_000, 0, 3, 0)
    _, hidden = mask(data, MaskSpec("MCAR", 0.3, 1))
    assert hidden.size == 10 ** 5
    assert abs(hidden.mean() - 0.3) < 0.005


def test_mnar_tercile_fractions():
    data, _ = generate_synthetic(30_000, 0, 3, 0, p_ord=0)
    _, hidden = mask(data, MaskSpec("MNAR", 0.3, 2))
    t = terciles(data.values[:, 0], np.random.default_rng(0))
    for k, p in enumerate((0.4, 0.3, 0.2)):
        sel = hidden[t == k, 0]
        assert binom_ok(sel.sum(), sel.size, p)


def test_mar_keeps_a_third_and_follows_anchor():
    data, _ = generate_synthetic(30_000, 0, 3, 0, p_ord=1)
    _, hidden = mask(data, MaskSpec("MAR", 0.3, 3))
    never = np.flatnonzero(~hidden.any(axis=0))
    assert len(never) == 2
    masked_cols = np.flatnonzero(hidden.any(axis=0))
    for j in masked_cols:
        # the anchor is the never-masked column whose terciles explain the pattern
        fits = []
        for a in never:
            t = terciles(data.values[:, a], np.random.default_rng(0))
            rates = [hidden[t == k, j].mean() for k in range(3)]
            fits.append(np.abs(np.array(rates) - [0.55, 0.45, 0.35]).max())
        assert min(fits) < 0.03


def test_only_observed_cells_masked():
    data, _ = generate_synthetic(500, 1, 3, 0)
    values = data.values.copy()
    values[::3, 2] = np.nan
    partial = data.with_values(values)
    for mech in ("MCAR", "MAR", "MNAR"):
        masked, hidden = mask(partial, MaskSpec(mech, 0.3, 4))
        assert not (hidden & np.isnan(values)).any()
        np.testing.assert_array_equal(np.isnan(masked.values), np.isnan(values) | hidden)


@pytest.mark.parametrize("mech,ratio", [("MNAR", 0.95), ("MAR", 0.7), ("MNAR", 0.05), ("MCAR", 1.0),
                                        ("MCAR", -0.1), ("XYZ", 0.3)])
def test_invalid_mask_specs(mech, ratio):
    with pytest.raises(ValueError):
        MaskSpec(mech, ratio, 0)


def test_mask_deterministic():
    data, _ = generate_synthetic(300, 1, 3, 0)
    a = mask(data, MaskSpec("MAR", 0.3, 5))[1]
    np.testing.assert_array_equal(a, mask(data, MaskSpec("MAR", 0.3, 5))[1])


# baseline and metrics

def mixed(values):
    schema = VariableSchema((VariableSpec.categorical("c", 3), VariableSpec.ordinal("o", 4),
                             VariableSpec.continuous("x")))
    return MixedDataset(schema, values)


def test_baseline_rules():
    ds = mixed([[1, 1, 5.0], [1, 2, 1.0], [2, 3, 2.0], [np.nan, 4, 7.0], [3, np.nan, np.nan]])
    out = baseline_impute(ds).values
    assert out[3, 0] == 1
    assert out[4, 1] == 2  # lower middle of 1,2,3,4
    assert out[4, 2] == 2.0  # lower middle of 1,2,5,7
    tie = mixed([[2, 1, 1.0], [1, 1, 1.0], [np.nan, 1, 1.0]])
    assert baseline_impute(tie).values[2, 0] == 1


def test_baseline_fully_missing():
    with pytest.raises(ValueError, match="'x'"):
        baseline_impute(mixed([[1, 1, np.nan], [2, 2, np.nan]]))


def test_evaluate_identities():
    data, _ = generate_synthetic(300, 2, 3, 1)
    masked, hidden = mask(data, MaskSpec("MCAR", 0.3, 1))
    base = baseline_impute(masked)
    m = evaluate(data, data, hidden, base)
    assert m.me == 0 and m.mae_continuous == 0 and m.mae_ordinal == 0
    m = evaluate(data, base, hidden, base)
    assert m.sme == pytest.approx(1.0) and m.smae == pytest.approx(1.0)
    assert 0 <= evaluate(data, base, hidden).me <= 1


def test_evaluate_hand_values():
    truth = mixed([[1, 1, 1.0], [2, 2, 2.0], [3, 3, 3.0]])
    imputed = mixed([[1, 2, 1.5], [3, 2, 2.0], [3, 1, 3.0]])
    hidden = np.ones((3, 3), bool)
    m = evaluate(truth, imputed, hidden)
    assert m.me == pytest.approx(1 / 3)
    assert m.mae_ordinal == pytest.approx(1.0)
    assert m.mae_continuous == pytest.approx(0.5 / 3)


def test_evaluate_zero_baseline_warns():
    truth = mixed([[1, 1, 1.0], [1, 2, 2.0]])
    hidden = np.ones((2, 3), bool)
    with pytest.warns(RuntimeWarning, match="'c'|c"):
        m = evaluate(truth, truth, hidden, truth)
    assert np.isnan(m.sme)


def test_evaluate_shape_mismatch():
    a = mixed([[1, 1, 1.0]])
    b = mixed([[1, 1, 1.0], [2, 2, 2.0]])
    with pytest.raises(ValueError, match="shape"):
        evaluate(a, b, np.ones((1, 3), bool))


def test_metrics_row_order_invariant():
    data, _ = generate_synthetic(300, 2, 3, 1)
    masked, hidden = mask(data, MaskSpec("MCAR", 0.3, 1))
    base = baseline_impute(masked)
    imputed = base.with_values(np.where(hidden, np.roll(data.values, 1, axis=0), data.values))
    perm = np.random.default_rng(0).permutation(data.n)
    a = evaluate(data, imputed, hidden, base)
    b = evaluate(data.with_values(data.values[perm]), imputed.with_values(imputed.values[perm]), hidden[perm],
                 base.with_values(base.values[perm]))
    for f in ("me", "mae_continuous", "mae_ordinal", "sme", "smae"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy(np.full((4, 6), 1 / 6), np.eye(6)[:4]) == pytest.approx(np.log(6))
    q = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    entropy = -np.sum(q * np.log(np.clip(q, 1e-300, None)), axis=1).mean()
    assert cross_entropy(q, q) == pytest.approx(entropy)
    assert np.isfinite(cross_entropy([[1.0, 0.0]], [[0.0, 1.0]]))


@given(st.integers(0, 1000))
def test_cross_entropy_bounded_below_by_entropy(seed):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.ones(5), size=3)
    p = rng.dirichlet(np.ones(5), size=3)
    assert cross_entropy(p, q) >= cross_entropy(q, q) - 1e-12


def test_true_conditionals_without_information():
    data, truth = generate_synthetic(50, 1, 4, 0, p_cont=2, p_ord=0, mu_scale=1.0)
    values = data.values.copy()
    values[:, :2] = np.nan
    q = true_category_conditionals(data.with_values(values), truth, 2, [0, 1], samples=200_000)
    z = np.random.default_rng(1).standard_normal((200_000, 4))
    p = np.bincount(np.argmax(z + truth.marginals[2].mu, axis=1), minlength=4) / 200_000
    np.testing.assert_allclose(q[0], p, atol=0.006)
    np.testing.assert_allclose(q.sum(axis=1), 1.0)


def test_diagnostic_uniform_column():
    schema = VariableSchema((VariableSpec.categorical("c", 6),))
    ds = MixedDataset(schema, np.tile(np.arange(1, 7), 100)[:, None])
    model = CopulaModel(schema, [CategoricalMarginal(np.zeros(6))], np.eye(6))
    pairs = marginal_fit_diagnostic(model, ds)
    assert len(pairs) == 6
    for _, _, true, est in pairs:
        assert true == pytest.approx(1 / 6) and abs(est - 1 / 6) < 0.015


def test_diagnostic_after_fit():
    _, extras = run_cell(1000, 2, 5, MaskSpec("MCAR", 0.3, 0), 0, FitConfig(max_iter=3, loglik_samples=0))
    err = np.array([abs(t - e) for _, _, t, e in extras["diagnostic"]])
    # 10^4 fresh draws: standard error at most 0.005
    assert err.max() < 0.02


def test_oracle_model_is_a_floor():
    gaps = []
    for seed in range(10):
        rows, _ = run_cell(600, 1, 3, MaskSpec("MCAR", 0.3, seed), seed, FitConfig(max_iter=20, loglik_samples=0),
                           with_oracle=True)
        err = {(r["method"], r["class"]): r["error"] for r in rows}
        gaps.append(err[("EGC", "ordinal")] - err[("oracle", "ordinal")]
                    + err[("EGC", "continuous")] - err[("oracle", "continuous")])
    assert np.mean(gaps) >= 0
