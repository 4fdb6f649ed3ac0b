import numpy as np
import pytest

from egcimpute.bench import MaskSpec, generate_synthetic, mask
from egcimpute.data_model import MixedDataset, VariableSchema, VariableSpec
from egcimpute.em_fit import CopulaModel, FitConfig, fit
from egcimpute.impute import (conditional_latent_mean, multiple_impute, online_impute, single_impute,
                              summarize_uncertainty)
from egcimpute.marginals import CategoricalMarginal, fit_ordered_marginal
from egcimpute.truncnorm import region_from_bounds, trunc_sample
from egcimpute.em_fit import LatentBounds


@pytest.fixture(scope="module")
def fitted():
    data, truth = generate_synthetic(400, 2, 4, 21, p_cont=3, p_ord=3)
    masked, hidden = mask(data, MaskSpec("MCAR", 0.3, 21))
    model = fit(masked, FitConfig(max_iter=15, loglik_samples=0))
    return data, masked, hidden, model


def test_observed_rows_unchanged(fitted):
    _, masked, _, model = fitted
    out = single_impute(masked, model)
    obs = ~np.isnan(masked.values)
    np.testing.assert_array_equal(out.values[obs], masked.values[obs])
    assert not np.isnan(out.values).any()


def test_fully_observed_dataset_passes_through(fitted):
    data, _, _, model = fitted
    np.testing.assert_array_equal(single_impute(data, model).values, data.values)


def test_missing_row_uses_unconditional_centre(fitted):
    _, masked, _, model = fitted
    row = MixedDataset(masked.schema, np.full((1, masked.p), np.nan))
    out = single_impute(row, model).values[0]
    for j, spec in enumerate(masked.schema.variables):
        marg = model.marginals[j]
        if spec.kind == "categorical":
            assert out[j] == 1 + np.argmax(marg.mu)
        else:
            assert out[j] == marg.forward(np.zeros(1))[0]


def test_single_impute_deterministic(fitted):
    _, masked, _, model = fitted
    np.testing.assert_array_equal(single_impute(masked, model).values, single_impute(masked, model).values)


def test_domains_respected(fitted):
    _, masked, _, model = fitted
    for completed in [single_impute(masked, model)] + list(multiple_impute(masked, model, m=3, seed=1)):
        V = completed.values
        for j, spec in enumerate(masked.schema.variables):
            col = masked.values[:, j]
            col = col[~np.isnan(col)]
            if spec.kind == "continuous":
                assert col.min() <= V[:, j].min() and V[:, j].max() <= col.max()
            else:
                top = spec.levels if spec.kind == "ordinal" else spec.n_categories
                assert set(np.unique(V[:, j])) <= set(range(1, top + 1))


def test_multiple_imputation_shares_observed_cells(fitted):
    _, masked, _, model = fitted
    mi = multiple_impute(masked, model, m=4, seed=3)
    obs = ~np.isnan(masked.values)
    for completed in mi:
        np.testing.assert_array_equal(completed.values[obs], masked.values[obs])
        assert not np.isnan(completed.values).any()
    again = multiple_impute(masked, model, m=4, seed=3)
    np.testing.assert_array_equal(mi.draws, again.draws)
    assert not np.array_equal(mi.draws, multiple_impute(masked, model, m=4, seed=4).draws)


def test_single_draw_without_missing(fitted):
    data, _, _, model = fitted
    mi = multiple_impute(data, model, m=1)
    np.testing.assert_array_equal(mi.completed(0).values, data.values)


def test_independent_categorical_draws_follow_marginal():
    schema = VariableSchema((VariableSpec.categorical("c", 4), VariableSpec.continuous("x")))
    mu = np.array([0.0, 0.5, -0.4, 0.2])
    margs = [CategoricalMarginal(mu), fit_ordered_marginal(np.arange(10.0), "continuous")]
    model = CopulaModel(schema, margs, np.eye(5))
    ds = MixedDataset(schema, [[np.nan, 3.0]])
    mi = multiple_impute(ds, model, m=10_000, seed=0)
    freq = np.bincount(mi.draws[:, 0].astype(int) - 1, minlength=4) / 10_000
    z = np.random.default_rng(9).standard_normal((10 ** 6, 4))
    oracle = np.bincount(np.argmax(z + mu, axis=1), minlength=4) / 10 ** 6
    np.testing.assert_allclose(freq, oracle, atol=0.02)


def test_latent_draws_average_to_conditional_mean(fitted):
    # the observed-coordinate draws behind the imputations average to the E-step mean
    _, masked, _, model = fitted
    miss = np.isnan(masked.values)
    i = int(np.flatnonzero(miss.any(axis=1) & ((~miss).sum(axis=1) > 3))[0])
    row = masked.subset(slice(i, i + 1))
    b = LatentBounds.from_data(row.values, model)
    region = region_from_bounds(b.lb[0], b.ub[0], b.pivot[0], b.observed[0])
    obs = region.dims
    draws = trunc_sample(np.zeros(obs.size), model.sigma[np.ix_(obs, obs)], region, 40_000,
                         rng=np.random.default_rng(5))
    mis = np.flatnonzero(~b.observed[0])
    gain = np.linalg.solve(model.sigma[np.ix_(obs, obs)], model.sigma[np.ix_(obs, mis)]).T
    zm = draws @ gain.T
    # batch means absorb the chain's autocorrelation
    batches = zm.reshape(40, 1000, -1).mean(axis=1)
    se = batches.std(axis=0, ddof=1) / np.sqrt(40)
    exact = conditional_latent_mean(row, model, FitConfig(method="ep"))[0]
    assert (np.abs(zm.mean(axis=0) - exact[mis]) <= 3 * se + 0.01).all()


def test_uncertainty_summary():
    schema = VariableSchema((VariableSpec.categorical("c", 3), VariableSpec.continuous("x")))
    margs = [CategoricalMarginal(np.array([0.0, 3.0, -3.0])), fit_ordered_marginal(np.arange(20.0), "continuous")]
    model = CopulaModel(schema, margs, np.eye(4))
    ds = MixedDataset(schema, [[np.nan, np.nan]])
    mi = multiple_impute(ds, model, m=50, seed=2)
    mi.draws[:, 0] = 2
    s = summarize_uncertainty(mi, alpha=1.0)
    np.testing.assert_array_equal(s.probs[0], [0, 1, 0])
    assert s.intervals[1, 0] == s.intervals[1, 1] == np.median(mi.draws[:, 1])
    s = summarize_uncertainty(mi, alpha=0.1)
    assert 0 <= s.intervals[1, 0] <= s.intervals[1, 1] <= 19
    assert np.isnan(s.intervals[0]).all()


def test_summary_argmax_agrees_with_single_imputation():
    # standard normal category locations, as in the cross-entropy design
    data, _ = generate_synthetic(2000, 1, 6, 0, p_cont=5, p_ord=0, mu_scale=1.0)
    masked, _ = mask(data, MaskSpec("MCAR", 0.3, 0))
    model = fit(masked, FitConfig(loglik_samples=0))
    mi = multiple_impute(masked, model, m=100, seed=0)
    single = single_impute(masked, model).values
    s = summarize_uncertainty(mi)
    agree = [np.argmax(p) + 1 == single[i, j] for p, i, j in zip(s.probs, s.rows, s.cols) if p is not None]
    for p in s.probs:
        if p is not None:
            assert p.sum() == pytest.approx(1.0)
    assert np.mean(agree) >= 0.9


def test_online_first_batch_uses_prior_model(fitted):
    _, masked, _, model = fitted
    (imputed, updated), = list(online_impute([masked], model))
    np.testing.assert_array_equal(imputed.values, single_impute(masked, model).values)
    assert updated is not model


def test_online_empty_batch(fitted):
    _, masked, _, model = fitted
    empty = masked.subset(slice(0, 0))
    (imputed, same), = list(online_impute([empty], model))
    assert imputed.n == 0 and same is model


def test_online_ordering(fitted):
    _, masked, _, model = fitted
    batches = [masked.subset(slice(k, k + 100)) for k in range(0, 400, 100)]
    models = [model]
    outs = []
    for imputed, m in online_impute(batches, model, window=100):
        outs.append(imputed)
        models.append(m)
    for t, b in enumerate(batches):
        np.testing.assert_array_equal(outs[t].values, single_impute(b, models[t]).values)


def test_row_order_permutation(fitted):
    _, masked, _, model = fitted
    perm = np.random.default_rng(0).permutation(masked.n)
    a = single_impute(masked, model).values[perm]
    b = single_impute(masked.with_values(masked.values[perm]), model).values
    np.testing.assert_allclose(a, b)
