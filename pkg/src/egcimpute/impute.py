"""Single, multiple and online imputation from a fitted copula model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data_model import CATEGORICAL, MixedDataset
from .em_fit import CopulaModel, FitConfig, LatentBounds, e_step, gamma_schedule, online_update
from .marginals import CategoricalMarginal
from .truncnorm import region_from_bounds, trunc_sample

COND_COV_FLOOR = 1e-10


def latent_to_data(model: CopulaModel, Z, variables=None) -> np.ndarray:
    """Map latent vectors (rows of ``Z``) to data values for the given variables."""
    Z = np.atleast_2d(Z)
    variables = range(model.schema.p) if variables is None else variables
    out = np.empty((Z.shape[0], len(variables)))
    for c, j in enumerate(variables):
        blk = model.index_map[j]
        marg = model.marginals[j]
        if isinstance(marg, CategoricalMarginal):
            # np.argmax keeps the lowest index on ties
            out[:, c] = 1 + np.argmax(Z[:, blk.start:blk.stop] + marg.mu, axis=1)
        else:
            out[:, c] = marg.forward(Z[:, blk.start])
    return out


def conditional_latent_mean(dataset: MixedDataset, model: CopulaModel, cfg: FitConfig = FitConfig()):
    """``E[z | x_O]`` for every row (n x d)."""
    model.check_schema(dataset)
    Z, _ = e_step(LatentBounds.from_data(dataset.values, model), model.sigma, cfg)
    return Z


def single_impute(dataset: MixedDataset, model: CopulaModel, cfg: FitConfig = FitConfig()) -> MixedDataset:
    """Impute every missing cell from the conditional latent mean.

    Categorical cells take ``argmax(z_hat + mu)``, ordered cells the
    marginal transform of ``z_hat``; observed cells are returned unchanged.
    """
    model.check_schema(dataset)
    values = dataset.values.copy()
    miss = np.isnan(values)
    if not miss.any():
        return dataset.with_values(values)
    Z = conditional_latent_mean(dataset, model, cfg)
    for j in range(dataset.p):
        rows = np.flatnonzero(miss[:, j])
        if rows.size:
            values[rows, j] = latent_to_data(model, Z[rows], [j])[:, 0]
    return dataset.with_values(values)


@dataclass
class MultipleImputation:
    """``m`` completions of a dataset.

    ``draws[s, c]`` is the value imputed in completion ``s`` for the missing
    cell ``(rows[c], cols[c])``; observed cells are shared by all completions.
    """

    dataset: MixedDataset
    rows: np.ndarray
    cols: np.ndarray
    draws: np.ndarray
    seed: int
    model: CopulaModel | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return int(self.draws.shape[0])

    def completed(self, s: int) -> MixedDataset:
        values = self.dataset.values.copy()
        values[self.rows, self.cols] = self.draws[s]
        return self.dataset.with_values(values)

    def __iter__(self):
        return (self.completed(s) for s in range(self.m))


def _conditional_sampler(sigma, obs, mis):
    """Gain and Cholesky factor of ``z_M | z_O``, covariance floored at 1e-10."""
    if obs.size == 0:
        S = sigma[np.ix_(mis, mis)]
        gain = np.zeros((mis.size, 0))
    else:
        cho = linalg.cho_factor(sigma[np.ix_(obs, obs)])
        gain = linalg.cho_solve(cho, sigma[np.ix_(obs, mis)]).T
        S = sigma[np.ix_(mis, mis)] - gain @ sigma[np.ix_(obs, mis)]
    S = 0.5 * (S + S.T)
    lam, V = np.linalg.eigh(S)
    root = V * np.sqrt(np.maximum(lam, COND_COV_FLOOR))
    return gain, root


def multiple_impute(dataset: MixedDataset, model: CopulaModel, m: int = 20, seed: int = 0,
                    burn_in: int = 100) -> MultipleImputation:
    """Draw ``m`` completions.

    Per row: ``m`` consecutive Gibbs draws of the observed latent coordinates
    from their truncated conditional (after ``burn_in`` sweeps), then the
    missing coordinates from the Gaussian conditional given each draw, mapped
    through the marginals.  Each row uses its own generator seeded by
    ``(seed, row)``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    model.check_schema(dataset)
    values = dataset.values
    miss = np.isnan(values)
    rows, cols = np.nonzero(miss)
    draws = np.empty((m, rows.size))
    if rows.size == 0:
        return MultipleImputation(dataset, rows, cols, draws, seed, model)
    bounds = LatentBounds.from_data(values, model)
    sigma = model.sigma
    d = model.d
    starts = np.searchsorted(rows, np.arange(dataset.n + 1))
    for i in np.unique(rows):
        rng = np.random.default_rng([seed, int(i)])
        region = region_from_bounds(bounds.lb[i], bounds.ub[i], bounds.pivot[i], bounds.observed[i])
        obs = region.dims
        mis = np.flatnonzero(~bounds.observed[i])
        z = np.empty((m, d))
        if obs.size:
            z[:, obs] = trunc_sample(np.zeros(obs.size), sigma[np.ix_(obs, obs)], region, m,
                                     burn_in=burn_in, rng=rng, row=int(i))
        gain, root = _conditional_sampler(sigma, obs, mis)
        eps = rng.standard_normal((m, mis.size))
        z[:, mis] = z[:, obs] @ gain.T + eps @ root.T
        span = slice(starts[i], starts[i + 1])
        draws[:, span] = latent_to_data(model, z, cols[span])
    return MultipleImputation(dataset, rows, cols, draws, seed, model)


@dataclass
class UncertaintySummary:
    """Per missing cell: category probabilities (categorical) or a quantile interval (ordered).

    ``probs[c]`` is None for ordered cells; ``intervals[c]`` is NaN for categorical cells.
    """

    rows: np.ndarray
    cols: np.ndarray
    probs: list
    intervals: np.ndarray
    alpha: float

    def rows_for_csv(self, schema):
        """Long-format records ``(row, column, key, value)``."""
        out = []
        for c, (i, j) in enumerate(zip(self.rows, self.cols)):
            spec = schema.variables[j]
            if self.probs[c] is not None:
                for label, p in zip(spec.labels, self.probs[c]):
                    out.append((int(i), spec.name, f"p[{label}]", float(p)))
            else:
                out.append((int(i), spec.name, "lower", float(self.intervals[c, 0])))
                out.append((int(i), spec.name, "upper", float(self.intervals[c, 1])))
        return out


def summarize_uncertainty(mi: MultipleImputation, alpha: float = 0.05) -> UncertaintySummary:
    """Empirical category frequencies and ``(alpha/2, 1 - alpha/2)`` quantile intervals."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    schema = mi.dataset.schema
    probs = []
    intervals = np.full((mi.rows.size, 2), np.nan)
    for c, j in enumerate(mi.cols):
        spec = schema.variables[j]
        col = mi.draws[:, c]
        if spec.kind == CATEGORICAL:
            probs.append(np.bincount(col.astype(int) - 1, minlength=spec.n_categories) / mi.m)
        else:
            probs.append(None)
            intervals[c] = np.quantile(col, [alpha / 2, 1 - alpha / 2])
    return UncertaintySummary(mi.rows, mi.cols, probs, intervals, alpha)


def category_probabilities(mi: MultipleImputation, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows and probability vectors of the missing cells of categorical variable ``j``."""
    sel = np.flatnonzero(mi.cols == j)
    K = mi.dataset.schema.variables[j].n_categories
    P = np.stack([np.bincount(mi.draws[:, c].astype(int) - 1, minlength=K) for c in sel]) / mi.m \
        if sel.size else np.zeros((0, K))
    return mi.rows[sel], P


def online_impute(batches, model: CopulaModel, gamma=None, window: int = 200,
                  cfg: FitConfig = FitConfig(), update_marginals: bool = True):
    """Impute a stream of batches, updating the model after each one.

    Batch ``t`` (1-based) is imputed with the model fitted on batches before
    it, then absorbed with step ``gamma(t)`` (default ``c / (t + c)`` with
    ``c = cfg.lr_c``).  Yields ``(imputed_batch, model_after_update)``.
    """
    if gamma is None:
        def gamma(t):
            return gamma_schedule(t, cfg.lr_c)
    t = 0
    for batch in batches:
        if batch.n == 0:
            yield batch, model
            continue
        t += 1
        imputed = single_impute(batch, model, cfg)
        model = online_update(model, batch, gamma(t), window, cfg, update_marginals)
        yield imputed, model
