"""Marginal transformations: empirical quantiles for ordered variables and
Gaussian-Max location vectors for categorical variables."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special
from scipy.stats import qmc

from .data_model import CATEGORICAL, CONTINUOUS, ORDINAL, VariableSpec


class RareCategoryError(ValueError):
    pass


@dataclass(frozen=True)
class MarginalFitConfig:
    """Settings for the softmax Monte Carlo approximation of argmax probabilities.

    Attributes
    ----------
    n_samples : int
        Size of the fixed latent sample set used for every evaluation in one solve.
    beta : float
        Inverse temperature of the softmax.
    seed : int
        Seed of the sample set.
    tol : float
        Target max absolute residual of the frequency equations.
    qmc : bool
        Draw the sample set from a scrambled Sobol sequence instead of i.i.d. normals.
    rare_threshold : float
        Categories with empirical probability below this are rare.
    merge_rare : bool
        Merge rare categories into the most frequent one instead of raising.
    """

    n_samples: int = 5000
    beta: float = 1000.0
    seed: int = 0
    tol: float = 1e-6
    qmc: bool = True
    rare_threshold: float = 1e-4
    merge_rare: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True, eq=False)
class OrderedMarginal:
    """Empirical marginal of a continuous or ordinal variable.

    The CDF is the empirical CDF scaled by n/(n+1), which keeps the latent
    values ``ndtri(F(x))`` finite.
    """

    kind: str
    sample: np.ndarray | None = None
    counts: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.sample.size if self.kind == CONTINUOUS else self.counts.sum())

    @property
    def levels(self) -> int:
        return int(self.counts.size)

    @property
    def cutoffs(self) -> np.ndarray:
        """Latent thresholds s_1..s_{L-1} of an ordinal.

        Leading unobserved levels get half an observation so every cutoff is finite.
        """
        cum = np.maximum(np.cumsum(self.counts)[:-1], 0.5)
        return special.ndtri(cum / (self.n + 1.0))

    @property
    def is_degenerate(self) -> bool:
        if self.kind == CONTINUOUS:
            return self.sample[0] == self.sample[-1]
        return np.count_nonzero(self.counts) <= 1

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == CONTINUOUS:
            below = np.searchsorted(self.sample, x, side="right")
        else:
            cum = np.concatenate([[0], np.cumsum(self.counts)])
            level = np.clip(np.floor(x), 0, self.levels).astype(int)
            below = cum[level]
        return below / (self.n + 1.0)

    def forward(self, z):
        """Map latent values to the data scale (``F^-1 o Phi``)."""
        z = np.asarray(z, dtype=float)
        if self.kind == ORDINAL:
            return 1.0 + np.searchsorted(self.cutoffs, z, side="left")
        # Weibull plotting positions: the inverse of the n/(n+1) scaled ECDF
        pos = (self.n + 1.0) * special.ndtr(z) - 1.0
        return np.interp(pos, np.arange(self.n), self.sample)

    def inverse(self, x):
        """Latent interval ``(lb, ub)`` for data values ``x``.

        Continuous values map to a point (``lb == ub``); a value below the
        observed range takes the nearest rank.  For ordinal level ``l`` the
        interval is ``(s_{l-1}, s_l]``.
        """
        x = np.asarray(x, dtype=float)
        if self.kind == CONTINUOUS:
            if self.is_degenerate:
                return np.full(x.shape, -np.inf), np.full(x.shape, np.inf)
            below = np.maximum(np.searchsorted(self.sample, x, side="right"), 1)
            z = special.ndtri(below / (self.n + 1.0))
            return z, z.copy()
        bounds = np.concatenate([[-np.inf], self.cutoffs, [np.inf]])
        level = np.asarray(x, dtype=int)
        return bounds[level - 1], bounds[level]

    def to_dict(self) -> dict:
        if self.kind == CONTINUOUS:
            return {"kind": CONTINUOUS, "sample": [float(v) for v in self.sample]}
        return {"kind": ORDINAL, "counts": [int(c) for c in self.counts]}


@dataclass(frozen=True, eq=False)
class CategoricalMarginal:
    """Gaussian-Max location vector; ``mu[0] == 0`` unless category 1 was merged away.

    Merged (rare) categories carry ``-inf`` and are never produced by argmax.
    """

    mu: np.ndarray
    freqs: np.ndarray | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("mu must be a vector with at least 2 entries")
        if np.isnan(mu).any() or np.isposinf(mu).any():
            raise ValueError("mu entries must be finite (or -inf for merged categories)")
        object.__setattr__(self, "mu", mu)

    @property
    def n_categories(self) -> int:
        return int(self.mu.size)

    @property
    def merged(self) -> np.ndarray:
        return np.isneginf(self.mu)

    def canonical_code(self, codes):
        """Category code used for the latent region: merged codes go to the dominant category."""
        codes = np.asarray(codes, dtype=int)
        if not self.merged.any():
            return codes
        target = int(np.argmax(self.freqs if self.freqs is not None else self.mu)) + 1
        return np.where(self.merged[codes - 1], target, codes)

    def to_dict(self) -> dict:
        out = {"kind": CATEGORICAL, "mu": [float(v) for v in self.mu]}
        if self.freqs is not None:
            out["freqs"] = [float(v) for v in self.freqs]
        return out


def marginal_from_dict(data: dict):
    if data["kind"] == CATEGORICAL:
        freqs = data.get("freqs")
        return CategoricalMarginal(np.array(data["mu"], dtype=float),
                                   None if freqs is None else np.array(freqs, dtype=float))
    if data["kind"] == CONTINUOUS:
        return OrderedMarginal(CONTINUOUS, sample=np.array(data["sample"], dtype=float))
    return OrderedMarginal(ORDINAL, counts=np.array(data["counts"], dtype=np.int64))


def fit_ordered_marginal(values, kind: str, levels: int | None = None) -> OrderedMarginal:
    """Empirical marginal from the observed (non-missing) values of one column."""
    values = np.asarray(values, dtype=float)
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise ValueError("no observations for variable")
    if kind == CONTINUOUS:
        sample = np.sort(values)
        sample.setflags(write=False)
        return OrderedMarginal(CONTINUOUS, sample=sample)
    if kind != ORDINAL:
        raise ValueError(f"not an ordered kind: {kind!r}")
    if levels is None:
        levels = int(values.max())
    if values.min() < 1 or values.max() > levels:
        raise ValueError(f"ordinal values must lie in 1..{levels}")
    counts = np.bincount(values.astype(int) - 1, minlength=levels).astype(np.int64)
    return OrderedMarginal(ORDINAL, counts=counts)


def ordered_forward(marginal: OrderedMarginal, z):
    return marginal.forward(z)


def ordered_inverse(marginal: OrderedMarginal, x):
    return marginal.inverse(x)


def _contrast_basis(K: int) -> np.ndarray:
    """Orthonormal basis (K x K-1) of the vectors orthogonal to all-ones (Helmert)."""
    H = np.zeros((K, K - 1))
    for j in range(1, K):
        H[:j, j - 1] = 1.0
        H[j, j - 1] = -j
        H[:, j - 1] /= np.sqrt(j * (j + 1))
    return H


def latent_samples(K: int, cfg: MarginalFitConfig, seed: int | None = None) -> np.ndarray:
    """Fixed sample set (common random numbers for one solve).

    Argmax and softmax ignore shifts along the all-ones vector, so only the
    projection of ``N(0, I_K)`` onto its orthogonal complement matters.  The
    samples are that projection, drawn from K-1 standard normals through a
    Helmert basis; with QMC this removes one dimension from the integrand.
    """
    seed = cfg.seed if seed is None else seed
    if cfg.qmc:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # non power-of-two sizes
            u = qmc.Sobol(K - 1, scramble=True, seed=seed).random(cfg.n_samples)
        w = special.ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    else:
        w = np.random.default_rng(seed).standard_normal((cfg.n_samples, K - 1))
    return w @ _contrast_basis(K).T


def _softmax_rows(mu, samples, beta):
    a = beta * (samples + mu)
    a -= a.max(axis=1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=1, keepdims=True)
    return a


def argmax_prob(mu, cfg: MarginalFitConfig | None = None, samples: np.ndarray | None = None) -> np.ndarray:
    """Softmax Monte Carlo estimate of P(argmax(z + mu) = k), z ~ N(0, I)."""
    cfg = cfg or MarginalFitConfig()
    mu = np.asarray(mu, dtype=float)
    if samples is None:
        samples = latent_samples(mu.size, cfg)
    return _softmax_rows(mu, samples, cfg.beta).mean(axis=0)


def _argmax_prob_jac(mu, samples, beta):
    s = _softmax_rows(mu, samples, beta)
    p = s.mean(axis=0)
    jac = beta * (np.diag(p) - s.T @ s / s.shape[0])
    return p, jac


def category_frequencies(codes, K: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=float)
    codes = codes[~np.isnan(codes)].astype(int)
    if codes.size == 0:
        raise ValueError("no observations for variable")
    return np.bincount(codes - 1, minlength=K) / codes.size


def _damped_newton(fun, jac, x, tol, max_iter=100):
    fx = fun(x)
    for _ in range(max_iter):
        if np.abs(fx).max() <= tol:
            break
        try:
            step = np.linalg.solve(jac(x), -fx)
        except np.linalg.LinAlgError:
            step = -fx
        t = 1.0
        while t > 1e-6:
            cand = x + t * step
            fc = fun(cand)
            if np.abs(fc).max() < np.abs(fx).max():
                x, fx = cand, fc
                break
            t *= 0.5
        else:
            break
    return x, fx


def _coordinate_solve(x, f_free, samples, beta, tol, max_sweeps=1000):
    """Gauss-Seidel over the free entries with exact 1-D bracketing solves.

    p_k is continuous and strictly increasing in mu_k, so each 1-D root is
    found by ``brentq`` even where the sharp softmax is nearly piecewise
    constant and derivative-based steps stall.
    """
    x = x.copy()
    K = samples.shape[1]
    for _ in range(max_sweeps):
        for c in range(K - 1):
            k = c + 1
            mu = np.zeros(K)
            mu[1:] = x
            a = beta * (samples + mu)
            a[:, k] = -np.inf
            lse = special.logsumexp(a, axis=1) - beta * samples[:, k]

            def g(t):
                return special.expit(beta * t - lse).mean() - f_free[c]

            t0 = np.quantile(lse / beta, 1.0 - f_free[c])
            lo, hi = t0 - 0.5, t0 + 0.5
            while g(lo) > 0:
                lo -= 2 * (hi - lo)
            while g(hi) < 0:
                hi += 2 * (hi - lo)
            x[c] = optimize.brentq(g, lo, hi, xtol=1e-14, rtol=1e-15)
        mu = np.zeros(K)
        mu[1:] = x
        fx = _softmax_rows(mu, samples, beta).mean(axis=0)[1:] - f_free
        if np.abs(fx).max() <= tol:
            break
    return x, fx


def estimate_categorical_mu(freqs, cfg: MarginalFitConfig | None = None, init=None,
                            samples: np.ndarray | None = None) -> CategoricalMarginal:
    """Solve for the Gaussian-Max location vector matching category frequencies.

    The K-1 free entries solve ``argmax_prob(mu)[k] = freqs[k]`` with a Powell
    hybrid root finder on a fixed sample set, using the analytic softmax
    Jacobian.  ``init`` warm-starts the solve (full length-K vector).
    """
    cfg = cfg or MarginalFitConfig()
    freqs = np.asarray(freqs, dtype=float)
    if freqs.ndim != 1 or freqs.size < 2 or (freqs < 0).any():
        raise ValueError("freqs must be a nonnegative vector of length >= 2")
    freqs = freqs / freqs.sum()
    K = freqs.size
    rare = freqs < cfg.rare_threshold
    if rare.any():
        which = ", ".join(str(k + 1) for k in np.flatnonzero(rare))
        if not cfg.merge_rare:
            raise RareCategoryError(
                f"categories {which} have probability below {cfg.rare_threshold:g}; "
                "drop them or merge them into a larger category (merge_rare)")
        if rare.all():
            raise RareCategoryError("every category is rare")
        merged = freqs.copy()
        merged[np.argmax(freqs)] += freqs[rare].sum()
        merged[rare] = 0.0
        target = merged
    else:
        target = freqs
    active = np.flatnonzero(~rare)
    mu = np.full(K, -np.inf)
    mu[active] = 0.0
    if active.size == 1:
        return CategoricalMarginal(mu, freqs)

    if samples is None:
        samples = latent_samples(active.size, cfg)
    # anchor the solve at the most frequent category: a rare anchor leaves a
    # slow collective-translation mode; argmax probabilities are translation invariant
    ref = active[np.argmax(target[active])]
    free = active[active != ref]
    # sample columns follow the natural order of the active categories
    pos = np.searchsorted(active, np.r_[ref, free])
    samples = samples[:, pos]
    f_free = target[free]

    def unpack(x):
        full = np.zeros(active.size)
        full[1:] = x
        return full

    def make(beta):
        # log residuals keep small categories well scaled
        lf = np.log(f_free)

        def fun(x):
            p = _softmax_rows(unpack(x), samples, beta).mean(axis=0)[1:]
            with np.errstate(divide="ignore"):
                return np.log(p) - lf

        def jac(x):
            p, J = _argmax_prob_jac(unpack(x), samples, beta)
            return J[1:, 1:] / np.maximum(p[1:, None], 1e-300)
        return fun, jac

    def raw(x):
        return _softmax_rows(unpack(x), samples, cfg.beta).mean(axis=0)[1:] - f_free

    x = None
    if init is not None:
        init = np.asarray(init, dtype=float)
        x = init[free] - init[ref]
        if not np.isfinite(x).all():
            x = None
    if x is not None:
        betas = [cfg.beta]
    else:
        # continuation in beta: each smoother problem warm-starts the next
        x = np.zeros(free.size)
        betas = [b for b in (1.0, 3.0, 10.0, 30.0, 100.0, 300.0) if b < cfg.beta] + [cfg.beta]
    for beta in betas:
        fun, jac = make(beta)
        with np.errstate(invalid="ignore"):
            sol = optimize.root(fun, x, jac=jac, method="hybr", options={"xtol": 1e-13})
        if np.isfinite(sol.x).all() and np.isfinite(sol.fun).all():
            x = sol.x
    fx = raw(x)
    if not np.abs(fx).max() <= cfg.tol:
        x, fx = _damped_newton(raw, lambda v: _argmax_prob_jac(unpack(v), samples, cfg.beta)[1][1:, 1:],
                               x, cfg.tol, max_iter=20)
    if not np.abs(fx).max() <= cfg.tol:
        x, fx = _coordinate_solve(x, f_free, samples, cfg.beta, cfg.tol)
    if not np.abs(fx).max() <= cfg.tol:
        warnings.warn(f"categorical marginal solve stopped at max residual {np.abs(fx).max():.2e}",
                      RuntimeWarning, stacklevel=2)
    mu[free] = x
    mu[ref] = 0.0
    mu[active] -= mu[active[0]]
    return CategoricalMarginal(mu, freqs)


def fit_marginal(spec: VariableSpec, column, cfg: MarginalFitConfig | None = None, init=None):
    """Fit the marginal of one schema variable from its column (NaN = missing)."""
    column = np.asarray(column, dtype=float)
    if np.isnan(column).all():
        raise ValueError(f"no observations for variable {spec.name!r}")
    if spec.kind == CATEGORICAL:
        freqs = category_frequencies(column, spec.n_categories)
        try:
            return estimate_categorical_mu(freqs, cfg, init=init)
        except RareCategoryError as exc:
            raise RareCategoryError(f"variable {spec.name!r}: {exc}") from None
    return fit_ordered_marginal(column, spec.kind, spec.levels)
