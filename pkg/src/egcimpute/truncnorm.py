"""Interval-truncated multivariate normal: involutions, truncation regions,
moment approximation and Gibbs sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, special, stats

from . import _kernels
from .data_model import LatentIndexMap
from .marginals import CategoricalMarginal

EMPTY_REGION_PROB = 1e-300
_LOG_EMPTY = np.log(EMPTY_REGION_PROB)


class EmptyRegionError(ValueError):
    pass


def build_involution_block(k: int, K: int) -> np.ndarray:
    """Integer matrix ``-I + sum_i E_ik + E_kk`` for observed label ``k`` (1-based).

    Row ``i != k`` maps ``z`` to ``z_k - z_i``; row ``k`` keeps ``z_k``.
    """
    if not 1 <= k <= K:
        raise ValueError(f"label {k} outside 1..{K}")
    A = -np.eye(K, dtype=np.int64)
    A[:, k - 1] += 1
    A[k - 1, k - 1] += 1
    return A


@dataclass(frozen=True, eq=False)
class Involution:
    """Block involution over a set of latent coordinates.

    ``pivot[i]`` is the local index of the observed-category coordinate in
    the categorical block containing ``i``, or -1 where the row is the
    identity (ordered coordinates, the pivot itself).
    """

    pivot: np.ndarray

    @property
    def size(self) -> int:
        return int(self.pivot.size)

    @property
    def is_identity(self) -> bool:
        return not (self.pivot >= 0).any()

    def matrix(self) -> np.ndarray:
        A = np.eye(self.size, dtype=np.int64)
        idx = np.flatnonzero(self.pivot >= 0)
        A[idx, idx] = -1
        A[idx, self.pivot[idx]] = 1
        return A

    def apply(self, x, axis: int = -1):
        """Multiply by the involution along ``axis`` (its own inverse)."""
        x = np.asarray(x, dtype=float)
        idx = np.flatnonzero(self.pivot >= 0)
        if idx.size == 0:
            return x.copy()
        x = np.moveaxis(x, axis, -1)
        out = x.copy()
        out[..., idx] = x[..., self.pivot[idx]] - x[..., idx]
        return np.moveaxis(out, -1, axis)

    def congruence(self, C):
        """``A C A^T``."""
        return self.apply(self.apply(C, axis=0), axis=1)


@dataclass(frozen=True, eq=False)
class TruncationRegion:
    """Observed latent coordinates of one row and their box in the involuted frame.

    ``point`` marks continuous observations, where ``lb == ub`` is the exact
    latent value; involution blocks never touch point coordinates.
    """

    dims: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    point: np.ndarray
    involution: Involution

    @property
    def size(self) -> int:
        return int(self.dims.size)

    @property
    def is_full_space(self) -> bool:
        return bool(np.isneginf(self.lb).all() and np.isposinf(self.ub).all())


def latent_bounds(values, marginals, index_map: LatentIndexMap):
    """Involuted-frame latent boxes for every row of a data matrix.

    Returns ``(lb, ub, pivot, observed)``, each n x d.  ``pivot`` holds the
    global latent index of the observed category coordinate (-1 for identity
    rows) and ``observed`` marks latent coordinates of observed variables.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[0]
    d = index_map.d
    lb = np.full((n, d), -np.inf)
    ub = np.full((n, d), np.inf)
    pivot = np.full((n, d), -1, dtype=np.int64)
    observed = np.zeros((n, d), dtype=bool)
    for j, marg in enumerate(marginals):
        col = values[:, j]
        obs = ~np.isnan(col)
        block = index_map[j]
        observed[obs, block.start:block.stop] = True
        if not obs.any():
            continue
        rows = np.flatnonzero(obs)
        if isinstance(marg, CategoricalMarginal):
            code = marg.canonical_code(col[obs].astype(int)) - 1
            K = marg.n_categories
            mu = marg.mu
            for i in range(K):
                gi = block.start + i
                other = code != i
                r = rows[other]
                # z_k - z_i > mu_i - mu_k, i.e. the shifted coordinate beats mu
                with np.errstate(invalid="ignore"):
                    lb[r, gi] = mu[i] - mu[code[other]]
                pivot[r, gi] = block.start + code[other]
        else:
            lo, hi = marg.inverse(col[obs])
            lb[rows, block.start] = lo
            ub[rows, block.start] = hi
    lb[np.isnan(lb)] = -np.inf
    return lb, ub, pivot, observed


def region_from_bounds(lb_row, ub_row, pivot_row, observed_row) -> TruncationRegion:
    dims = np.flatnonzero(observed_row)
    local = np.full(observed_row.size, -1, dtype=np.int64)
    local[dims] = np.arange(dims.size)
    gpiv = pivot_row[dims]
    piv = np.where(gpiv >= 0, local[np.maximum(gpiv, 0)], -1)
    lb = lb_row[dims].copy()
    ub = ub_row[dims].copy()
    return TruncationRegion(dims, lb, ub, lb == ub, Involution(piv))


def build_truncation(row, marginals, index_map: LatentIndexMap) -> TruncationRegion:
    """Truncation region of one data row (NaN = missing)."""
    lb, ub, pivot, observed = latent_bounds(np.asarray(row, dtype=float)[None, :], marginals, index_map)
    return region_from_bounds(lb[0], ub[0], pivot[0], observed[0])


def _log_interval_prob(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        lhi = special.log_ndtr(hi)
        out = lhi + np.log1p(-np.exp(special.log_ndtr(lo) - lhi))
    return np.where(hi > lo, out, -np.inf)


def _condition_on_points(mean, cov, region):
    """Split into truncated coordinates T and the point coordinates they are conditioned on."""
    pts = np.flatnonzero(region.point)
    tr = np.flatnonzero(~region.point)
    m_t = mean[tr]
    C_t = cov[np.ix_(tr, tr)]
    if pts.size and tr.size:
        cho = linalg.cho_factor(cov[np.ix_(pts, pts)])
        gain = linalg.cho_solve(cho, cov[np.ix_(pts, tr)]).T
        m_t = m_t + gain @ (region.lb[pts] - mean[pts])
        C_t = C_t - gain @ cov[np.ix_(pts, tr)]
        C_t = 0.5 * (C_t + C_t.T)
    return pts, tr, m_t, C_t


def _sub_involution(region, tr):
    # pivots of truncated coordinates always point at truncated coordinates
    local = np.full(region.size, -1, dtype=np.int64)
    local[tr] = np.arange(tr.size)
    piv = region.involution.pivot[tr]
    return Involution(np.where(piv >= 0, local[np.maximum(piv, 0)], -1))


def _check_nonempty(m, C, lb, ub, row):
    sd = np.sqrt(np.diag(C))
    with np.errstate(invalid="ignore"):
        logp = _log_interval_prob((lb - m) / sd, (ub - m) / sd)
    bad = ~(logp > _LOG_EMPTY)
    if bad.any():
        where = f"row {row}: " if row is not None else ""
        raise EmptyRegionError(f"{where}truncation region is numerically empty "
                               f"(interval probability below {EMPTY_REGION_PROB:g})")


EXACT_MAX_DIM = 8


def _box_prob(lo, hi, cov):
    """``P(lo <= X <= hi)`` for ``X ~ N(0, cov)``."""
    k = lo.size
    if k == 0:
        return 1.0
    if k == 1:
        sd = np.sqrt(cov[0, 0])
        return float(np.exp(_log_interval_prob(lo[0] / sd, hi[0] / sd)))
    # Genz's algorithm; tight tolerances since callers divide by small masses
    dist = stats.multivariate_normal(np.zeros(k), cov, allow_singular=True, seed=0)
    dist.maxpts, dist.abseps, dist.releps = 50_000 * k, 1e-10, 1e-6
    return float(dist.cdf(hi, lower_limit=lo))


def _exact_box_moments(m, C, lb, ub):
    """Mean and covariance of ``N(m, C)`` restricted to the box ``[lb, ub]``.

    Uses the closed form in terms of one- and two-coordinate marginal
    densities of the truncated distribution, each a Gaussian density times a
    lower-dimensional box probability.
    """
    d = m.size
    a, b = lb - m, ub - m
    alpha = _box_prob(a, b, C)
    if not alpha > 0:
        raise EmptyRegionError("truncation region is numerically empty")
    s = np.diag(C)

    def marg1(k, x):
        # density of X_k at x with the other coordinates kept in the box
        if not np.isfinite(x):
            return 0.0
        rest = np.delete(np.arange(d), k)
        g = C[rest, k] / s[k]
        Cr = C[np.ix_(rest, rest)] - np.outer(g, C[k, rest])
        dens = np.exp(-0.5 * x * x / s[k]) / np.sqrt(2 * np.pi * s[k])
        return dens * _box_prob(a[rest] - g * x, b[rest] - g * x, Cr) / alpha

    def marg2(k, q, xk, xq):
        if not (np.isfinite(xk) and np.isfinite(xq)):
            return 0.0
        pair = np.array([k, q])
        rest = np.delete(np.arange(d), pair)
        S2 = C[np.ix_(pair, pair)]
        x = np.array([xk, xq])
        sol = np.linalg.solve(S2, x)
        dens = np.exp(-0.5 * x @ sol) / (2 * np.pi * np.sqrt(np.linalg.det(S2)))
        if rest.size == 0:
            return dens / alpha
        G = np.linalg.solve(S2, C[np.ix_(pair, rest)]).T
        Cr = C[np.ix_(rest, rest)] - G @ C[np.ix_(pair, rest)]
        shift = G @ x
        return dens * _box_prob(a[rest] - shift, b[rest] - shift, 0.5 * (Cr + Cr.T)) / alpha

    Fa = np.array([marg1(k, a[k]) for k in range(d)])
    Fb = np.array([marg1(k, b[k]) for k in range(d)])
    mean = C @ (Fa - Fb)
    with np.errstate(invalid="ignore"):
        ta = np.where(np.isfinite(a), a * Fa, 0.0)
        tb = np.where(np.isfinite(b), b * Fb, 0.0)
    second = C + (C * ((ta - tb) / s)) @ C.T
    if d > 1:
        D = np.zeros((d, d))
        for k in range(d):
            for q in range(d):
                if q != k:
                    D[k, q] = (marg2(k, q, a[k], a[q]) - marg2(k, q, a[k], b[q])
                               - marg2(k, q, b[k], a[q]) + marg2(k, q, b[k], b[q]))
        # sum_k C_ik sum_{q != k} (C_jq - C_kq C_jk / C_kk) D_kq
        for k in range(d):
            resid = C - np.outer(C[:, k], C[k, :]) / s[k]   # resid[j, q]
            second += np.outer(C[:, k], resid @ D[k])
    cov = second - np.outer(mean, mean)
    return m + mean, 0.5 * (cov + cov.T)


def exact_box_moments(m, C, lb, ub):
    """Exact truncated moments; unbounded coordinates are handled by regression."""
    bounded = ~(np.isneginf(lb) & np.isposinf(ub))
    B = np.flatnonzero(bounded)
    F = np.flatnonzero(~bounded)
    if B.size > EXACT_MAX_DIM:
        raise ValueError(f"exact moments support at most {EXACT_MAX_DIM} bounded coordinates, got {B.size}")
    e = m.copy()
    V = C.copy()
    if B.size == 0:
        return e, V
    eB, vB = _exact_box_moments(m[B], C[np.ix_(B, B)], lb[B], ub[B])
    e[B] = eB
    V[np.ix_(B, B)] = vB
    if F.size:
        G = np.linalg.solve(C[np.ix_(B, B)], C[np.ix_(B, F)]).T
        e[F] = m[F] + G @ (eB - m[B])
        V[np.ix_(F, B)] = G @ vB
        V[np.ix_(B, F)] = V[np.ix_(F, B)].T
        V[np.ix_(F, F)] = C[np.ix_(F, F)] - G @ C[np.ix_(B, F)] + G @ vB @ G.T
    return e, 0.5 * (V + V.T)


def trunc_moments(mean, cov, region: TruncationRegion, method: str = "ep",
                  max_sweeps: int = 50, tol: float = 1e-6, row=None):
    """Approximate mean and covariance of ``N(mean, cov)`` restricted to ``region``.

    ``mean`` and ``cov`` are over ``region.dims`` in the original frame, and
    so are the results.  Point coordinates come back fixed with zero
    variance.

    Parameters
    ----------
    method : {"ep", "meanfield", "exact"}
        ``"ep"`` runs expectation propagation on the box, giving a full
        covariance.  ``"meanfield"`` iterates coordinatewise conditional
        truncated means and keeps the untruncated conditional covariance
        with truncated variances on the diagonal.  ``"exact"`` evaluates
        the closed form through box probabilities; it is limited to
        ``EXACT_MAX_DIM`` bounded coordinates and is much slower.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = region.size
    if d == 0:
        return np.zeros(0), np.zeros((0, 0))
    pts, tr, m_t, C_t = _condition_on_points(mean, cov, region)
    E = np.empty(d)
    V = np.zeros((d, d))
    E[pts] = region.lb[pts]
    if tr.size == 0:
        return E, V
    inv = _sub_involution(region, tr)
    lb, ub = region.lb[tr], region.ub[tr]
    m_box = inv.apply(m_t)
    C_box = inv.congruence(C_t)
    if np.isneginf(lb).all() and np.isposinf(ub).all():
        e_box, c_box = m_box, C_box
    else:
        _check_nonempty(m_box, C_box, lb, ub, row)
        if method == "ep":
            e_box, c_box, _ = _kernels.ep_box(m_box, C_box, lb, ub, max_sweeps, tol)
        elif method == "meanfield":
            prec = linalg.inv(C_box)
            e_box, v = _kernels.meanfield_box(m_box, prec, lb, ub, max_sweeps, tol)
            c_box = C_box.copy()
            c_box[np.diag_indices_from(c_box)] = v
        elif method == "exact":
            e_box, c_box = exact_box_moments(m_box, C_box, lb, ub)
        else:
            raise ValueError(f"unknown method {method!r}")
    E[tr] = inv.apply(e_box)
    V[np.ix_(tr, tr)] = inv.congruence(c_box)
    return E, V


def trunc_sample(mean, cov, region: TruncationRegion, count: int, seed=None,
                 burn_in: int = 100, rng=None, row=None) -> np.ndarray:
    """Draw ``count`` samples (count x len(dims)) from the truncated normal.

    Point coordinates are conditioned on exactly; the rest are drawn by a
    systematic-scan Gibbs sampler in the involuted frame, started at the
    mean clipped into the box, with inverse-CDF univariate draws.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = region.size
    out = np.empty((count, d))
    if d == 0 or count == 0:
        return out
    rng = rng if rng is not None else np.random.default_rng(seed)
    pts, tr, m_t, C_t = _condition_on_points(mean, cov, region)
    out[:, pts] = region.lb[pts]
    if tr.size == 0:
        return out
    inv = _sub_involution(region, tr)
    lb, ub = region.lb[tr], region.ub[tr]
    m_box = inv.apply(m_t)
    C_box = inv.congruence(C_t)
    _check_nonempty(m_box, C_box, lb, ub, row)
    prec = linalg.inv(C_box)
    prec = 0.5 * (prec + prec.T)
    x0 = np.clip(m_box, lb, ub)
    u = rng.random((burn_in + count, tr.size))
    np.clip(u, 1e-16, 1 - 1e-16, out=u)
    draws = _kernels.gibbs_box(m_box, prec, lb, ub, x0, u, burn_in)
    out[:, tr] = inv.apply(draws, axis=1)
    return out
