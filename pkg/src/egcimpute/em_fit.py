"""EM estimation of the latent correlation of an extended Gaussian copula."""
from __future__ import annotations

import logging
import os
import time
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from . import _kernels
from .data_model import CATEGORICAL, LatentIndexMap, MixedDataset, VariableSchema, build_latent_index_map
from .marginals import (CategoricalMarginal, MarginalFitConfig, category_frequencies, estimate_categorical_mu,
                        fit_marginal, fit_ordered_marginal)
from .truncnorm import EmptyRegionError, _sub_involution, latent_bounds, region_from_bounds, trunc_moments

log = logging.getLogger("egcimpute")

EIG_FLOOR = 1e-6
SIGMA2_FLOOR = 1e-8
CHUNK_ROWS = 256
_METHODS = {"ep": 0, "meanfield": 1}


class SingularCovarianceError(ValueError):
    pass


@dataclass
class LowRankParams:
    """``Sigma = W W^T + sigma2 I`` with unit diagonal."""

    W: np.ndarray
    sigma2: float

    @property
    def rank(self) -> int:
        return int(self.W.shape[1])

    def covariance(self) -> np.ndarray:
        S = self.W @ self.W.T
        S[np.diag_indices_from(S)] += self.sigma2
        return S


@dataclass
class CopulaModel:
    """Fitted marginals plus the latent correlation matrix.

    ``windows`` holds the most recent observations per variable for online
    marginal updates; ``info`` records fit diagnostics (no timings).
    """

    schema: VariableSchema
    marginals: list
    sigma: np.ndarray
    lowrank: LowRankParams | None = None
    windows: list | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index_map = build_latent_index_map(self.schema)
        if len(self.marginals) != self.schema.p:
            raise ValueError("one marginal per variable required")
        self.sigma = np.asarray(self.sigma, dtype=float)
        d = self.index_map.d
        if self.sigma.shape != (d, d):
            raise ValueError(f"sigma must be {d}x{d}")

    @property
    def d(self) -> int:
        return self.index_map.d

    def check_schema(self, dataset: MixedDataset):
        if dataset.schema.to_text() != self.schema.to_text():
            raise ValueError("dataset schema does not match the model schema")

    def copy(self) -> "CopulaModel":
        lr = None if self.lowrank is None else LowRankParams(self.lowrank.W.copy(), self.lowrank.sigma2)
        win = None if self.windows is None else [deque(w, maxlen=w.maxlen) for w in self.windows]
        return CopulaModel(self.schema, list(self.marginals), self.sigma.copy(), lr, win, dict(self.info))


@dataclass(frozen=True)
class FitConfig:
    """EM settings.

    Attributes
    ----------
    max_iter, tol : EM stops when the relative Frobenius change drops below ``tol``.
    sigma_init : optional starting correlation (identity by default).
    loglik_samples : GHK draws per row for the likelihood report (0 disables).
    track_loglik : evaluate the likelihood after every iteration.
    rank : use the low-rank ``W W^T + sigma2 I`` parametrization.
    batch_size, n_passes, lr_c : minibatch EM with step ``lr_c / (t + lr_c)``.
    window : marginal window length for online updates.
    method : truncated-moment approximation, ``"ep"`` or ``"meanfield"``.
    threads : worker threads for the row loops (None = all cores).
    """

    max_iter: int = 50
    tol: float = 1e-3
    sigma_init: np.ndarray | None = None
    loglik_samples: int = 500
    track_loglik: bool = False
    rank: int | None = None
    batch_size: int | None = None
    n_passes: int = 2
    lr_c: float = 5.0
    window: int = 200
    method: str = "ep"
    max_sweeps: int = 50
    sweep_tol: float = 1e-6
    threads: int | None = None
    seed: int = 0
    marginal: MarginalFitConfig = field(default_factory=MarginalFitConfig)

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {sorted(_METHODS)}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_c > 0:
            raise ValueError("lr_c must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.rank is not None and self.rank < 1:
            raise ValueError("rank must be >= 1")


# ---------------------------------------------------------------------------
# projections

def p_cor(S) -> np.ndarray:
    """Scale a covariance to the corresponding correlation matrix."""
    S = np.asarray(S, dtype=float)
    dg = np.diag(S)
    if not (dg > 0).all():
        raise ValueError("covariance has a nonpositive diagonal entry")
    s = 1.0 / np.sqrt(dg)
    R = S * s[:, None] * s[None, :]
    R = 0.5 * (R + R.T)
    R[np.diag_indices_from(R)] = 1.0
    return R


def _inv_sqrt_spd(B, what="categorical block"):
    lam, V = np.linalg.eigh(0.5 * (B + B.T))
    if lam.min() < EIG_FLOOR:
        warnings.warn(f"{what} not positive definite (min eigenvalue {lam.min():.2e}); "
                      f"flooring at {EIG_FLOOR:g}", RuntimeWarning, stacklevel=3)
        lam = np.maximum(lam, EIG_FLOOR)
    return (V / np.sqrt(lam)) @ V.T


def p_cat(S, index_map: LatentIndexMap) -> np.ndarray:
    """Whiten every categorical block so it becomes the identity.

    Returns ``A S A^T`` with ``A`` block diagonal: the inverse square root
    of each categorical block, identity on ordered coordinates.
    """
    S = np.array(S, dtype=float)
    blocks = index_map.categorical_blocks()
    if not blocks:
        return S
    out = S
    for blk in blocks:
        sl = slice(blk.start, blk.stop)
        Ainv = _inv_sqrt_spd(out[sl, sl])
        out[sl, :] = Ainv @ out[sl, :]
        out[:, sl] = out[:, sl] @ Ainv.T
    out = 0.5 * (out + out.T)
    for blk in blocks:
        sl = slice(blk.start, blk.stop)
        out[sl, sl] = np.eye(blk.stop - blk.start)
    out[np.diag_indices_from(out)] = 1.0
    return out


def project(S, index_map: LatentIndexMap) -> np.ndarray:
    """``p_cat(p_cor(S))`` with the eigenvalue floor for numerically non-PSD input."""
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    lam, V = np.linalg.eigh(S)
    if lam.min() < EIG_FLOOR:
        warnings.warn(f"averaged second moment is not positive definite (min eigenvalue "
                      f"{lam.min():.2e}); flooring at {EIG_FLOOR:g}", RuntimeWarning, stacklevel=2)
        S = (V * np.maximum(lam, EIG_FLOOR)) @ V.T
    return p_cat(p_cor(S), index_map)


def canonical_sigma(S, index_map: LatentIndexMap) -> np.ndarray:
    """Representative of the class of correlations giving the same data distribution.

    Argmax ignores a common shift of a categorical block, so only the
    block-centered matrix ``P S P`` is identified.  The representative adds
    ``1 1^T / K`` back on each categorical block, which keeps unit blocks
    and makes the block sums uncorrelated with everything else.
    """
    S = np.asarray(S, dtype=float)
    P = np.eye(S.shape[0])
    blocks = index_map.categorical_blocks()
    for blk in blocks:
        K = blk.stop - blk.start
        P[blk.start:blk.stop, blk.start:blk.stop] -= 1.0 / K
    out = P @ S @ P
    for blk in blocks:
        K = blk.stop - blk.start
        out[blk.start:blk.stop, blk.start:blk.stop] += 1.0 / K
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# E-step

def _chunks(n):
    return [(s, min(s + CHUNK_ROWS, n)) for s in range(0, n, CHUNK_ROWS)]


def _run_chunks(fn, n, threads):
    spans = _chunks(n)
    workers = threads or os.cpu_count() or 1
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, spans))
    return [fn(s) for s in spans]


def _raise_status(status, offset=0):
    bad = np.flatnonzero(status != _kernels.OK)
    if bad.size == 0:
        return
    i = int(bad[0])
    if status[i] == _kernels.EMPTY:
        raise EmptyRegionError(f"row {i + offset}: truncation region is numerically empty "
                               "(interval probability below 1e-300)")
    raise SingularCovarianceError(
        f"row {i + offset}: latent correlation restricted to the observed coordinates is singular; "
        "check for duplicated or perfectly dependent columns")


@dataclass
class LatentBounds:
    """Involuted-frame boxes for every row, computed once per marginal state."""

    lb: np.ndarray
    ub: np.ndarray
    pivot: np.ndarray
    observed: np.ndarray

    @classmethod
    def from_data(cls, values, model: CopulaModel) -> "LatentBounds":
        return cls(*latent_bounds(values, model.marginals, model.index_map))

    def take(self, rows):
        return LatentBounds(self.lb[rows], self.ub[rows], self.pivot[rows], self.observed[rows])

    @property
    def n(self):
        return self.lb.shape[0]


def e_step(bounds: LatentBounds, sigma, cfg: FitConfig = FitConfig()):
    """Conditional latent means ``Z`` (n x d) and the summed conditional covariances."""
    n, d = bounds.lb.shape
    Z = np.zeros((n, d))
    status = np.zeros(n, dtype=np.int64)
    sigma = np.ascontiguousarray(sigma, dtype=float)
    method = _METHODS[cfg.method]

    def work(span):
        a, b = span
        C = np.zeros((d, d))
        _kernels.estep_dense(sigma, bounds.lb[a:b], bounds.ub[a:b], bounds.pivot[a:b],
                             bounds.observed[a:b], method, cfg.max_sweeps, cfg.sweep_tol,
                             Z[a:b], C, status[a:b])
        return C

    parts = _run_chunks(work, n, cfg.threads)
    _raise_status(status)
    Csum = np.zeros((d, d))
    for C in parts:
        Csum += C
    return Z, Csum


def e_step_row(row, model: CopulaModel, cfg: FitConfig = FitConfig()):
    """Conditional mean and second moment ``E[z z^T | x_O]`` of one row.

    Reference implementation built from the truncation-region API; the
    batched E-step must agree with it.
    """
    row = np.asarray(row, dtype=float)
    lb, ub, pivot, observed = latent_bounds(row[None, :], model.marginals, model.index_map)
    region = region_from_bounds(lb[0], ub[0], pivot[0], observed[0])
    sigma = model.sigma
    d = model.d
    obs = region.dims
    mis = np.setdiff1d(np.arange(d), obs)
    mean = np.zeros(d)
    cov = np.zeros((d, d))
    if obs.size == 0:
        return mean, sigma.copy()
    E_o, C_o = trunc_moments(np.zeros(obs.size), sigma[np.ix_(obs, obs)], region, cfg.method,
                             cfg.max_sweeps, cfg.sweep_tol)
    mean[obs] = E_o
    cov[np.ix_(obs, obs)] = C_o
    if mis.size:
        try:
            cho = linalg.cho_factor(sigma[np.ix_(obs, obs)])
        except linalg.LinAlgError:
            raise SingularCovarianceError("latent correlation restricted to the observed "
                                          "coordinates is singular") from None
        J = linalg.cho_solve(cho, sigma[np.ix_(obs, mis)]).T
        mean[mis] = J @ E_o
        JC = J @ C_o
        cov[np.ix_(mis, obs)] = JC
        cov[np.ix_(obs, mis)] = JC.T
        cov[np.ix_(mis, mis)] = sigma[np.ix_(mis, mis)] - J @ sigma[np.ix_(obs, mis)] + JC @ J.T
    second = np.outer(mean, mean) + cov
    return mean, 0.5 * (second + second.T)


def expected_second_moment(bounds: LatentBounds, sigma, cfg: FitConfig = FitConfig()):
    """Average of ``E[z z^T | x_O]`` over rows."""
    Z, Csum = e_step(bounds, sigma, cfg)
    return (Z.T @ Z + Csum) / max(bounds.n, 1)


def em_iteration(dataset: MixedDataset, model: CopulaModel, cfg: FitConfig = FitConfig(),
                 bounds: LatentBounds | None = None) -> np.ndarray:
    """One EM step: ``p_cat(p_cor(mean E[z z^T]))`` under the current correlation."""
    if bounds is None:
        bounds = LatentBounds.from_data(dataset.values, model)
    if bounds.n == 0:
        return model.sigma.copy()
    return project(expected_second_moment(bounds, model.sigma, cfg), model.index_map)


def rel_change(new, old) -> float:
    return float(np.linalg.norm(new - old) / np.linalg.norm(old))


# ---------------------------------------------------------------------------
# low rank

def correct_W(W, sigma2: float, index_map: LatentIndexMap) -> np.ndarray:
    """Replace each categorical block of ``W`` by ``U sqrt(1 - sigma2) V^T`` from its SVD."""
    W = np.array(W, dtype=float)
    scale = np.sqrt(1.0 - sigma2)
    for blk in index_map.categorical_blocks():
        sl = slice(blk.start, blk.stop)
        U, s, Vt = np.linalg.svd(W[sl], full_matrices=False)
        if s.size < blk.stop - blk.start or s.min() <= 1e-12 * max(s.max(), 1e-300):
            raise ValueError(f"categorical block at latent rows {blk.start}..{blk.stop - 1} is rank deficient")
        W[sl] = scale * (U @ Vt)
    return W


def normalize_lowrank(W, sigma2):
    """Rescale to unit diagonal: ``sigma2`` becomes the mean of ``sigma2 / D_j``."""
    rn = np.einsum("ij,ij->i", W, W)
    D = rn + sigma2
    s2 = float(np.mean(sigma2 / D))
    s2 = min(max(s2, 1e-8), 1 - 1e-8)
    W = W * np.sqrt((1.0 - s2) / np.maximum(rn, 1e-300))[:, None]
    return W, s2


def fit_lowrank(S, rank: int, index_map: LatentIndexMap) -> LowRankParams:
    """Low-rank-plus-noise correlation closest to ``S`` in Gaussian likelihood.

    The probabilistic-PCA closed form: ``W`` spans the leading ``rank``
    eigenvectors of ``S`` and ``sigma2`` is the mean of the remaining
    eigenvalues (a small floor at full rank).  The result is rescaled to unit
    diagonal and its categorical blocks are corrected.
    """
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    lam, V = lam[::-1], V[:, ::-1]
    s2 = float(lam[rank:].mean()) if rank < lam.size else SIGMA2_FLOOR
    s2 = min(max(s2, SIGMA2_FLOOR), 1 - SIGMA2_FLOOR)
    W = V[:, :rank] * np.sqrt(np.maximum(lam[:rank] - s2, 1e-12))
    W, s2 = normalize_lowrank(W, s2)
    for blk in index_map.categorical_blocks():
        # the leading eigenvectors need not span a categorical block; any
        # orthonormal completion is an equally good start for the correction
        sl = slice(blk.start, blk.stop)
        U, sv, Vt = np.linalg.svd(W[sl], full_matrices=False)
        if sv.min() <= 1e-8 * max(sv.max(), 1e-300):
            W[sl] = U @ Vt
    return LowRankParams(correct_W(W, s2, index_map), s2)


def lowrank_em_iteration(dataset: MixedDataset, model: CopulaModel, cfg: FitConfig = FitConfig(),
                         bounds: LatentBounds | None = None) -> LowRankParams:
    """One EM step restricted to ``W W^T + sigma2 I``.

    The E-step is the dense one under the current low-rank correlation; the
    M-step maximizes the expected complete-data likelihood over the low-rank
    family exactly, via :func:`fit_lowrank` on the averaged second moment.
    """
    lr = model.lowrank
    if lr is None:
        raise ValueError("model has no low-rank parameters")
    if bounds is None:
        bounds = LatentBounds.from_data(dataset.values, model)
    if bounds.n == 0:
        return LowRankParams(lr.W.copy(), lr.sigma2)
    S = expected_second_moment(bounds, lr.covariance(), cfg)
    return fit_lowrank(S, lr.rank, model.index_map)


# ---------------------------------------------------------------------------
# likelihood

def observed_loglik_mc(dataset: MixedDataset, model: CopulaModel, samples: int = 500, seed: int = 0,
                       return_se: bool = False, bounds: LatentBounds | None = None):
    """GHK estimate of the mean observed-data log-likelihood per row.

    Each row contributes the log density of its continuous latent points
    plus the log probability of its box given those points.  Uniform draws
    are fixed by ``(seed, row)`` so repeated calls use common random numbers.
    With ``return_se`` also returns a delta-method standard error.
    """
    if bounds is None:
        bounds = LatentBounds.from_data(dataset.values, model)
    n = bounds.n
    if n == 0:
        return (0.0, 0.0) if return_se else 0.0
    sigma = model.sigma
    total = 0.0
    var = 0.0
    for i in range(n):
        region = region_from_bounds(bounds.lb[i], bounds.ub[i], bounds.pivot[i], bounds.observed[i])
        if region.size == 0:
            continue
        S = sigma[np.ix_(region.dims, region.dims)]
        pts = np.flatnonzero(region.point)
        tr = np.flatnonzero(~region.point)
        ll = 0.0
        m_t = np.zeros(tr.size)
        C_t = S[np.ix_(tr, tr)]
        if pts.size:
            zp = region.lb[pts]
            cho = linalg.cho_factor(S[np.ix_(pts, pts)], lower=True)
            alpha = linalg.cho_solve(cho, zp)
            ll += -0.5 * zp @ alpha - np.log(np.diag(cho[0])).sum() - 0.5 * pts.size * np.log(2 * np.pi)
            if tr.size:
                gain = linalg.cho_solve(cho, S[np.ix_(pts, tr)]).T
                m_t = gain @ zp
                C_t = C_t - gain @ S[np.ix_(pts, tr)]
        if tr.size:
            lb, ub = region.lb[tr], region.ub[tr]
            if not (np.isneginf(lb).all() and np.isposinf(ub).all()):
                inv = _sub_involution(region, tr)
                # unbounded box coordinates integrate out exactly
                keep = ~(np.isneginf(lb) & np.isposinf(ub))
                m_box = inv.apply(m_t)[keep]
                C_box = inv.congruence(0.5 * (C_t + C_t.T))[np.ix_(keep, keep)]
                lb, ub = lb[keep], ub[keep]
                L = np.linalg.cholesky(C_box)
                u = np.random.default_rng([seed, i]).random((samples, lb.size))
                np.clip(u, 1e-16, 1 - 1e-16, out=u)
                logw = _kernels.ghk_logweights(m_box, L, lb, ub, u)
                top = logw.max()
                w = np.exp(logw - top)
                mw = w.mean()
                ll += top + np.log(mw)
                if samples > 1:
                    var += w.var(ddof=1) / (samples * mw * mw)
        total += ll
    value = total / n
    if return_se:
        return value, float(np.sqrt(var) / n)
    return value


# ---------------------------------------------------------------------------
# fitting

def _marginal_seed(seed, j):
    return int(np.random.SeedSequence([seed, j]).generate_state(1)[0])


def fit_marginals(dataset: MixedDataset, cfg: MarginalFitConfig):
    out = []
    for j, spec in enumerate(dataset.schema.variables):
        col = dataset.values[:, j]
        if np.isnan(col).all():
            raise ValueError(f"variable {spec.name!r} has no observations")
        out.append(fit_marginal(spec, col, replace(cfg, seed=_marginal_seed(cfg.seed, j))))
    return out


def _windows(dataset: MixedDataset, size: int):
    wins = []
    for j in range(dataset.p):
        col = dataset.values[:, j]
        wins.append(deque(col[~np.isnan(col)][-size:].tolist(), maxlen=size))
    return wins


def _log(msg, callback):
    log.info(msg)
    if callback is not None:
        callback(msg)


def gamma_schedule(t: int, c: float) -> float:
    """Step size ``c / (t + c)`` for update number ``t >= 1``."""
    return c / (t + c)


def fit(dataset: MixedDataset, config: FitConfig = FitConfig(), progress=None) -> CopulaModel:
    """Fit marginals and the latent correlation by EM.

    ``progress`` receives one text line per iteration.  Wall times for the
    marginal and correlation stages land in ``model.info["timing"]``, which
    is never serialized.
    """
    cfg = config
    schema = dataset.schema
    for j, spec in enumerate(schema.variables):
        if np.isnan(dataset.values[:, j]).all():
            raise ValueError(f"variable {spec.name!r} has no observations")
    if cfg.rank is not None:
        kmax = max((v.n_categories for v in schema.variables if v.kind == CATEGORICAL), default=0)
        if cfg.rank < kmax:
            raise ValueError(f"rank must be ≥ {kmax} (largest number of categories)")
    t0 = time.perf_counter()
    marginals = fit_marginals(dataset, replace(cfg.marginal, seed=cfg.marginal.seed + cfg.seed))
    t_marg = time.perf_counter() - t0
    imap = build_latent_index_map(schema)
    if cfg.sigma_init is not None:
        sigma = project(cfg.sigma_init, imap)
    else:
        sigma = np.eye(imap.d)
    model = CopulaModel(schema, marginals, sigma, windows=_windows(dataset, cfg.window))
    if cfg.rank is not None and cfg.rank > imap.d:
        raise ValueError(f"rank must be ≤ latent dimension {imap.d}")
    bounds = LatentBounds.from_data(dataset.values, model)

    deltas, logliks = [], []
    converged = False
    it = 0
    if cfg.batch_size is not None:
        it = _fit_minibatch(dataset, model, cfg, bounds, deltas, progress)
    else:
        if cfg.rank is not None:
            # the identity start is W = 0, sigma2 = 1
            model.lowrank = (LowRankParams(np.zeros((imap.d, cfg.rank)), 1.0) if cfg.sigma_init is None
                             else fit_lowrank(sigma, cfg.rank, imap))
            model.sigma = model.lowrank.covariance()
        for it in range(1, cfg.max_iter + 1):
            if cfg.rank is not None:
                model.lowrank = lowrank_em_iteration(dataset, model, cfg, bounds)
                new = model.lowrank.covariance()
            else:
                new = em_iteration(dataset, model, cfg, bounds)
            delta = rel_change(new, model.sigma)
            model.sigma = new
            deltas.append(delta)
            msg = f"iter {it} change {delta:.6g}"
            if cfg.track_loglik and cfg.loglik_samples > 0:
                ll = observed_loglik_mc(dataset, model, cfg.loglik_samples, cfg.seed, bounds=bounds)
                logliks.append(ll)
                msg += f" loglik {ll:.6f}"
            _log(msg, progress)
            if delta < cfg.tol:
                converged = True
                break
    t_sig = time.perf_counter() - t0 - t_marg
    info = {"iterations": it, "converged": converged, "changes": deltas}
    if cfg.loglik_samples > 0 and dataset.n > 0:
        ll, se = observed_loglik_mc(dataset, model, cfg.loglik_samples, cfg.seed, return_se=True, bounds=bounds)
        info["loglik"] = ll
        info["loglik_se"] = se
        if logliks:
            info["loglik_trace"] = logliks
        _log(f"final loglik {ll:.6f} (se {se:.2g})", progress)
    t_total = time.perf_counter() - t0
    model.info = info
    model.info["timing"] = {"marginals": t_marg, "correlation": t_sig, "total": t_total}
    return model


def _fit_minibatch(dataset, model, cfg, bounds, deltas, progress):
    """Minibatch EM over shuffled passes; marginals stay at the full-data estimate."""
    rng = np.random.default_rng([cfg.seed, 1])
    n = dataset.n
    t = 0
    for p in range(cfg.n_passes):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            t += 1
            rows = order[s:s + cfg.batch_size]
            gamma = gamma_schedule(t, cfg.lr_c)
            sub = bounds.take(rows)
            step = project(expected_second_moment(sub, model.sigma, cfg), model.index_map)
            new = _mix(step, model.sigma, gamma, model.index_map)
            deltas.append(rel_change(new, model.sigma))
            model.sigma = new
        _log(f"pass {p + 1} batches {t} change {deltas[-1]:.6g}", progress)
    return t


def _mix(sigma_step, sigma, gamma, index_map):
    return project(gamma * sigma_step + (1.0 - gamma) * sigma, index_map)


def online_update(model: CopulaModel, batch: MixedDataset, gamma: float, window: int | None = None,
                  cfg: FitConfig = FitConfig(), update_marginals: bool = True) -> CopulaModel:
    """Incremental update from one batch; returns a new model.

    Marginal windows absorb the batch's most recent observations, ordered
    marginals are refit on their windows and categorical locations are
    re-solved from windowed frequencies (warm-started).  The correlation
    moves to ``project(gamma * S_batch + (1 - gamma) * Sigma)``, where
    ``S_batch`` is one EM step on the batch.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    model.check_schema(batch)
    new = model.copy()
    if batch.n == 0:
        return new
    if update_marginals:
        size = window or cfg.window
        if new.windows is None or any(w.maxlen != size for w in new.windows):
            new.windows = [deque(w or (), maxlen=size) for w in (new.windows or [None] * batch.p)]
        marginals = []
        for j, spec in enumerate(batch.schema.variables):
            col = batch.values[:, j]
            obs = col[~np.isnan(col)]
            win = new.windows[j]
            win.extend(obs[-size:].tolist())
            old = new.marginals[j]
            if obs.size == 0:
                marginals.append(old)
                continue
            arr = np.array(win)
            if spec.kind == CATEGORICAL:
                freqs = category_frequencies(arr, spec.n_categories)
                mcfg = replace(cfg.marginal, seed=_marginal_seed(cfg.marginal.seed + cfg.seed, j))
                try:
                    marginals.append(estimate_categorical_mu(freqs, mcfg, init=old.mu))
                except ValueError as exc:
                    raise ValueError(f"variable {spec.name!r}: {exc}") from None
            else:
                marginals.append(fit_ordered_marginal(arr, spec.kind, spec.levels))
        new.marginals = marginals
    bounds = LatentBounds.from_data(batch.values, new)
    step = project(expected_second_moment(bounds, new.sigma, cfg), new.index_map)
    new.sigma = _mix(step, new.sigma, gamma, new.index_map)
    if new.lowrank is not None:
        new.lowrank = fit_lowrank(new.sigma, new.lowrank.rank, new.index_map)
    return new


def marginal_probabilities(marginal: CategoricalMarginal, samples: int = 10000, seed: int = 0):
    """Argmax probabilities at a fitted location vector from fresh Gaussian draws."""
    z = np.random.default_rng(seed).standard_normal((samples, marginal.n_categories))
    return np.bincount(np.argmax(z + marginal.mu, axis=1), minlength=marginal.n_categories) / samples
