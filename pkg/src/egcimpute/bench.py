"""Synthetic data, missingness mechanisms, the baseline imputer and evaluation metrics."""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, special

from .data_model import CATEGORICAL, CONTINUOUS, ORDINAL, MixedDataset, VariableSchema, VariableSpec
from .em_fit import CopulaModel, FitConfig, fit, p_cat, p_cor
from .data_model import build_latent_index_map
from .marginals import CategoricalMarginal, fit_ordered_marginal

MECHANISMS = ("MCAR", "MAR", "MNAR")
DEFAULT_EXP_SCALE = 3.0


# ---------------------------------------------------------------------------
# synthetic data

def synthetic_schema(p_cat: int, K: int, p_cont: int = 5, p_ord: int = 5, levels: int = 5) -> VariableSchema:
    variables = [VariableSpec.continuous(f"cont{i + 1}") for i in range(p_cont)]
    variables += [VariableSpec.ordinal(f"ord{i + 1}", levels) for i in range(p_ord)]
    variables += [VariableSpec.categorical(f"cat{i + 1}", K) for i in range(p_cat)]
    return VariableSchema(variables)


def random_correlation(d: int, rng, index_map=None) -> np.ndarray:
    """``p_cor(G G^T + 1e-3 d I)`` for standard normal ``G``, then ``p_cat``."""
    G = rng.standard_normal((d, d))
    S = p_cor(G @ G.T + 1e-3 * d * np.eye(d))
    return p_cat(S, index_map) if index_map is not None else S


def exponential_quantile(u, scale):
    return -scale * np.log1p(-u)


def generate_synthetic(n: int, p_cat: int, K: int, seed: int = 0, p_cont: int = 5, p_ord: int = 5,
                       levels: int = 5, exp_scale: float = DEFAULT_EXP_SCALE, cutoffs: str = "even",
                       mu_scale: float = 0.0):
    """Draw a dataset from a random extended Gaussian copula.

    Continuous marginals are exponential with the given scale.  Ordinal
    cutoffs are either ``"even"`` (equal-width bins over the sampled latent
    range) or ``"uniform"`` (normal quantiles of sorted Uniform(0.1, 0.9)
    draws).  Categorical locations have ``mu_1 = 0`` and the rest are
    ``mu_scale`` times standard normal, so the default gives balanced
    categories.

    Returns
    -------
    dataset : MixedDataset
        Complete data.
    truth : CopulaModel
        The generating correlation and locations; ordered marginals are the
        empirical marginals of the complete data.  ``truth.info["generator"]``
        keeps the exact ordered transforms and the latent sample.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if p_cat < 0:
        raise ValueError("p_cat must be >= 0")
    rng = np.random.default_rng(seed)
    schema = synthetic_schema(p_cat, K, p_cont, p_ord, levels)
    imap = build_latent_index_map(schema)
    d = imap.d
    sigma = random_correlation(d, rng, imap)
    cut_mode = cutoffs
    cutoffs = [np.sort(special.ndtri(rng.uniform(0.1, 0.9, levels - 1))) for _ in range(p_ord)]
    mus = [np.concatenate([[0.0], mu_scale * rng.standard_normal(K - 1)]) for _ in range(p_cat)]
    lam, V = np.linalg.eigh(sigma)
    Z = rng.standard_normal((n, d)) @ (V * np.sqrt(np.maximum(lam, 0.0))).T
    if cut_mode not in ("even", "uniform"):
        raise ValueError(f"unknown cutoff mode {cut_mode!r}")
    if cut_mode == "even":
        # equal-width bins over the sampled latent range
        cutoffs = [np.linspace(Z[:, imap[p_cont + c].start].min(), Z[:, imap[p_cont + c].start].max(),
                               levels + 1)[1:-1] for c in range(p_ord)]
    X = np.empty((n, schema.p))
    for j in range(p_cont):
        # upper-tail form keeps large latent values finite
        X[:, j] = -exp_scale * special.log_ndtr(-Z[:, imap[j].start])
    for c in range(p_ord):
        j = p_cont + c
        X[:, j] = 1 + np.searchsorted(cutoffs[c], Z[:, imap[j].start], side="left")
    for c in range(p_cat):
        j = p_cont + p_ord + c
        blk = imap[j]
        X[:, j] = 1 + np.argmax(Z[:, blk.start:blk.stop] + mus[c], axis=1)
    dataset = MixedDataset(schema, X)
    marginals = []
    for j, spec in enumerate(schema.variables):
        if spec.kind == CATEGORICAL:
            marginals.append(CategoricalMarginal(mus[j - p_cont - p_ord]))
        else:
            marginals.append(fit_ordered_marginal(X[:, j], spec.kind, spec.levels))
    truth = CopulaModel(schema, marginals, sigma,
                        info={"generator": {"exp_scale": exp_scale, "cutoffs": cutoffs, "latent": Z}})
    return dataset, truth


def true_latent(dataset: MixedDataset, truth: CopulaModel, j: int) -> np.ndarray:
    """Exact latent value of a continuous column under the generating transform."""
    scale = truth.info["generator"]["exp_scale"]
    x = dataset.values[:, j]
    # x = -scale log Phi(-z)  =>  z = -ndtri(exp(-x / scale))
    return -special.ndtri(np.exp(-x / scale))


def true_category_conditionals(dataset: MixedDataset, truth: CopulaModel, j: int, rows,
                               samples: int = 20000, seed: int = 0) -> np.ndarray:
    """P(x_j = k | observed continuous cells) under the generating model.

    The categorical block is conditioned directly on the exact latent values
    of the row's observed continuous variables; the argmax probabilities of
    the resulting Gaussian are estimated with ``samples`` common draws.
    """
    schema = dataset.schema
    imap = truth.index_map
    cont = schema.indices(CONTINUOUS)
    blk = np.arange(imap[j].start, imap[j].stop)
    mu = truth.marginals[j].mu
    K = blk.size
    sigma = truth.sigma
    eps = np.random.default_rng(seed).standard_normal((samples, K))
    zc = np.column_stack([true_latent(dataset, truth, c) for c in cont]) if cont else np.zeros((dataset.n, 0))
    lat = np.array([imap[c].start for c in cont], dtype=int)
    out = np.empty((len(rows), K))
    cache = {}
    for r, i in enumerate(rows):
        seen = ~np.isnan(dataset.values[i, cont]) if cont else np.zeros(0, bool)
        key = seen.tobytes()
        if key not in cache:
            o = lat[seen]
            if o.size:
                cho = linalg.cho_factor(sigma[np.ix_(o, o)])
                gain = linalg.cho_solve(cho, sigma[np.ix_(o, blk)]).T
                C = sigma[np.ix_(blk, blk)] - gain @ sigma[np.ix_(o, blk)]
            else:
                gain = np.zeros((K, 0))
                C = sigma[np.ix_(blk, blk)]
            lam, V = np.linalg.eigh(0.5 * (C + C.T))
            cache[key] = (gain, V * np.sqrt(np.maximum(lam, 0.0)))
        gain, root = cache[key]
        m = gain @ zc[i, seen] if seen.any() else np.zeros(K)
        z = eps @ root.T + m + mu
        out[r] = np.bincount(np.argmax(z, axis=1), minlength=K) / samples
    return out


# ---------------------------------------------------------------------------
# masking

@dataclass(frozen=True)
class MaskSpec:
    """Missingness mechanism with target ratio ``ratio`` and its seed."""

    mechanism: str = "MCAR"
    ratio: float = 0.3
    seed: int = 0

    def __post_init__(self):
        mech = self.mechanism.upper()
        object.__setattr__(self, "mechanism", mech)
        if mech not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if not 0 <= self.ratio < 1:
            raise ValueError("ratio must lie in [0, 1)")
        probs = self.tercile_probs()
        if probs is not None and (min(probs) < 0 or max(probs) > 1):
            raise ValueError(f"{mech} ratio {self.ratio:g} gives tercile probabilities {probs} outside [0, 1]")

    def tercile_probs(self):
        if self.mechanism == "MNAR":
            a = self.ratio
        elif self.mechanism == "MAR":
            a = 1.5 * self.ratio
        else:
            return None
        return (round(a + 0.1, 12), round(a, 12), round(a - 0.1, 12))


def terciles(values, rng) -> np.ndarray:
    """Tercile index 0/1/2 of each value by rank, ties broken at random (NaN -> -1)."""
    values = np.asarray(values, dtype=float)
    out = np.full(values.shape, -1, dtype=int)
    obs = np.flatnonzero(~np.isnan(values))
    if obs.size == 0:
        return out
    order = np.lexsort((rng.random(obs.size), values[obs]))
    rank = np.empty(obs.size, dtype=int)
    rank[order] = np.arange(obs.size)
    out[obs] = 3 * rank // obs.size
    return out


def mask_probabilities(dataset: MixedDataset, spec: MaskSpec, rng=None) -> np.ndarray:
    """Per-cell probability of being hidden under ``spec`` (n x p).

    Never-masked MAR variables and unobserved MNAR cells get 0.  With no
    ``rng`` the generator seeded by ``spec.seed`` is used, which reproduces
    the probabilities behind :func:`mask`.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    X = dataset.values
    n, p = X.shape
    if spec.mechanism == "MCAR":
        prob = np.full((n, p), spec.ratio)
    else:
        probs = np.array(spec.tercile_probs())
        prob = np.zeros((n, p))
        if spec.mechanism == "MNAR":
            for j in range(p):
                t = terciles(X[:, j], rng)
                prob[:, j] = np.where(t >= 0, probs[np.maximum(t, 0)], 0.0)
        else:
            n_keep = max(1, p // 3)
            keep = np.sort(rng.choice(p, size=n_keep, replace=False))
            tiers = {int(a): terciles(X[:, a], rng) for a in keep}
            for j in range(p):
                if j in tiers:
                    continue
                anchor = int(rng.choice(keep))
                t = tiers[anchor]
                # an unobserved anchor cell falls back to the middle probability
                prob[:, j] = probs[np.where(t >= 0, t, 1)]
    return prob


def mask(dataset: MixedDataset, spec: MaskSpec):
    """Hide observed cells according to ``spec``.

    Returns the masked dataset and the boolean matrix of newly hidden cells.
    """
    rng = np.random.default_rng(spec.seed)
    X = dataset.values
    prob = mask_probabilities(dataset, spec, rng)
    hide = (rng.random(X.shape) < prob) & ~np.isnan(X)
    values = X.copy()
    values[hide] = np.nan
    return dataset.with_values(values), hide


# ---------------------------------------------------------------------------
# baseline and metrics

def baseline_values(dataset: MixedDataset) -> np.ndarray:
    """Per-column fill value: mode (lowest code on ties) or lower median."""
    fill = np.empty(dataset.p)
    for j, spec in enumerate(dataset.schema.variables):
        col = dataset.values[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise ValueError(f"variable {spec.name!r} has no observations")
        if spec.kind == CATEGORICAL:
            fill[j] = 1 + np.argmax(np.bincount(col.astype(int) - 1, minlength=spec.n_categories))
        else:
            fill[j] = np.sort(col)[(col.size - 1) // 2]
    return fill


def baseline_impute(dataset: MixedDataset) -> MixedDataset:
    """Majority vote for categorical columns, lower median for ordered columns."""
    fill = baseline_values(dataset)
    values = dataset.values.copy()
    miss = np.isnan(values)
    values[miss] = np.broadcast_to(fill, values.shape)[miss]
    return dataset.with_values(values)


@dataclass
class Metrics:
    """Imputation errors on masked cells.

    ``per_variable`` maps a variable name to ``(kind, error, scaled error)``;
    class errors average the per-variable errors.  Scaled errors divide by
    the baseline's error on the same cells and are NaN without a baseline.
    """

    per_variable: dict = field(default_factory=dict)
    me: float = float("nan")
    mae_continuous: float = float("nan")
    mae_ordinal: float = float("nan")
    sme: float = float("nan")
    smae: float = float("nan")
    cross_entropy: float | None = None

    def class_rows(self):
        return [("categorical", "ME", self.me, self.sme),
                ("continuous", "MAE", self.mae_continuous, float("nan")),
                ("ordinal", "MAE", self.mae_ordinal, float("nan")),
                ("ordered", "MAE", float(np.nanmean([self.mae_continuous, self.mae_ordinal]))
                 if not (np.isnan(self.mae_continuous) and np.isnan(self.mae_ordinal)) else float("nan"),
                 self.smae)]


def _variable_errors(truth, imputed, cells, kind):
    if kind == CATEGORICAL:
        return float(np.mean(imputed[cells] != truth[cells]))
    return float(np.mean(np.abs(imputed[cells] - truth[cells])))


def evaluate(truth: MixedDataset, imputed: MixedDataset, hidden, baseline: MixedDataset | None = None) -> Metrics:
    """ME / MAE per variable on the hidden cells, plus baseline-scaled SME / SMAE."""
    T, I = truth.values, imputed.values
    hidden = np.asarray(hidden, dtype=bool)
    if T.shape != I.shape or hidden.shape != T.shape or (baseline is not None and baseline.values.shape != T.shape):
        shapes = [T.shape, I.shape, hidden.shape] + ([baseline.values.shape] if baseline is not None else [])
        raise ValueError(f"shape mismatch: {shapes}")
    B = baseline.values if baseline is not None else None
    out = Metrics()
    by_kind = {CATEGORICAL: [], CONTINUOUS: [], ORDINAL: []}
    scaled = {"cat": [], "ord": []}
    dropped = []
    for j, spec in enumerate(truth.schema.variables):
        cells = hidden[:, j]
        if not cells.any():
            continue
        err = _variable_errors(T[:, j], I[:, j], cells, spec.kind)
        sc = float("nan")
        if B is not None:
            base = _variable_errors(T[:, j], B[:, j], cells, spec.kind)
            if base > 0:
                sc = err / base
                scaled["cat" if spec.kind == CATEGORICAL else "ord"].append(sc)
            else:
                dropped.append(spec.name)
        out.per_variable[spec.name] = (spec.kind, err, sc)
        by_kind[spec.kind].append(err)
    if dropped:
        warnings.warn(f"baseline error is zero for {', '.join(dropped)}; excluded from scaled errors",
                      RuntimeWarning, stacklevel=2)
    mean = (lambda v: float(np.mean(v)) if v else float("nan"))
    out.me = mean(by_kind[CATEGORICAL])
    out.mae_continuous = mean(by_kind[CONTINUOUS])
    out.mae_ordinal = mean(by_kind[ORDINAL])
    out.sme = mean(scaled["cat"])
    out.smae = mean(scaled["ord"])
    return out


def cross_entropy(prob_vectors, true_conditionals) -> float:
    """Mean of ``-sum_k q_k log p_k`` with estimates clamped at 1e-12."""
    P = np.clip(np.asarray(prob_vectors, dtype=float), 1e-12, None)
    Q = np.asarray(true_conditionals, dtype=float)
    if P.size == 0:
        return float("nan")
    return float(np.mean(-(Q * np.log(P)).sum(axis=1)))


def marginal_fit_diagnostic(model: CopulaModel, dataset: MixedDataset, samples: int = 10000, seed: int = 0):
    """``(variable, category, observed frequency, model probability)`` for each category.

    Model probabilities are argmax frequencies at the fitted locations from
    ``samples`` fresh Gaussian draws.
    """
    rng = np.random.default_rng(seed)
    out = []
    for j, spec in enumerate(dataset.schema.variables):
        if spec.kind != CATEGORICAL:
            continue
        col = dataset.values[:, j]
        col = col[~np.isnan(col)].astype(int)
        freq = np.bincount(col - 1, minlength=spec.n_categories) / col.size
        mu = model.marginals[j].mu
        z = rng.standard_normal((samples, mu.size))
        est = np.bincount(np.argmax(z + mu, axis=1), minlength=mu.size) / samples
        out.extend((spec.name, k + 1, float(freq[k]), float(est[k])) for k in range(mu.size))
    return out


# ---------------------------------------------------------------------------
# experiment grid

METRIC_FIELDS = ("method", "class", "metric", "error", "scaled", "repetition", "n", "p_cat", "K",
                 "mechanism", "ratio")


def run_cell(n, p_cat, K, mech: MaskSpec, seed: int, cfg: FitConfig = FitConfig(), with_oracle=False,
             exp_scale: float = DEFAULT_EXP_SCALE, **generator):
    """Generate, mask, fit and evaluate one repetition; returns ``(rows, extras)``.

    Extra keyword arguments go to :func:`generate_synthetic`.
    """
    from .impute import single_impute

    data, truth = generate_synthetic(n, p_cat, K, seed, exp_scale=exp_scale, **generator)
    masked, hidden = mask(data, mech)
    base = baseline_impute(masked)
    # random locations can leave a category unobserved; the harness merges it
    cfg = replace(cfg, marginal=replace(cfg.marginal, merge_rare=True))
    t0 = time.perf_counter()
    model = fit(masked, cfg)
    fit_time = time.perf_counter() - t0
    imputed = single_impute(masked, model, cfg)
    methods = {"EGC": evaluate(data, imputed, hidden, base), "baseline": evaluate(data, base, hidden, base)}
    if with_oracle:
        methods["oracle"] = evaluate(data, single_impute(masked, truth, cfg), hidden, base)
    rows = []
    for name, met in methods.items():
        for cls, metric, err, sc in met.class_rows():
            rows.append({"method": name, "class": cls, "metric": metric, "error": err, "scaled": sc,
                         "repetition": seed, "n": n, "p_cat": p_cat, "K": K,
                         "mechanism": mech.mechanism, "ratio": mech.ratio})
    extras = {"fit_time": fit_time, "model": model, "diagnostic": marginal_fit_diagnostic(model, masked),
              "hidden": hidden, "mask_prob": mask_probabilities(data, mech),
              "timing": model.info.get("timing"), "metrics": methods}
    return rows, extras


def run_grid(n=2000, p_cats=(1, 3, 5), Ks=(3, 6, 9), mechanisms=("MCAR", "MAR", "MNAR"), ratios=(0.3,),
             seeds=range(10), cfg: FitConfig = FitConfig(), progress=None, **generator):
    """All combinations of the synthetic design; returns metric rows."""
    rows = []
    for p_cat in p_cats:
        for K in Ks:
            for mech in mechanisms:
                for ratio in ratios:
                    for seed in seeds:
                        spec = MaskSpec(mech, ratio, seed)
                        r, extras = run_cell(n, p_cat, K, spec, seed, cfg, **generator)
                        rows.extend(r)
                        if progress is not None:
                            progress(f"p_cat={p_cat} K={K} {mech} ratio={ratio} seed={seed} "
                                     f"fit {extras['fit_time']:.1f}s")
    return rows


def write_metrics_csv(rows, path, comment=None):
    with open(path, "w", newline="") as handle:
        if comment:
            handle.write(f"# {comment}\n")
        w = csv.DictWriter(handle, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def summary_table(rows) -> str:
    """Mean (std) of each metric by method and class."""
    groups = {}
    for r in rows:
        key = (r["p_cat"], r["K"], r["mechanism"], r["ratio"], r["method"], r["class"])
        groups.setdefault(key, []).append((r["error"], r["scaled"]))
    lines = [f"{'p_cat':>5} {'K':>3} {'mech':>5} {'ratio':>5} {'method':>9} {'class':>12} "
             f"{'error':>15} {'scaled':>15}"]
    for key in sorted(groups):
        e = np.array(groups[key], dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            em, es = np.nanmean(e[:, 0]), np.nanstd(e[:, 0])
            sm, ss = np.nanmean(e[:, 1]), np.nanstd(e[:, 1])
        lines.append(f"{key[0]:>5} {key[1]:>3} {key[2]:>5} {key[3]:>5g} {key[4]:>9} {key[5]:>12} "
                     f"{em:8.3f} ({es:.3f}) {sm:8.3f} ({ss:.3f})")
    return "\n".join(lines)
