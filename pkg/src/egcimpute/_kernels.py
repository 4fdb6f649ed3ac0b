"""Compiled scalar and small-matrix kernels for truncated Gaussians.

Everything here works on plain float arrays in a frame where the truncation
region is a box ``lb <= x <= ub`` (bounds may be infinite).  Callers handle
the involution and the conditioning on point-observed coordinates.
"""
import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
LOG_SQRT2PI = 0.5 * math.log(2.0 * math.pi)


@njit(cache=True, nogil=True)
def ndtri(p):
    """Inverse standard normal CDF (Wichura, AS241 / PPND16)."""
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@njit(cache=True, nogil=True)
def ndtr(x):
    return 0.5 * math.erfc(-x / SQRT2)


@njit(cache=True, nogil=True)
def erfcx(x):
    # only called with x >= 0
    if x < 25.0:
        return math.exp(x * x) * math.erfc(x)
    t = 0.5 / (x * x)
    series = 1.0 - t * (1.0 - 3.0 * t * (1.0 - 5.0 * t * (1.0 - 7.0 * t * (1.0 - 9.0 * t * (1.0 - 11.0 * t)))))
    return series / (x * math.sqrt(math.pi))


@njit(cache=True, nogil=True)
def interval_prob(a, b):
    """P(a <= X <= b) for X ~ N(0, 1), accurate in both tails."""
    if a >= 0.0:
        return 0.5 * (math.erfc(a / SQRT2) - math.erfc(b / SQRT2))
    if b <= 0.0:
        return 0.5 * (math.erfc(-b / SQRT2) - math.erfc(-a / SQRT2))
    return 1.0 - 0.5 * math.erfc(-a / SQRT2) - 0.5 * math.erfc(b / SQRT2)


@njit(cache=True, nogil=True)
def tn_moments(a, b):
    """Log normalizer, mean and variance of N(0, 1) truncated to [a, b]."""
    if not (a <= b):
        return -np.inf, np.nan, np.nan
    flip = False
    if b <= 0.0 and a < 0.0:
        a, b = -b, -a
        flip = True
    w = b - a
    scale = max(1.0, abs(a), abs(b))
    if w * scale < 1e-5:
        mid = 0.5 * (a + b)
        mean = mid - mid * w * w / 12.0
        var = w * w / 12.0
        logz = -np.inf if w == 0.0 else math.log(w) - 0.5 * mid * mid - LOG_SQRT2PI
    elif a >= 0.0:
        ea = erfcx(a / SQRT2)
        if b == np.inf:
            d = 0.0
            eb = 0.0
            bd = 0.0
        else:
            d = math.exp(-0.5 * (b - a) * (b + a))
            eb = erfcx(b / SQRT2) * d
            bd = b * d
        den = 0.5 * (ea - eb)
        g = INV_SQRT2PI / den
        mean = (1.0 - d) * g
        var = 1.0 + (a - bd) * g - mean * mean
        logz = -0.5 * a * a + math.log(den)
    else:
        z = interval_prob(a, b)
        pa = 0.0 if a == -np.inf else INV_SQRT2PI * math.exp(-0.5 * a * a)
        pb = 0.0 if b == np.inf else INV_SQRT2PI * math.exp(-0.5 * b * b)
        apa = 0.0 if a == -np.inf else a * pa
        bpb = 0.0 if b == np.inf else b * pb
        mean = (pa - pb) / z
        var = 1.0 + (apa - bpb) / z - mean * mean
        logz = math.log(z)
    if var < 1e-300:
        var = 1e-300
    if flip:
        mean = -mean
    return logz, mean, var


@njit(cache=True, nogil=True)
def tn_draw(a, b, u):
    """Inverse-CDF draw from N(0, 1) truncated to [a, b] given u in (0, 1)."""
    if a >= 0.0:
        qa = 0.5 * math.erfc(a / SQRT2)
        qb = 0.5 * math.erfc(b / SQRT2)
        if qa - qb > 0.0:
            x = -ndtri(qb + u * (qa - qb))
        elif a > 0.0 and b - a > 1e-12:
            # both tail masses underflowed: exponential approximation
            x = a - math.log(1.0 - u * (1.0 - math.exp(-a * (b - a)))) / a
        else:
            x = a + u * (b - a)
    else:
        pa = 0.5 * math.erfc(-a / SQRT2)
        pb = 0.5 * math.erfc(-b / SQRT2)
        if pb - pa > 0.0:
            x = ndtri(pa + u * (pb - pa))
        elif b < 0.0 and b - a > 1e-12:
            x = b + math.log(1.0 - u * (1.0 - math.exp(b * (b - a)))) / (-b)
        else:
            x = a + u * (b - a)
    if x < a:
        x = a
    if x > b:
        x = b
    return x


@njit(cache=True, nogil=True)
def ep_box(m, S, lb, ub, max_sweeps, tol):
    """Expectation propagation for N(m, S) restricted to a box.

    Each bounded coordinate carries a Gaussian site; a sweep visits them in
    order, matches the cavity's univariate truncated moments and applies a
    rank-one update to the posterior.  Returns mean, covariance, sweeps used.
    """
    d = m.shape[0]
    mu = m.copy()
    sig = S.copy()
    tau = np.zeros(d)
    nu = np.zeros(d)
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        change = 0.0
        for i in range(d):
            if lb[i] == -np.inf and ub[i] == np.inf:
                continue
            sii = sig[i, i]
            tau_c = 1.0 / sii - tau[i]
            if tau_c <= 0.0:
                continue
            nu_c = mu[i] / sii - nu[i]
            vc = 1.0 / tau_c
            mc = nu_c * vc
            sd = math.sqrt(vc)
            logz, tm, tv = tn_moments((lb[i] - mc) / sd, (ub[i] - mc) / sd)
            if not (logz > -np.inf):
                continue
            mhat = mc + sd * tm
            vhat = vc * tv
            tau_new = 1.0 / vhat - tau_c
            if tau_new < 0.0:
                tau_new = 0.0
            nu_new = mhat / vhat - nu_c if tau_new > 0.0 else 0.0
            dtau = tau_new - tau[i]
            dnu = nu_new - nu[i]
            denom = 1.0 + dtau * sii
            step = (dnu - dtau * mu[i]) / denom
            c = dtau / denom
            s = sig[:, i].copy()
            old_mu_i = mu[i]
            old_var_i = sii
            for r in range(d):
                mu[r] += s[r] * step
            for r in range(d):
                sr = c * s[r]
                for q in range(d):
                    sig[r, q] -= sr * s[q]
            tau[i] = tau_new
            nu[i] = nu_new
            ch = abs(mu[i] - old_mu_i) / math.sqrt(old_var_i) + abs(sig[i, i] - old_var_i) / old_var_i
            if ch > change:
                change = ch
        if change < tol:
            break
    for r in range(d):
        for q in range(r + 1, d):
            v = 0.5 * (sig[r, q] + sig[q, r])
            sig[r, q] = v
            sig[q, r] = v
    return mu, sig, sweeps


@njit(cache=True, nogil=True)
def meanfield_box(m, P, lb, ub, max_sweeps, tol):
    """Coordinatewise truncated means given the precision matrix ``P``.

    Each coordinate is replaced by the mean of its univariate conditional
    (given the current values of the others) truncated to its interval.
    Returns the mean vector and the per-coordinate truncated variances.
    """
    d = m.shape[0]
    z = m.copy()
    v = np.empty(d)
    for i in range(d):
        v[i] = 1.0 / P[i, i]
        if z[i] < lb[i]:
            z[i] = lb[i]
        if z[i] > ub[i]:
            z[i] = ub[i]
    for sweep in range(max_sweeps):
        change = 0.0
        for i in range(d):
            acc = 0.0
            for q in range(d):
                if q != i:
                    acc += P[i, q] * (z[q] - m[q])
            cvar = 1.0 / P[i, i]
            cmean = m[i] - acc * cvar
            if lb[i] == -np.inf and ub[i] == np.inf:
                znew = cmean
                vnew = cvar
            else:
                sd = math.sqrt(cvar)
                logz, tm, tv = tn_moments((lb[i] - cmean) / sd, (ub[i] - cmean) / sd)
                znew = cmean + sd * tm
                vnew = cvar * tv
            ch = abs(znew - z[i]) / math.sqrt(cvar)
            if ch > change:
                change = ch
            z[i] = znew
            v[i] = vnew
        if change < tol:
            break
    return z, v


@njit(cache=True, nogil=True)
def gibbs_box(m, P, lb, ub, x0, uniforms, burn_in):
    """Systematic-scan Gibbs sampler for N(m, P^-1) restricted to a box.

    ``uniforms`` has shape (burn_in + count, d); one row feeds one sweep.
    """
    d = m.shape[0]
    total = uniforms.shape[0]
    count = total - burn_in
    out = np.empty((count, d))
    x = x0.copy()
    for t in range(total):
        for i in range(d):
            acc = 0.0
            for q in range(d):
                if q != i:
                    acc += P[i, q] * (x[q] - m[q])
            cvar = 1.0 / P[i, i]
            cmean = m[i] - acc * cvar
            sd = math.sqrt(cvar)
            x[i] = cmean + sd * tn_draw((lb[i] - cmean) / sd, (ub[i] - cmean) / sd, uniforms[t, i])
        if t >= burn_in:
            out[t - burn_in, :] = x
    return out


@njit(cache=True, nogil=True)
def ghk_logweights(m, L, lb, ub, uniforms):
    """GHK simulator: per-draw log weights for P(lb <= X <= ub), X ~ N(m, L L^T)."""
    n_draws = uniforms.shape[0]
    d = m.shape[0]
    logw = np.zeros(n_draws)
    e = np.empty(d)
    for s in range(n_draws):
        acc_log = 0.0
        for i in range(d):
            shift = m[i]
            for j in range(i):
                shift += L[i, j] * e[j]
            a = (lb[i] - shift) / L[i, i]
            b = (ub[i] - shift) / L[i, i]
            if a == -np.inf and b == np.inf:
                e[i] = ndtri(uniforms[s, i])
                continue
            pr = interval_prob(a, b)
            if pr <= 0.0:
                logz, tm, tv = tn_moments(a, b)
                acc_log += logz
            else:
                acc_log += math.log(pr)
            e[i] = tn_draw(a, b, uniforms[s, i])
        logw[s] = acc_log
    return logw


# ---------------------------------------------------------------------------
# fused per-row E-step

OK = 0
EMPTY = 1
SINGULAR = 2
LOG_EMPTY = math.log(1e-300)


@njit(cache=True, nogil=True)
def observed_moments(sigma, lbr, ubr, pivr, obs, method, max_sweeps, tol):
    """Truncated moments of the observed latent coordinates of one row.

    ``obs`` lists the observed latent indices; bounds and pivots are indexed
    globally and live in the involuted frame.  Returns ``(E, C, status)``.
    """
    no = obs.shape[0]
    E = np.zeros(no)
    C = np.zeros((no, no))
    n_pts = 0
    for k in range(no):
        if lbr[obs[k]] == ubr[obs[k]]:
            n_pts += 1
    pts = np.empty(n_pts, dtype=np.int64)
    tr = np.empty(no - n_pts, dtype=np.int64)
    a = 0
    b = 0
    for k in range(no):
        if lbr[obs[k]] == ubr[obs[k]]:
            pts[a] = k
            a += 1
        else:
            tr[b] = k
            b += 1
    nt = tr.shape[0]
    for k in range(n_pts):
        E[pts[k]] = lbr[obs[pts[k]]]
    if nt == 0:
        return E, C, OK
    m_t = np.zeros(nt)
    C_t = np.empty((nt, nt))
    for r in range(nt):
        for q in range(nt):
            C_t[r, q] = sigma[obs[tr[r]], obs[tr[q]]]
    if n_pts > 0:
        S_pp = np.empty((n_pts, n_pts))
        S_pt = np.empty((n_pts, nt))
        zp = np.empty(n_pts)
        for r in range(n_pts):
            zp[r] = lbr[obs[pts[r]]]
            for q in range(n_pts):
                S_pp[r, q] = sigma[obs[pts[r]], obs[pts[q]]]
            for q in range(nt):
                S_pt[r, q] = sigma[obs[pts[r]], obs[tr[q]]]
        try:
            L = np.linalg.cholesky(S_pp)
        except Exception:
            return E, C, SINGULAR
        rhs = np.empty((n_pts, nt + 1))
        rhs[:, :nt] = S_pt
        rhs[:, nt] = zp
        sol = np.linalg.solve(L.T.copy(), np.linalg.solve(L, rhs))
        # gain^T = S_pp^-1 S_pt
        for r in range(nt):
            acc = 0.0
            for q in range(n_pts):
                acc += S_pt[q, r] * sol[q, nt]
            m_t[r] = acc
            for c in range(nt):
                acc = 0.0
                for q in range(n_pts):
                    acc += S_pt[q, r] * sol[q, c]
                C_t[r, c] -= acc
        for r in range(nt):
            for c in range(r + 1, nt):
                v = 0.5 * (C_t[r, c] + C_t[c, r])
                C_t[r, c] = v
                C_t[c, r] = v
    # local pivots among truncated coordinates
    loc = np.full(sigma.shape[0], -1, dtype=np.int64)
    for r in range(nt):
        loc[obs[tr[r]]] = r
    piv = np.empty(nt, dtype=np.int64)
    lb = np.empty(nt)
    ub = np.empty(nt)
    bounded = False
    for r in range(nt):
        g = pivr[obs[tr[r]]]
        piv[r] = loc[g] if g >= 0 else -1
        lb[r] = lbr[obs[tr[r]]]
        ub[r] = ubr[obs[tr[r]]]
        if lb[r] > -np.inf or ub[r] < np.inf:
            bounded = True
    m_box = involute_vec(m_t, piv)
    C_box = involute_mat(C_t, piv)
    if bounded:
        for r in range(nt):
            if lb[r] == -np.inf and ub[r] == np.inf:
                continue
            sd = math.sqrt(C_box[r, r])
            logz, tm, tv = tn_moments((lb[r] - m_box[r]) / sd, (ub[r] - m_box[r]) / sd)
            if not (logz > LOG_EMPTY):
                return E, C, EMPTY
        if method == 0:
            e_box, c_box, _ = ep_box(m_box, C_box, lb, ub, max_sweeps, tol)
        else:
            P = np.linalg.inv(C_box)
            e_box, v = meanfield_box(m_box, P, lb, ub, max_sweeps, tol)
            c_box = C_box.copy()
            for r in range(nt):
                c_box[r, r] = v[r]
    else:
        e_box = m_box
        c_box = C_box
    e_t = involute_vec(e_box, piv)
    c_t = involute_mat(c_box, piv)
    for r in range(nt):
        E[tr[r]] = e_t[r]
        for q in range(nt):
            C[tr[r], tr[q]] = c_t[r, q]
    return E, C, OK


@njit(cache=True, nogil=True)
def involute_vec(x, piv):
    out = x.copy()
    for r in range(x.shape[0]):
        if piv[r] >= 0:
            out[r] = x[piv[r]] - x[r]
    return out


@njit(cache=True, nogil=True)
def involute_mat(X, piv):
    n = X.shape[0]
    tmp = X.copy()
    for r in range(n):
        if piv[r] >= 0:
            for q in range(n):
                tmp[r, q] = X[piv[r], q] - X[r, q]
    out = tmp.copy()
    for q in range(n):
        if piv[q] >= 0:
            for r in range(n):
                out[r, q] = tmp[r, piv[q]] - tmp[r, q]
    return out


@njit(cache=True, nogil=True)
def estep_dense(sigma, lb, ub, pivot, observed, method, max_sweeps, tol, Z, Csum, status):
    """Conditional latent means (rows of ``Z``) and summed conditional covariances.

    Rows with no observation contribute zero mean and ``sigma``.
    """
    n, d = lb.shape
    for i in range(n):
        no = 0
        for j in range(d):
            if observed[i, j]:
                no += 1
        obs = np.empty(no, dtype=np.int64)
        mis = np.empty(d - no, dtype=np.int64)
        a = 0
        b = 0
        for j in range(d):
            if observed[i, j]:
                obs[a] = j
                a += 1
            else:
                mis[b] = j
                b += 1
        if no == 0:
            for j in range(d):
                Z[i, j] = 0.0
                for q in range(d):
                    Csum[j, q] += sigma[j, q]
            status[i] = OK
            continue
        E, C, st = observed_moments(sigma, lb[i], ub[i], pivot[i], obs, method, max_sweeps, tol)
        status[i] = st
        if st != OK:
            continue
        for r in range(no):
            Z[i, obs[r]] = E[r]
            for q in range(no):
                Csum[obs[r], obs[q]] += C[r, q]
        nm = d - no
        if nm == 0:
            continue
        S_oo = np.empty((no, no))
        S_om = np.empty((no, nm))
        for r in range(no):
            for q in range(no):
                S_oo[r, q] = sigma[obs[r], obs[q]]
            for q in range(nm):
                S_om[r, q] = sigma[obs[r], mis[q]]
        try:
            L = np.linalg.cholesky(S_oo)
        except Exception:
            status[i] = SINGULAR
            continue
        # Jt = S_oo^-1 S_om, so J = Jt^T
        Jt = np.linalg.solve(L.T.copy(), np.linalg.solve(L, S_om))
        JC = Jt.T @ C
        for r in range(nm):
            acc = 0.0
            for q in range(no):
                acc += Jt[q, r] * E[q]
            Z[i, mis[r]] = acc
            for q in range(no):
                Csum[mis[r], obs[q]] += JC[r, q]
                Csum[obs[q], mis[r]] += JC[r, q]
        JCJ = JC @ Jt
        JS = Jt.T @ S_om
        for r in range(nm):
            for q in range(nm):
                Csum[mis[r], mis[q]] += sigma[mis[r], mis[q]] - JS[r, q] + JCJ[r, q]
