"""Posterior analytics: elasticities, Engel curves, HPD intervals, Bayes
factors, inclusion probabilities and convergence diagnostics.

Everything here is pure post-processing over completed coefficient systems
or an immutable chain; nothing mutates its inputs.
"""

import fnmatch
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import multivariate_normal

from .model import (
    check_regularity,
    complete_system,
    implicit_utility,
    semi_elasticity_price,
    unpack,
)


class ZeroShareError(ValueError):
    """Raised when an elasticity is requested at a zero expenditure share."""


# ======================================================================
# Semi-elasticities and elasticity matrices
# ======================================================================

def semi_elasticities(full, point, y):
    """Share-price semi-elasticity matrix, utility semi-elasticity and
    expenditure semi-elasticity of the full system at one evaluation point.

    point carries log_prices, h_p and h_y; y is the implicit utility there.
    """
    pt = np.asarray(point.log_prices, dtype=float)
    gamma_semi = semi_elasticity_price(full, point.h_p, y)
    R = full.b.shape[0] - 1
    dy = sum(full.b[r] * r * y ** (r - 1) for r in range(1, R + 1))
    dy = dy + full.D @ point.h_y + full.B @ pt
    c = 1.0 - 0.5 * (pt @ full.B @ pt)
    if abs(c) < 1e-12:
        raise ValueError("degenerate utility denominator at the evaluation point")
    correction = np.eye(len(pt)) + np.outer(dy, pt) / c
    try:
        de = np.linalg.solve(correction, dy / c)
    except np.linalg.LinAlgError:
        raise ValueError("singular expenditure-correction matrix") from None
    return gamma_semi, dy, de


def price_elasticities(gamma_semi, de, shares):
    """Hicksian and Marshallian price-elasticity matrices from the price
    semi-elasticities, the expenditure semi-elasticity and the shares."""
    w = _positive_shares(shares)
    S = len(w)
    eye = np.eye(S)
    hicksian = -eye + gamma_semi / w[:, None] + w[None, :]
    marshallian = -eye + gamma_semi / w[:, None] - np.outer(de / w, w)
    return {"hicksian": hicksian, "marshallian": marshallian}


def income_elasticities(de, shares):
    """Expenditure elasticities of quantity demanded: de_l / w_l + 1."""
    w = _positive_shares(shares)
    return de / w + 1.0


def _positive_shares(shares):
    w = np.asarray(shares, dtype=float)
    zero = np.flatnonzero(w <= 0.0)
    if zero.size:
        raise ZeroShareError(
            "elasticities undefined at zero share (good index %d)" % zero[0]
        )
    return w


@dataclass
class ElasticitySet:
    """Every elasticity block at a single evaluation point."""

    hicksian: np.ndarray
    marshallian: np.ndarray
    income: np.ndarray
    gamma_semi: np.ndarray
    dy_semi: np.ndarray
    de_semi: np.ndarray
    evaluated_at: dict


def elasticity_set(full, point, y):
    """Bundle of all elasticity blocks for a completed system at a point
    carrying shares, log_prices, h, h_p and h_y."""
    gamma_semi, dy, de = semi_elasticities(full, point, y)
    mats = price_elasticities(gamma_semi, de, point.shares)
    return ElasticitySet(
        hicksian=mats["hicksian"],
        marshallian=mats["marshallian"],
        income=income_elasticities(de, point.shares),
        gamma_semi=gamma_semi,
        dy_semi=dy,
        de_semi=de,
        evaluated_at={
            "shares": np.asarray(point.shares, dtype=float).copy(),
            "log_prices": np.asarray(point.log_prices, dtype=float).copy(),
            "y": float(y),
            "h": np.asarray(point.h, dtype=float).copy(),
            "h_p": np.asarray(point.h_p, dtype=float).copy(),
            "h_y": np.asarray(point.h_y, dtype=float).copy(),
        },
    )


def reference_point(data):
    """Representative evaluation point: means for continuous covariates,
    modes for binary ones, weighted mean shares renormalized, mean log
    prices and expenditure."""
    wgt = data.weight / data.weight.sum()

    def col_mix(block):
        out = np.empty(block.shape[1])
        for c in range(block.shape[1]):
            vals = np.unique(block[:, c])
            if vals.size <= 2:
                # binary column: weighted mode
                mass = np.array([wgt[block[:, c] == v].sum() for v in vals])
                out[c] = vals[mass.argmax()]
            else:
                out[c] = wgt @ block[:, c]
        return out

    shares = wgt @ data.W
    shares = shares / shares.sum()
    from .model import Observation

    return Observation(
        shares=shares,
        log_prices=wgt @ data.Pt,
        log_expenditure=float(wgt @ data.e),
        h=col_mix(data.H),
        h_p=col_mix(data.Hp),
        h_y=col_mix(data.Hy),
        z=wgt @ data.Z,
        weight=1.0,
    )


def engel_curve(full, h, h_y, e_grid):
    """Latent share paths along an expenditure grid:
    sum_r b_r e^r + C h + D (h_y e) per grid point; rows sum to one under
    the completed-system restrictions."""
    e_grid = np.asarray(e_grid, dtype=float)
    R = full.b.shape[0] - 1
    base = full.C @ np.asarray(h, dtype=float)
    out = np.empty((len(e_grid), full.b.shape[1]))
    for k, e in enumerate(e_grid):
        w = sum(full.b[r] * e ** r for r in range(R + 1))
        out[k] = w + base + full.D @ (np.asarray(h_y, dtype=float) * e)
    return out


# ======================================================================
# Posterior interval summaries
# ======================================================================

def hpd_interval(samples, mass=0.95):
    """Shortest contiguous interval over the sorted sample containing
    ceil(mass * n) points."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n < 10:
        raise ValueError("need at least 10 samples for an HPD interval")
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must lie strictly between 0 and 1")
    m = int(np.ceil(mass * n))
    widths = x[m - 1:] - x[: n - m + 1]
    i = int(widths.argmin())
    return float(x[i]), float(x[i + m - 1])


@dataclass
class PosteriorSummary:
    point: float
    hpd_low: float
    hpd_high: float
    draw_count: int


def summarize(samples, mass=0.95):
    lo, hi = hpd_interval(samples, mass)
    return PosteriorSummary(
        point=float(np.median(samples)),
        hpd_low=lo,
        hpd_high=hi,
        draw_count=len(samples),
    )


# ======================================================================
# Bayes factors
# ======================================================================

def symmetry_gap_indices(dims):
    """Pairs of packed-coefficient positions whose difference measures the
    departure from symmetry, for an unrestricted packing (row-major price
    blocks)."""
    s, k_x = dims.s, dims.k_x
    start = s * k_x
    pairs = []
    for m in range(dims.M_p + 2):
        base = start + m * s * s
        for l in range(s):
            for t in range(l):
                pairs.append((base + l * s + t, base + t * s + l))
    return pairs


def symmetry_gaps(beta_draws, dims):
    """Restriction-gap coordinates a_lt - a_tl stacked across clusters.
    beta_draws: (K, J, d_beta_unrestricted) -> (K, J * n_pairs)."""
    pairs = symmetry_gap_indices(dims)
    K, J, _ = beta_draws.shape
    out = np.empty((K, J * len(pairs)))
    for j in range(J):
        for q, (a, b) in enumerate(pairs):
            out[:, j * len(pairs) + q] = beta_draws[:, j, a] - beta_draws[:, j, b]
    return out


def bayes_factor_symmetry(chain, priors):
    """2 log Bayes factor in favor of the symmetry restriction, by the
    density-ratio identity: kernel posterior density of the restriction
    gaps at zero over their analytic prior density at zero."""
    if chain.settings.symmetric:
        raise ValueError("symmetry factor needs a chain run without the restriction")
    dims = chain.dims
    gaps = symmetry_gaps(chain.beta, dims)
    K, dim = gaps.shape
    if K < 50 * dim:
        raise ValueError(
            "too few draws for a %d-dimensional gap density (need >= %d)"
            % (dim, 50 * dim)
        )
    # Gaussian-product kernel with the normal-reference bandwidth
    sd = gaps.std(axis=0, ddof=1)
    if (sd == 0).any():
        raise ValueError("degenerate gap coordinate; density at zero undefined")
    h = sd * (4.0 / ((dim + 2.0) * K)) ** (1.0 / (dim + 4.0))
    logk = -0.5 * (gaps / h) ** 2 - np.log(h * np.sqrt(2.0 * np.pi))
    log_post = float(special.logsumexp(logk.sum(axis=1)) - np.log(K))

    pairs = symmetry_gap_indices(dims)
    log_prior = 0.0
    for j in range(dims.J):
        L = np.zeros((len(pairs), priors.beta_mean.shape[1]))
        for q, (a, b) in enumerate(pairs):
            L[q, a], L[q, b] = 1.0, -1.0
        log_prior += float(multivariate_normal.logpdf(
            np.zeros(len(pairs)),
            mean=L @ priors.beta_mean[j],
            cov=L @ priors.beta_cov[j] @ L.T,
        ))
    return 2.0 * (log_post - log_prior)


_REGULARITY_KEY = {"monotonicity": "monotonic", "concavity": "concave"}


def bayes_factor_inequality(chain, which, data, priors, indices=None,
                            prior_draws=400, rng=None):
    """2 log Bayes factor for an inequality restriction (cost monotonicity
    or concavity), as posterior versus prior odds of the constraint holding
    at every evaluation point.

    Probabilities at 0 or 1 are clipped to 1/(count+1) from the boundary and
    flagged, so the returned value is a bound rather than a point estimate.
    """
    key = _REGULARITY_KEY[which]
    dims = chain.dims
    idx = np.arange(data.n) if indices is None else np.asarray(indices)
    K = chain.n_retained
    sat = 0
    for k in range(K):
        fulls = {}
        ok = True
        for i in idx:
            j = int(chain.psi[k, i])
            if j not in fulls:
                fulls[j] = complete_system(
                    unpack(chain.beta[k, j], dims, chain.settings.symmetric), dims
                )
            flags = check_regularity(fulls[j], data.row(i), float(chain.y[k, i]))
            if not flags[key]:
                ok = False
                break
        sat += ok
    post_prob, post_bound = _clip_probability(sat, K)

    rng = np.random.default_rng(0) if rng is None else rng
    sat0 = 0
    chol = [np.linalg.cholesky(priors.beta_cov[j]) for j in range(dims.J)]
    for _ in range(prior_draws):
        phi = rng.dirichlet(priors.alpha)
        betas = [
            priors.beta_mean[j] + chol[j] @ rng.standard_normal(priors.beta_mean.shape[1])
            for j in range(dims.J)
        ]
        fulls = [
            complete_system(unpack(b, dims, chain.settings.symmetric), dims)
            for b in betas
        ]
        labels = rng.choice(dims.J, size=len(idx), p=phi)
        ok = True
        for i, j in zip(idx, labels):
            obs = data.row(i)
            try:
                y = implicit_utility(obs, fulls[j], dims)
                flags = check_regularity(fulls[j], obs, y)
            except (ValueError, FloatingPointError):
                ok = False     # wildly irregular draw: constraint fails
                break
            if not flags[key]:
                ok = False
                break
        sat0 += ok
    prior_prob, prior_bound = _clip_probability(sat0, prior_draws)

    two_log_bf = 2.0 * (
        np.log(post_prob / (1.0 - post_prob))
        - np.log(prior_prob / (1.0 - prior_prob))
    )
    bound = None
    if post_bound == "one" or prior_bound == "zero":
        bound = "lower"
    elif post_bound == "zero" or prior_bound == "one":
        bound = "upper"
    return {
        "two_log_bf": float(two_log_bf),
        "posterior_prob": post_prob,
        "prior_prob": prior_prob,
        "bound": bound,
    }


def _clip_probability(hits, count):
    if hits <= 0:
        return 1.0 / (count + 1.0), "zero"
    if hits >= count:
        return count / (count + 1.0), "one"
    return hits / count, None


# ======================================================================
# Cluster membership and convergence diagnostics
# ======================================================================

def inclusion_probabilities(chain):
    """Per-individual fraction of retained draws assigned to each cluster."""
    K, n = chain.psi.shape
    J = chain.dims.J
    out = np.empty((n, J))
    for j in range(J):
        out[:, j] = (chain.psi == j).mean(axis=0)
    return out


def parameter_names(chain):
    """Canonical flat names for every scalar the chain tracks."""
    from .model import packed_labels

    dims = chain.dims
    names = []
    for j in range(dims.J):
        names += ["cluster%d.%s" % (j + 1, lab)
                  for lab in packed_labels(dims, chain.settings.symmetric)]
    names += ["gamma[%d]" % (q + 1) for q in range(chain.gamma.shape[1])]
    names += ["weight[%d]" % (j + 1) for j in range(dims.J)]
    return names


def parameter_series(chain, name):
    names = parameter_names(chain)
    try:
        pos = names.index(name)
    except ValueError:
        raise ValueError("unknown parameter %r" % name) from None
    d_b = chain.beta.shape[2]
    J = chain.dims.J
    if pos < J * d_b:
        return chain.beta[:, pos // d_b, pos % d_b]
    pos -= J * d_b
    if pos < chain.gamma.shape[1]:
        return chain.gamma[:, pos]
    return chain.phi[:, pos - chain.gamma.shape[1]]


def autocorrelation(series, max_lag):
    x = np.asarray(series, dtype=float)
    if np.ptp(x) == 0.0:   # constant series: no signal, not a 0/0
        return np.zeros(max_lag + 1)
    x = x - x.mean()
    c0 = float(x @ x) / len(x)
    if c0 == 0.0:
        return np.zeros(max_lag + 1)
    acf = np.empty(max_lag + 1)
    for t in range(max_lag + 1):
        acf[t] = (x[: len(x) - t] @ x[t:]) / len(x) / c0
    return acf


def effective_sample_size(series):
    """Initial-positive-sequence truncation of the autocorrelation sum."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if np.ptp(x) == 0.0:
        return float("nan")
    acf = autocorrelation(x, n - 1)
    tau = -1.0
    for m in range(n // 2):
        pair = acf[2 * m] + (acf[2 * m + 1] if 2 * m + 1 < n else 0.0)
        if pair <= 0.0:
            break
        tau += 2.0 * pair
    return n / max(tau, 1.0)


def chain_diagnostics(chain, params="*", max_lag=50):
    """Trace, autocorrelation (to max_lag) and effective sample size for
    every parameter whose canonical name matches the selector pattern(s)."""
    if chain.n_retained < 50:
        raise ValueError("need at least 50 retained draws for diagnostics")
    patterns = [params] if isinstance(params, str) else list(params)
    names = parameter_names(chain)
    chosen = [n for n in names if any(fnmatch.fnmatch(n, p) for p in patterns)]
    if not chosen:
        raise ValueError("selector matched no parameter")
    out = {}
    for name in chosen:
        series = np.asarray(parameter_series(chain, name), dtype=float)
        degenerate = np.ptp(series) == 0.0
        lag = min(max_lag, len(series) - 1)
        out[name] = {
            "trace": series.copy(),
            "acf": autocorrelation(series, lag),
            "ess": effective_sample_size(series),
            "degenerate": bool(degenerate),
        }
    return out


# ======================================================================
# Covariance-correlation reporting helpers
# ======================================================================

def correlation_summary(chain, j):
    """Elementwise median across draws of the joint residual correlation
    matrix for cluster j (median-of-correlations convention)."""
    K = chain.n_retained
    dim = chain.dims.s + chain.dims.d_star
    stack = np.empty((K, dim, dim))
    for k in range(K):
        sigma = chain.covariance_at(k).joint(j)
        d = 1.0 / np.sqrt(np.diag(sigma))
        stack[k] = sigma * np.outer(d, d)
    return np.median(stack, axis=0)


def cluster_profiles(chain, data):
    """Survey-weighted covariate means by modal cluster assignment."""
    K, n = chain.psi.shape
    J = chain.dims.J
    modal = np.empty(n, dtype=int)
    for i in range(n):
        modal[i] = np.bincount(chain.psi[:, i], minlength=J).argmax()
    rows = {}
    for j in range(J):
        mask = modal == j
        wgt = data.weight[mask]
        if wgt.sum() == 0:
            rows[j] = None
            continue
        wgt = wgt / wgt.sum()
        rows[j] = {
            "count": int(mask.sum()),
            "weighted_persons": float(data.weight[mask].sum()),
            "mean_shares": wgt @ data.W[mask],
            "mean_log_expenditure": float(wgt @ data.e[mask]),
            "mean_h": wgt @ data.H[mask] if data.H.shape[1] else np.zeros(0),
        }
    return rows
