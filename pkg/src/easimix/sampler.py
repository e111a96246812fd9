"""Gibbs machinery for the censored mixture demand system.

The error vector of an observation stacks the share-equation residuals
(length s) on top of the first-stage residuals (length d*).  The error
covariance is carried in factored form throughout -- a pooled first-stage
block shared by every cluster, a per-cluster conditional share block, and a
per-cluster regression block mapping first-stage residuals into the
conditional mean of the share residuals -- so the reassembled joint
covariance is positive definite by construction.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special
from scipy.stats import invwishart

from .model import (
    NoConsumptionError,
    build_designs,
    compact_designs,
    complete_system,
    gamma_permutation,
    implicit_utility_batch,
    restriction_map,
    unpack,
    weighted_gram,
)

log = logging.getLogger("easimix.sampler")

_JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class ConditioningError(RuntimeError):
    """Numerical-conditioning failure that survived the jitter ladder."""

    def __init__(self, message, sweep=None):
        if sweep is not None:
            message = "sweep %d: %s" % (sweep, message)
        super().__init__(message)
        self.sweep = sweep


def robust_cholesky(mat, context="matrix"):
    """Lower Cholesky factor, retried with escalating diagonal jitter."""
    mat = np.asarray(mat, dtype=float)
    scale = max(float(np.mean(np.diag(mat))), 1.0)
    eye = np.eye(mat.shape[0])
    for jit in _JITTER_LADDER:
        try:
            return np.linalg.cholesky(mat + jit * scale * eye if jit else mat)
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError("Cholesky of %s failed after jitter retries" % context)


def _chol_solve(L, b):
    return linalg.cho_solve((L, True), b)


def _inv_pd(mat, context="matrix"):
    L = robust_cholesky(mat, context)
    out = _chol_solve(L, np.eye(mat.shape[0]))
    return 0.5 * (out + out.T)


def _draw_from_precision(rng, prec_chol, mean):
    z = rng.standard_normal(mean.shape[0])
    return mean + linalg.solve_triangular(prec_chol.T, z, lower=False)


# ======================================================================
# Covariance blocks, priors, state, chain containers
# ======================================================================

@dataclass
class CovarianceBlocks:
    """Factored error covariance.

    uu           -- pooled first-stage covariance (d* x d*), common to all
                    clusters.
    eps_given_u  -- per-cluster conditional covariance of the share residuals
                    given the first-stage residuals (J x s x s).
    reg_u_to_eps -- per-cluster regression block (J x d* x s); the conditional
                    mean of the share residuals is reg' u.
    """

    uu: np.ndarray
    eps_given_u: np.ndarray
    reg_u_to_eps: np.ndarray

    @property
    def n_clusters(self):
        return self.eps_given_u.shape[0]

    def cross(self, j):
        """Cov(share residual, first-stage residual) for cluster j (s x d*)."""
        return self.reg_u_to_eps[j].T @ self.uu

    def eps_eps(self, j):
        """Marginal share-residual covariance for cluster j."""
        reg = self.reg_u_to_eps[j]
        return self.eps_given_u[j] + reg.T @ self.uu @ reg

    def uu_given_eps(self, j):
        """Conditional first-stage covariance given the share residuals."""
        cross = self.cross(j)
        i_ee = _inv_pd(self.eps_eps(j), "marginal share covariance")
        out = self.uu - cross.T @ i_ee @ cross
        return 0.5 * (out + out.T)

    def reg_eps_to_u(self, j):
        """Regression block (s x d*); the conditional mean of u is reg' eps."""
        return _inv_pd(self.eps_eps(j), "marginal share covariance") @ self.cross(j)

    def joint(self, j):
        """Reassembled joint residual covariance for cluster j."""
        cross = self.cross(j)
        return np.block([[self.eps_eps(j), cross], [cross.T, self.uu]])

    def copy(self):
        return CovarianceBlocks(
            self.uu.copy(), self.eps_given_u.copy(), self.reg_u_to_eps.copy()
        )


@dataclass
class PriorHyperparams:
    """Conjugate prior settings for every conditional in the sampler."""

    beta_mean: np.ndarray       # (J, d_beta) structural coefficient means
    beta_cov: np.ndarray        # (J, d_beta, d_beta)
    gamma_mean: np.ndarray      # (d_gamma,) first-stage coefficient mean
    gamma_cov: np.ndarray       # (d_gamma, d_gamma)
    alpha: np.ndarray           # (J,) Dirichlet mass for the mixture weights
    nu_uu: float                # first-stage inverse-Wishart dof
    R_uu: np.ndarray            # (d*, d*) first-stage scale matrix
    nu_eps: np.ndarray          # (J,) conditional share-block dof
    R_eps_given_u: np.ndarray   # (J, s, s) conditional share-block scales
    R_u_to_eps: np.ndarray      # (J, d*, s) cross-product term for the regression block

    @classmethod
    def default(cls, dims, symmetric=True):
        """Vague settings: zero means, 1000*I coefficient covariances, uniform
        Dirichlet mass 1/J, identity scale matrices, and degrees of freedom at
        the joint residual dimension (just enough for a proper prior)."""
        d_b = dims.d_beta(symmetric)
        d, s, J = dims.d_star, dims.s, dims.J
        joint_dim = float(s + d)
        return cls(
            beta_mean=np.zeros((J, d_b)),
            beta_cov=np.stack([1000.0 * np.eye(d_b)] * J),
            gamma_mean=np.zeros(dims.d_gamma),
            gamma_cov=1000.0 * np.eye(dims.d_gamma),
            alpha=np.full(J, 1.0 / J),
            nu_uu=joint_dim,
            R_uu=np.eye(d),
            nu_eps=np.full(J, joint_dim),
            R_eps_given_u=np.stack([np.eye(s)] * J),
            R_u_to_eps=np.zeros((J, d, s)),
        )

    def validate(self, dims, symmetric=True):
        d_b = dims.d_beta(symmetric)
        J, s, d = dims.J, dims.s, dims.d_star
        if self.beta_mean.shape != (J, d_b) or self.beta_cov.shape != (J, d_b, d_b):
            raise ValueError("structural prior blocks do not match dimensions")
        if self.gamma_mean.shape != (dims.d_gamma,):
            raise ValueError("first-stage prior mean does not match dimensions")
        if not (np.asarray(self.alpha) > 0).all():
            raise ValueError("Dirichlet mass must be strictly positive")
        if not self.nu_uu - s > d - 1:
            raise ValueError("first-stage dof too small for a proper prior")
        if not (np.asarray(self.nu_eps) > s - 1).all():
            raise ValueError("share-block dof too small for a proper prior")
        for j in range(J):
            for mat, name in (
                (self.beta_cov[j], "structural prior covariance"),
                (self.R_eps_given_u[j], "share-block scale"),
            ):
                if not np.allclose(mat, mat.T):
                    raise ValueError("%s must be symmetric" % name)
                robust_cholesky(mat, name)
        for mat, name in ((self.gamma_cov, "first-stage prior covariance"),
                          (self.R_uu, "first-stage scale")):
            if not np.allclose(mat, mat.T):
                raise ValueError("%s must be symmetric" % name)
            robust_cholesky(mat, name)


@dataclass
class SamplerState:
    """Current value of every unknown the Gibbs sweep cycles over."""

    dims: object
    beta: np.ndarray       # (J, d_beta)
    gamma: np.ndarray      # (d_gamma,)
    cov: CovarianceBlocks
    psi: np.ndarray        # (n,) cluster labels in 0..J-1
    phi: np.ndarray        # (J,) mixture weights
    latent: np.ndarray     # (n, S) latent shares
    y: np.ndarray          # (n,) implicit utility
    symmetric: bool = True


@dataclass
class ChainSettings:
    sweeps: int = 15000
    burn_in: int = 5000
    thinning: int = 10
    seed: int = 0
    tmvn_sweeps: int = 10
    symmetric: bool = True

    @property
    def retained(self):
        return (self.sweeps - self.burn_in) // self.thinning

    def validate(self):
        if not self.sweeps > self.burn_in >= 0:
            raise ValueError("need sweeps > burn_in >= 0")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.retained < 1:
            raise ValueError("settings retain no snapshots")


@dataclass
class Chain:
    """Thinned snapshots plus per-sweep audit scalars."""

    dims: object
    settings: ChainSettings
    beta: np.ndarray           # (K, J, d_beta)
    gamma: np.ndarray          # (K, d_gamma)
    uu: np.ndarray             # (K, d*, d*)
    eps_given_u: np.ndarray    # (K, J, s, s)
    reg_u_to_eps: np.ndarray   # (K, J, d*, s)
    phi: np.ndarray            # (K, J)
    psi: np.ndarray            # (K, n) int16 labels
    latent: np.ndarray         # (K, n, S)
    y: np.ndarray              # (K, n)
    log_density: np.ndarray    # (sweeps,) mixture log density audit
    counts: np.ndarray         # (sweeps, J) cluster occupancy audit
    non_identified: bool = False

    @property
    def n_retained(self):
        return self.beta.shape[0]

    def covariance_at(self, k):
        return CovarianceBlocks(
            uu=self.uu[k], eps_given_u=self.eps_given_u[k],
            reg_u_to_eps=self.reg_u_to_eps[k],
        )


# ======================================================================
# Workspace: cached maps and per-sweep design products
# ======================================================================

@dataclass
class _Workspace:
    T: np.ndarray                 # packing map for the structural design
    Tg: np.ndarray                # permutation for the first-stage design
    prior_beta_prec: np.ndarray   # (J, d_beta, d_beta)
    prior_beta_rhs: np.ndarray    # (J, d_beta)
    prior_gamma_prec: np.ndarray
    prior_gamma_rhs: np.ndarray
    Fc: np.ndarray = None         # (n, k_x + d*) compact structural rows
    Gc: np.ndarray = None         # (n, k_x + ell) compact first-stage rows
    Pstar: np.ndarray = None      # (n, d*) endogenous regressors
    pred_w: np.ndarray = None     # (J, n, s) share predictions per cluster
    pred_p: np.ndarray = None     # (n, d*) first-stage predictions


def _make_workspace(state, data, priors):
    dims = state.dims
    bprec = np.stack([
        _inv_pd(priors.beta_cov[j], "structural prior covariance")
        for j in range(dims.J)
    ])
    gprec = _inv_pd(priors.gamma_cov, "first-stage prior covariance")
    work = _Workspace(
        T=restriction_map(dims, state.symmetric),
        Tg=gamma_permutation(dims),
        prior_beta_prec=bprec,
        prior_beta_rhs=np.einsum("jkl,jl->jk", bprec, priors.beta_mean),
        prior_gamma_prec=gprec,
        prior_gamma_rhs=gprec @ priors.gamma_mean,
    )
    _refresh_designs(work, state, data)
    _refresh_share_predictions(work, state)
    _refresh_price_predictions(work, state)
    return work


def _refresh_designs(work, state, data):
    work.Fc, work.Gc, work.Pstar = compact_designs(data, state.y, state.dims)


def _refresh_share_predictions(work, state, j=None):
    dims = state.dims
    if work.pred_w is None:
        work.pred_w = np.empty((dims.J, len(state.y), dims.s))
    for jj in range(dims.J) if j is None else (j,):
        rows = (work.T @ state.beta[jj]).reshape(dims.s, -1)
        work.pred_w[jj] = work.Fc @ rows.T


def _refresh_price_predictions(work, state):
    rows = (work.Tg @ state.gamma).reshape(state.dims.d_star, -1)
    work.pred_p = work.Gc @ rows.T


# ======================================================================
# Conjugate posterior hyperparameters (exposed for direct verification)
# ======================================================================

def beta_update(prior_mean, prior_cov, design_compact, responses, weight, restriction):
    """Posterior (mean, cov) for one cluster's packed structural coefficients.

    design_compact holds the cluster's compact regressor rows [x', p*'],
    responses the endogeneity-corrected share responses, and weight the
    inverse conditional share covariance.
    """
    prior_prec = _inv_pd(prior_cov, "structural prior covariance")
    gram, rhs = weighted_gram(design_compact, responses, weight, restriction)
    L = robust_cholesky(prior_prec + gram, "structural posterior precision")
    cov = _chol_solve(L, np.eye(len(prior_mean)))
    mean = _chol_solve(L, prior_prec @ prior_mean + rhs)
    return mean, cov


def gamma_update(prior_mean, prior_cov, groups, permutation):
    """Posterior (mean, cov) for the pooled first-stage coefficients.

    groups: per-cluster triples (design_compact, responses, weight) where the
    responses are corrected by the conditional mean of u given the share
    residuals and weight is the inverse conditional first-stage covariance.
    """
    prior_prec = _inv_pd(prior_cov, "first-stage prior covariance")
    prec = prior_prec.copy()
    rhs = prior_prec @ prior_mean
    for design_compact, responses, weight in groups:
        gram, add = weighted_gram(design_compact, responses, weight, permutation)
        prec += gram
        rhs += add
    L = robust_cholesky(prec, "first-stage posterior precision")
    cov = _chol_solve(L, np.eye(len(prior_mean)))
    mean = _chol_solve(L, rhs)
    return mean, cov


def first_stage_scale_update(priors, dims, u_resid):
    """(dof, scale) for the pooled first-stage covariance draw."""
    df = priors.nu_uu - dims.s + len(u_resid)
    scale = priors.R_uu + u_resid.T @ u_resid
    return df, 0.5 * (scale + scale.T)


def cluster_scale_update(priors, j, eps_resid, u_resid):
    """Posterior pieces for cluster j's conditional share scale and
    regression block: (dof, scale, reg_mean, reg_row_cov)."""
    cross = priors.R_u_to_eps[j] + u_resid.T @ eps_resid
    row_prec = priors.R_uu + u_resid.T @ u_resid
    row_cov = _inv_pd(row_prec, "regression row precision")
    reg_mean = row_cov @ cross
    scale = (
        priors.R_eps_given_u[j]
        + eps_resid.T @ eps_resid
        - cross.T @ row_cov @ cross
    )
    df = float(priors.nu_eps[j] + len(eps_resid))
    return df, 0.5 * (scale + scale.T), reg_mean, row_cov


def weight_posterior_alpha(alpha, counts):
    """Dirichlet parameter for the mixture weights given assignment counts."""
    return np.asarray(alpha, dtype=float) + np.asarray(counts, dtype=float)


# ======================================================================
# Conditional draws
# ======================================================================

def draw_beta_cluster(rng, state, data, priors, j, work=None):
    """One conjugate-normal draw of cluster j's packed structural coefficients,
    with the endogeneity correction from the first-stage residuals."""
    if work is None:
        work = _make_workspace(state, data, priors)
    mask = state.psi == j
    if not mask.any():
        L0 = robust_cholesky(priors.beta_cov[j], "structural prior covariance")
        return priors.beta_mean[j] + L0 @ rng.standard_normal(priors.beta_mean.shape[1])
    s_inv = _inv_pd(state.cov.eps_given_u[j], "conditional share covariance")
    u_resid = work.Pstar[mask] - work.pred_p[mask]
    responses = state.latent[mask, :state.dims.s] - u_resid @ state.cov.reg_u_to_eps[j]
    gram, rhs = weighted_gram(work.Fc[mask], responses, s_inv, work.T)
    L = robust_cholesky(work.prior_beta_prec[j] + gram, "structural posterior precision")
    mean = _chol_solve(L, work.prior_beta_rhs[j] + rhs)
    return _draw_from_precision(rng, L, mean)


def draw_gamma(rng, state, data, priors, work=None):
    """One draw of the homogeneous first-stage coefficients, pooling every
    cluster with its own conditional weighting and structural-residual
    correction."""
    if work is None:
        work = _make_workspace(state, data, priors)
    dims = state.dims
    prec = work.prior_gamma_prec.copy()
    rhs = work.prior_gamma_rhs.copy()
    for j in range(dims.J):
        mask = state.psi == j
        if not mask.any():
            continue
        s_inv = _inv_pd(state.cov.uu_given_eps(j), "conditional first-stage covariance")
        eps_resid = state.latent[mask, :dims.s] - work.pred_w[j][mask]
        responses = work.Pstar[mask] - eps_resid @ state.cov.reg_eps_to_u(j)
        gram, add = weighted_gram(work.Gc[mask], responses, s_inv, work.Tg)
        prec += gram
        rhs += add
    L = robust_cholesky(prec, "first-stage posterior precision")
    mean = _chol_solve(L, rhs)
    return _draw_from_precision(rng, L, mean)


def _assignment_log_densities(state, data, work):
    """log phi_j plus the joint residual log density, with constants."""
    dims = state.dims
    k = dims.s + dims.d_star
    u_resid = work.Pstar - work.pred_p
    out = np.empty((data.n, dims.J))
    with np.errstate(divide="ignore"):
        log_phi = np.log(state.phi)
    for j in range(dims.J):
        L = robust_cholesky(state.cov.joint(j), "joint residual covariance")
        resid = np.hstack([state.latent[:, :dims.s] - work.pred_w[j], u_resid])
        half = linalg.solve_triangular(L, resid.T, lower=True)
        quad = np.einsum("ki,ki->i", half, half)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, j] = log_phi[j] - 0.5 * (k * np.log(2.0 * np.pi) + logdet + quad)
    return out


def _draw_assignments(rng, log_weights, priors, J):
    if np.isnan(log_weights).any():
        raise ConditioningError("non-finite assignment density")
    top = log_weights.max(axis=1, keepdims=True)
    if not np.isfinite(top).all():
        raise ConditioningError("assignment density vanished for an observation")
    prob = np.exp(log_weights - top)
    prob /= prob.sum(axis=1, keepdims=True)
    cum = np.cumsum(prob, axis=1)
    u = rng.random(len(prob))
    psi = np.minimum((cum < u[:, None]).sum(axis=1), J - 1)
    counts = np.bincount(psi, minlength=J)
    phi = rng.dirichlet(weight_posterior_alpha(priors.alpha, counts))
    return psi.astype(np.int64), phi


def draw_assignments_and_weights(rng, state, data, priors, work=None):
    """Redraw every cluster label from its categorical posterior, then the
    mixture weights from the Dirichlet with the new counts."""
    if work is None:
        work = _make_workspace(state, data, priors)
    log_weights = _assignment_log_densities(state, data, work)
    return _draw_assignments(rng, log_weights, priors, state.dims.J)


def _invwishart_draw(rng, df, scale, context):
    try:
        draw = invwishart.rvs(df=df, scale=scale, random_state=rng)
    except (np.linalg.LinAlgError, ValueError) as err:
        raise ConditioningError("inverse-Wishart draw for %s: %s" % (context, err)) from None
    return np.atleast_2d(draw)


def draw_covariances(rng, state, data, priors, work=None):
    """Redraw the factored covariance: pooled first-stage block, then each
    cluster's conditional share scale and regression block."""
    if work is None:
        work = _make_workspace(state, data, priors)
    dims = state.dims
    u_resid = work.Pstar - work.pred_p
    df_uu, scale_uu = first_stage_scale_update(priors, dims, u_resid)
    uu = _invwishart_draw(rng, df_uu, scale_uu, "pooled first-stage scale")
    eps_given_u = np.empty_like(state.cov.eps_given_u)
    reg = np.empty_like(state.cov.reg_u_to_eps)
    for j in range(dims.J):
        mask = state.psi == j
        eps_resid = state.latent[mask, :dims.s] - work.pred_w[j][mask]
        df_j, scale_j, reg_mean, row_cov = cluster_scale_update(
            priors, j, eps_resid, u_resid[mask]
        )
        eps_given_u[j] = _invwishart_draw(rng, df_j, scale_j, "share scale %d" % j)
        L_row = robust_cholesky(row_cov, "regression row covariance")
        L_col = robust_cholesky(eps_given_u[j], "conditional share covariance")
        z = rng.standard_normal(reg_mean.shape)
        reg[j] = reg_mean + L_row @ z @ L_col.T
    return CovarianceBlocks(uu=uu, eps_given_u=eps_given_u, reg_u_to_eps=reg)


# ======================================================================
# Truncated multivariate normal (non-positive orthant)
# ======================================================================

def _trunc_norm_below(rng, bound):
    """Standard-normal draws conditioned on z <= bound, elementwise.

    Inverse CDF in the bulk; past -6 the CDF underflows, so switch to an
    exponential-proposal rejection sampler for the far tail.
    """
    bound = np.asarray(bound, dtype=float)
    out = np.empty_like(bound)
    easy = bound > -6.0
    if easy.any():
        b = bound[easy]
        tail = rng.random(b.shape) * special.ndtr(b)
        out[easy] = special.ndtri(np.clip(tail, 1e-300, None))
    hard = ~easy
    if hard.any():
        a = -bound[hard]
        draw = np.empty_like(a)
        todo = np.arange(a.size)
        while todo.size:
            at = a[todo]
            prop = at + rng.standard_exponential(todo.size) / at
            accept = rng.random(todo.size) <= np.exp(-0.5 * (prop - at) ** 2)
            draw[todo[accept]] = prop[accept]
            todo = todo[~accept]
        out[hard] = -draw
    return out


def _sample_tmvn_rows(rng, means, cov, sweeps, starts=None):
    """Coordinate-Gibbs truncated-normal draws, one per row of `means`, all
    sharing the covariance and restricted to the non-positive orthant."""
    means = np.asarray(means, dtype=float)
    g, k = means.shape
    prec = _inv_pd(cov, "truncated-normal covariance")
    cond_sd = 1.0 / np.sqrt(np.diag(prec))
    x = np.minimum(means if starts is None else np.asarray(starts, dtype=float), 0.0)
    x = x.copy()
    for _ in range(sweeps):
        for c in range(k):
            dev = (x - means) @ prec[:, c] - (x[:, c] - means[:, c]) * prec[c, c]
            mu_c = means[:, c] - dev / prec[c, c]
            z = _trunc_norm_below(rng, -mu_c / cond_sd[c])
            x[:, c] = np.minimum(mu_c + cond_sd[c] * z, 0.0)
    return x


def sample_truncated_mvn(rng, mean, cov, sweeps=10, start=None):
    """One draw from N(mean, cov) restricted to the non-positive orthant."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    starts = None if start is None else np.atleast_2d(np.asarray(start, dtype=float))
    return _sample_tmvn_rows(rng, mean[None, :], cov, sweeps, starts)[0]


# ======================================================================
# Latent-share augmentation
# ======================================================================

def recompose_latent_shares(observed, censored_mask, censored_draws):
    """Rebuild a full latent vector from fresh censored draws: every
    non-censored coordinate scales its observed share by one minus the drawn
    censored total, which keeps the exact unit sum and maps back to the
    observed shares identically."""
    observed = np.asarray(observed, dtype=float)
    total = float(np.sum(censored_draws))
    out = (1.0 - total) * observed
    out[: len(censored_mask)][censored_mask] = censored_draws
    return out


def _censored_conditional_ops(cov, j, pattern, d_star):
    """Shared pieces of the censored-block conditional for one cluster and
    censoring pattern: (gain K, conditional covariance, censored and positive
    index sets within the modeled shares)."""
    joint = cov.joint(j)
    s = len(pattern)
    c_idx = np.flatnonzero(pattern)
    p_idx = np.flatnonzero(~pattern)
    tau_idx = np.concatenate([p_idx, np.arange(s, s + d_star)])
    gain = joint[np.ix_(c_idx, tau_idx)] @ _inv_pd(
        joint[np.ix_(tau_idx, tau_idx)], "conditioning covariance"
    )
    cond = joint[np.ix_(c_idx, c_idx)] - gain @ joint[np.ix_(tau_idx, c_idx)]
    return gain, 0.5 * (cond + cond.T), c_idx, p_idx


def draw_latent_shares(rng, state, data, j, i, sweeps=10):
    """Redraw observation i's latent share vector given cluster j's
    parameters, conditioning the censored block on the observed positive
    shares and the first-stage residuals."""
    dims = state.dims
    w = data.W[i]
    if not (w > 0).any():
        raise NoConsumptionError("observation has no positive share")
    censored = w[: dims.s] == 0.0
    if not censored.any():
        return w.copy()
    obs = data.row(i)
    pair = build_designs(obs, float(state.y[i]), dims, state.symmetric)
    pred_w = pair.F @ state.beta[j]
    u_resid = pair.p_star - pair.G @ state.gamma
    gain, cond, c_idx, p_idx = _censored_conditional_ops(state.cov, j, censored, dims.d_star)
    v = np.concatenate([w[p_idx] - pred_w[p_idx], u_resid])
    mean = pred_w[c_idx] + gain @ v
    start = np.minimum(state.latent[i, : dims.s][c_idx], 0.0)
    draw = sample_truncated_mvn(rng, mean, cond, sweeps=sweeps, start=start)
    return recompose_latent_shares(w, censored, draw)


def _draw_all_latents(rng, state, data, work, sweeps):
    """Vectorized latent-share pass: group observations by (cluster,
    censoring pattern), draw each group's censored block in one batch."""
    dims = state.dims
    s = dims.s
    W = data.W
    lat = W.copy()
    censored = W[:, :s] == 0.0
    needs = censored.any(axis=1)
    if not needs.any():
        return lat
    code = censored @ (1 << np.arange(s))
    u_resid = work.Pstar - work.pred_p
    for j in range(dims.J):
        in_j = (state.psi == j) & needs
        if not in_j.any():
            continue
        for pat in np.unique(code[in_j]):
            rows = np.flatnonzero(in_j & (code == pat))
            pattern = censored[rows[0]]
            gain, cond, c_idx, p_idx = _censored_conditional_ops(
                state.cov, j, pattern, dims.d_star
            )
            pred = work.pred_w[j][rows]
            v = np.hstack([W[np.ix_(rows, p_idx)] - pred[:, p_idx], u_resid[rows]])
            means = pred[:, c_idx] + v @ gain.T
            starts = np.minimum(state.latent[np.ix_(rows, c_idx)], 0.0)
            draws = _sample_tmvn_rows(rng, means, cond, sweeps, starts)
            scale = 1.0 - draws.sum(axis=1)
            lat[rows] = scale[:, None] * W[rows]
            lat[np.ix_(rows, c_idx)] = draws
    return lat


# ======================================================================
# Chain driver
# ======================================================================

def _split_labels(data, J):
    """Initial labels: quantile bins along the leading principal direction of
    the standardized shares and log expenditure.  A crude deterministic
    separation, but it keeps a symmetric start from wandering into an
    absorbing single-cluster state before the covariances adapt."""
    if data.n == 0 or J == 1:
        return np.zeros(data.n, dtype=int)
    X = np.column_stack([data.W[:, :-1], data.e])
    X = X - X.mean(axis=0)
    sd = X.std(axis=0)
    X = X / np.where(sd > 0, sd, 1.0)
    _, vecs = np.linalg.eigh(X.T @ X)
    score = X @ vecs[:, -1]
    ranks = np.argsort(np.argsort(score, kind="stable"), kind="stable")
    return np.minimum((ranks * J) // data.n, J - 1).astype(int)


def initial_state(rng, data, priors, dims, symmetric=True):
    """Starting point: coefficients at the prior means, identity-shaped
    covariance blocks, principal-direction quantile labels, censored latents
    at -0.1/S with positives rescaled to keep the exact unit sum."""
    n, S, s = data.n, data.S, dims.s
    lat = data.W.copy()
    censored = data.W[:, :s] == 0.0
    if censored.any():
        fill = -0.1 / S
        scale = 1.0 - fill * censored.sum(axis=1)
        lat = scale[:, None] * data.W
        lat[:, :s][censored] = fill
    state = SamplerState(
        dims=dims,
        beta=priors.beta_mean.copy(),
        gamma=priors.gamma_mean.copy(),
        cov=CovarianceBlocks(
            uu=priors.R_uu.copy(),
            eps_given_u=priors.R_eps_given_u.copy(),
            reg_u_to_eps=np.zeros((dims.J, dims.d_star, s)),
        ),
        psi=_split_labels(data, dims.J),
        phi=np.asarray(priors.alpha, dtype=float) / np.sum(priors.alpha),
        latent=lat,
        y=np.zeros(n),
        symmetric=symmetric,
    )
    state.y = _refresh_y(state, data)
    return state


def _refresh_y(state, data):
    """Implicit utility from observed shares under each cluster's completed
    coefficient system, routed by the current labels."""
    dims = state.dims
    y = np.empty(data.n)
    for j in range(dims.J):
        mask = state.psi == j
        if not mask.any():
            continue
        full = complete_system(unpack(state.beta[j], dims, state.symmetric), dims)
        try:
            y[mask] = implicit_utility_batch(data, full)[mask]
        except ValueError as err:
            raise ConditioningError(str(err)) from None
    return y


def _identification_flag(work):
    """True when either stacked design loses column rank (degenerate data)."""
    rank_f = np.linalg.matrix_rank(work.Fc)
    rank_g = np.linalg.matrix_rank(work.Gc)
    return bool(rank_f < work.Fc.shape[1] or rank_g < work.Gc.shape[1])


def _one_sweep(rng, state, data, priors, work, settings):
    dims = state.dims
    # (1) implicit utility under the coefficients/labels entering the sweep
    state.y = _refresh_y(state, data)
    _refresh_designs(work, state, data)
    _refresh_share_predictions(work, state)
    _refresh_price_predictions(work, state)
    # (2) latent shares
    state.latent = _draw_all_latents(rng, state, data, work, settings.tmvn_sweeps)
    # (3) structural coefficients, cluster by cluster
    for j in range(dims.J):
        state.beta[j] = draw_beta_cluster(rng, state, data, priors, j, work=work)
        _refresh_share_predictions(work, state, j)
    # (4) pooled first stage
    state.gamma = draw_gamma(rng, state, data, priors, work=work)
    _refresh_price_predictions(work, state)
    # (5) covariance blocks
    state.cov = draw_covariances(rng, state, data, priors, work=work)
    # (6) labels and weights
    log_weights = _assignment_log_densities(state, data, work)
    state.psi, state.phi = _draw_assignments(rng, log_weights, priors, dims.J)
    log_density = float(special.logsumexp(log_weights, axis=1).sum())
    return log_density, np.bincount(state.psi, minlength=dims.J)


def run_chain(data, priors, settings, dims):
    """Run the Gibbs sampler and return the thinned chain.  Deterministic for
    a fixed seed; numerical failures carry the sweep index."""
    settings.validate()
    priors.validate(dims, settings.symmetric)
    rng = np.random.default_rng(settings.seed)
    state = initial_state(rng, data, priors, dims, settings.symmetric)
    work = _make_workspace(state, data, priors)
    non_identified = _identification_flag(work)
    if non_identified:
        log.warning("design matrices are column-rank deficient; "
                    "posterior is prior-dominated in unidentified directions")

    K = settings.retained
    n, S, s, J = data.n, data.S, dims.s, dims.J
    chain = Chain(
        dims=dims,
        settings=settings,
        beta=np.empty((K, J, dims.d_beta(settings.symmetric))),
        gamma=np.empty((K, dims.d_gamma)),
        uu=np.empty((K, dims.d_star, dims.d_star)),
        eps_given_u=np.empty((K, J, s, s)),
        reg_u_to_eps=np.empty((K, J, dims.d_star, s)),
        phi=np.empty((K, J)),
        psi=np.empty((K, n), dtype=np.int16),
        latent=np.empty((K, n, S)),
        y=np.empty((K, n)),
        log_density=np.empty(settings.sweeps),
        counts=np.empty((settings.sweeps, J), dtype=np.int64),
        non_identified=non_identified,
    )
    k = 0
    for t in range(1, settings.sweeps + 1):
        try:
            chain.log_density[t - 1], chain.counts[t - 1] = _one_sweep(
                rng, state, data, priors, work, settings
            )
        except ConditioningError as err:
            raise ConditioningError(str(err), sweep=t) from None
        if t > settings.burn_in and (t - settings.burn_in) % settings.thinning == 0:
            for j in range(J):
                try:
                    np.linalg.cholesky(state.cov.joint(j))
                except np.linalg.LinAlgError:
                    raise ConditioningError(
                        "retained covariance not positive definite (cluster %d)" % j,
                        sweep=t,
                    ) from None
            chain.beta[k] = state.beta
            chain.gamma[k] = state.gamma
            chain.uu[k] = state.cov.uu
            chain.eps_given_u[k] = state.cov.eps_given_u
            chain.reg_u_to_eps[k] = state.cov.reg_u_to_eps
            chain.phi[k] = state.phi
            chain.psi[k] = state.psi
            chain.latent[k] = state.latent
            chain.y[k] = state.y
            k += 1
    return chain
