"""Core EASI demand system: shapes, coefficient packing, design matrices,
implicit utility, the latent/observed share map, base-good completion and
microeconomic regularity checks.

Throughout, the S-th good is the base category: the estimable system has
s = S - 1 share equations in relative log prices p_l = pt_l - pt_S, and the
base good's row/column of every coefficient block is recovered from the
homogeneity and unit-sum restrictions (see ``complete_system``).
"""

import numpy as np
from dataclasses import dataclass, field


class NoConsumptionError(ValueError):
    """Raised when a latent share vector has no strictly positive component."""


class FixedPointError(RuntimeError):
    """Raised when the (y, w*) share fixed point fails to converge."""


# ======================================================================
# Shape constants
# ======================================================================

@dataclass(frozen=True)
class Dimensions:
    """Model shape constants.

    S       goods (>= 2); the S-th is the base category
    R       Engel polynomial degree in implicit utility (>= 1)
    M       demographic covariates entering levels
    M_p     covariates interacting with prices (the constant block is implicit)
    M_y     covariates interacting with implicit utility
    ell     excluded instruments; identification needs ell >= s*(M_p+2)
    J       mixture components (>= 1)
    """

    S: int
    R: int = 1
    M: int = 0
    M_p: int = 0
    M_y: int = 0
    ell: int = 0
    J: int = 1

    def __post_init__(self):
        if self.S < 2:
            raise ValueError("need at least two goods (one modeled, one base)")
        if self.R < 1:
            raise ValueError("Engel polynomial degree must be >= 1")
        if min(self.M, self.M_p, self.M_y, self.ell) < 0 or self.J < 1:
            raise ValueError("counts must be non-negative and J >= 1")
        if self.ell < self.d_star:
            raise ValueError(
                "order condition violated: ell=%d < s*(M_p+2)=%d"
                % (self.ell, self.d_star)
            )

    @property
    def s(self):
        return self.S - 1

    @property
    def d_star(self):
        # endogenous price regressors: one s-block per price interaction plus p*y
        return self.s * (self.M_p + 2)

    @property
    def k_x(self):
        # exogenous regressor vector x = [1, y, ..., y^R, h, h_y * y]
        return 1 + self.R + self.M + self.M_y

    def d_beta(self, symmetric=True):
        vech = self.s * (self.s + 1) // 2 if symmetric else self.s * self.s
        return self.s * self.k_x + (self.M_p + 2) * vech

    @property
    def d_gamma(self):
        return self.d_star * (self.k_x + self.ell)


# ======================================================================
# vech / duplication machinery (column-major lower triangle)
# ======================================================================

def vech_indices(s):
    """(row, col) pairs of the lower triangle, column by column."""
    return [(i, j) for j in range(s) for i in range(j, s)]


def duplication_matrix(s):
    """D_s with D_s @ vech(A) = vec(A) (column-major vec) for symmetric A."""
    pairs = vech_indices(s)
    D = np.zeros((s * s, len(pairs)))
    for k, (i, j) in enumerate(pairs):
        D[j * s + i, k] = 1.0
        D[i * s + j, k] = 1.0
    return D


def vech(A):
    s = A.shape[0]
    return np.array([A[i, j] for i, j in vech_indices(s)])


def unvech(v, s):
    A = np.zeros((s, s))
    for k, (i, j) in enumerate(vech_indices(s)):
        A[i, j] = v[k]
        A[j, i] = v[k]
    return A


# ======================================================================
# Coefficients
# ======================================================================

@dataclass
class EasiCoefficients:
    """Reduced (base-good-removed) coefficient blocks.

    b : (R+1, s)    Engel polynomial coefficients, b[r] multiplies y^r
    A : (M_p+1, s, s) price blocks; A[0] is the constant block, A[m] (m>=1)
                    multiplies the m-th price-interacting covariate
    B : (s, s)      price x utility block
    C : (s, M)      demographic levels
    D : (s, M_y)    utility interactions
    symmetric       whether the Slutsky symmetry restriction is imposed on A, B
    """

    b: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    symmetric: bool = True

    @classmethod
    def zeros(cls, dims, symmetric=True):
        s = dims.s
        return cls(
            b=np.zeros((dims.R + 1, s)),
            A=np.zeros((dims.M_p + 1, s, s)),
            B=np.zeros((s, s)),
            C=np.zeros((s, dims.M)),
            D=np.zeros((s, dims.M_y)),
            symmetric=symmetric,
        )

    def validate(self, dims):
        s = dims.s
        assert self.b.shape == (dims.R + 1, s)
        assert self.A.shape == (dims.M_p + 1, s, s)
        assert self.B.shape == (s, s)
        assert self.C.shape == (s, dims.M)
        assert self.D.shape == (s, dims.M_y)
        if self.symmetric:
            for m in range(dims.M_p + 1):
                if not np.allclose(self.A[m], self.A[m].T, atol=1e-12):
                    raise ValueError("A[%d] not symmetric under symmetry restriction" % m)
            if not np.allclose(self.B, self.B.T, atol=1e-12):
                raise ValueError("B not symmetric under symmetry restriction")


@dataclass
class FullCoefficients:
    """Completed S-good blocks satisfying homogeneity and unit-sum exactly:
    1'b0 = 1, 1'br = 0 (r>=1), A_m 1 = 0 and 1'A_m = 0', B 1 = 0 and
    1'B = 0', 1'C = 0', 1'D = 0'.
    """

    b: np.ndarray   # (R+1, S)
    A: np.ndarray   # (M_p+1, S, S)
    B: np.ndarray   # (S, S)
    C: np.ndarray   # (S, M)
    D: np.ndarray   # (S, M_y)


def complete_system(coeffs, dims):
    """Fill the base good's row/column of every block from the restrictions."""
    S, s = dims.S, dims.s

    b = np.zeros((dims.R + 1, S))
    b[:, :s] = coeffs.b
    b[0, s] = 1.0 - coeffs.b[0].sum()
    for r in range(1, dims.R + 1):
        b[r, s] = -coeffs.b[r].sum()

    def grow(M2):
        # rows and columns of the base good absorb negative sums
        G = np.zeros((S, S))
        G[:s, :s] = M2
        G[:s, s] = -M2.sum(axis=1)
        G[s, :s] = -M2.sum(axis=0)
        G[s, s] = M2.sum()
        return G

    A = np.stack([grow(coeffs.A[m]) for m in range(dims.M_p + 1)])
    B = grow(coeffs.B)

    C = np.vstack([coeffs.C, -coeffs.C.sum(axis=0, keepdims=True)])
    D = np.vstack([coeffs.D, -coeffs.D.sum(axis=0, keepdims=True)])
    return FullCoefficients(b=b, A=A, B=B, C=C, D=D)


# ======================================================================
# Observations
# ======================================================================

@dataclass
class Observation:
    """One consumer: shares on the simplex, log prices, log expenditure,
    covariate blocks, instruments and a survey expansion factor."""

    shares: np.ndarray          # (S,) observed, unit sum, >= 0
    log_prices: np.ndarray      # (S,)
    log_expenditure: float
    h: np.ndarray               # (M,)
    h_p: np.ndarray             # (M_p,)
    h_y: np.ndarray             # (M_y,)
    z: np.ndarray               # (ell,)
    weight: float = 1.0
    latent_shares: np.ndarray = None   # (S,) augmented; None before sampling

    @property
    def rel_log_prices(self):
        return self.log_prices[:-1] - self.log_prices[-1]

    @property
    def positive_set(self):
        return np.flatnonzero(self.shares > 0)


@dataclass
class Dataset:
    """Column-stacked observations (struct-of-arrays for the sampler)."""

    W: np.ndarray          # (n, S) observed shares
    Pt: np.ndarray         # (n, S) log prices
    e: np.ndarray          # (n,) log expenditure
    H: np.ndarray          # (n, M)
    Hp: np.ndarray         # (n, M_p)
    Hy: np.ndarray         # (n, M_y)
    Z: np.ndarray          # (n, ell)
    weight: np.ndarray     # (n,)
    good_names: list = field(default_factory=list)

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def S(self):
        return self.W.shape[1]

    @property
    def P(self):
        # relative log prices against the base good
        return self.Pt[:, :-1] - self.Pt[:, -1:]

    def row(self, i):
        return Observation(
            shares=self.W[i].copy(),
            log_prices=self.Pt[i].copy(),
            log_expenditure=float(self.e[i]),
            h=self.H[i].copy(),
            h_p=self.Hp[i].copy(),
            h_y=self.Hy[i].copy(),
            z=self.Z[i].copy(),
            weight=float(self.weight[i]),
        )

    @classmethod
    def from_observations(cls, obs_list, good_names=None):
        return cls(
            W=np.array([o.shares for o in obs_list], dtype=float),
            Pt=np.array([o.log_prices for o in obs_list], dtype=float),
            e=np.array([o.log_expenditure for o in obs_list], dtype=float),
            H=np.array([o.h for o in obs_list], dtype=float),
            Hp=np.array([o.h_p for o in obs_list], dtype=float),
            Hy=np.array([o.h_y for o in obs_list], dtype=float),
            Z=np.array([o.z for o in obs_list], dtype=float),
            weight=np.array([o.weight for o in obs_list], dtype=float),
            good_names=list(good_names) if good_names else [],
        )


# ======================================================================
# Latent / observed share map
# ======================================================================

def latent_to_observed(w_star):
    """w_l = w*_l / sum of positive latents when w*_l > 0, else 0."""
    w_star = np.asarray(w_star, dtype=float)
    pos = w_star > 0
    if not pos.any():
        raise NoConsumptionError("no strictly positive latent share")
    w = np.where(pos, w_star, 0.0)
    return w / w[pos].sum()


# ======================================================================
# Implicit utility
# ======================================================================

def _utility_pieces(full, pt, hp_full):
    # quadratic price terms of the deflator: sum_m pt'A_m pt h_m / 2 and pt'B pt / 2
    quad_a = sum(hp_full[m] * pt @ full.A[m] @ pt for m in range(full.A.shape[0]))
    return 0.5 * quad_a, 1.0 - 0.5 * (pt @ full.B @ pt)


def implicit_utility(obs, coeffs, dims=None):
    """Implicit utility y = (e - pt'w + sum_m pt'A_m pt h_m/2) / (1 - pt'B pt/2),
    from OBSERVED shares; coefficients are completed to the full system first.

    The plus sign on the quadratic term is what makes y dual to the log-cost
    function e = y (1 - pt'B pt/2) + pt'w - sum_m pt'A_m pt h_m/2, so that
    Shephard's lemma returns exactly the share system and the closed-form
    elasticities agree with finite differences."""
    if dims is None:
        dims = infer_dims(coeffs)
    full = coeffs if isinstance(coeffs, FullCoefficients) else complete_system(coeffs, dims)
    pt = obs.log_prices
    hp_full = np.concatenate([[1.0], obs.h_p])
    quad_a, denom = _utility_pieces(full, pt, hp_full)
    if abs(denom) < 1e-12:
        raise ValueError("degenerate implicit-utility denominator |1 - pt'B pt/2| < 1e-12")
    return (obs.log_expenditure - pt @ obs.shares + quad_a) / denom


def implicit_utility_batch(data, full):
    """Vectorized implicit utility over a Dataset for one completed system."""
    Pt = data.Pt
    Hp_full = np.column_stack([np.ones(data.n), data.Hp])
    quad_a = np.zeros(data.n)
    for m in range(full.A.shape[0]):
        quad_a += Hp_full[:, m] * np.einsum("ni,ij,nj->n", Pt, full.A[m], Pt)
    denom = 1.0 - 0.5 * np.einsum("ni,ij,nj->n", Pt, full.B, Pt)
    if np.any(np.abs(denom) < 1e-12):
        raise ValueError("degenerate implicit-utility denominator in batch")
    stone = np.einsum("ni,ni->n", Pt, data.W)
    return (data.e - stone + 0.5 * quad_a) / denom


def infer_dims(coeffs):
    """Back out Dimensions from coefficient block shapes (ell unknown -> minimal)."""
    s = coeffs.b.shape[1]
    M_p = coeffs.A.shape[0] - 1
    return Dimensions(
        S=s + 1,
        R=coeffs.b.shape[0] - 1,
        M=coeffs.C.shape[1],
        M_p=M_p,
        M_y=coeffs.D.shape[1],
        ell=s * (M_p + 2),
        J=1,
    )


# ======================================================================
# Coefficient packing
# ======================================================================

def pack(coeffs, dims):
    """Flatten coefficients to the d_beta vector the design matrices expect:
    first the equation-major x blocks [b_0l .. b_Rl, C_l, D_l], then the
    price blocks (vech of each A_m and B if symmetric, row-major otherwise).
    """
    coeffs.validate(dims)
    s = dims.s
    head = []
    for l in range(s):
        head.append(coeffs.b[:, l])
        head.append(coeffs.C[l])
        head.append(coeffs.D[l])
    mats = [coeffs.A[m] for m in range(dims.M_p + 1)] + [coeffs.B]
    if coeffs.symmetric:
        tail = [vech(M2) for M2 in mats]
    else:
        tail = [M2.reshape(-1) for M2 in mats]
    return np.concatenate([np.concatenate(head), np.concatenate(tail)])


def unpack(beta, dims, symmetric=True):
    """Inverse of ``pack``."""
    s, k_x = dims.s, dims.k_x
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dims.d_beta(symmetric),):
        raise ValueError("packed vector has wrong length for these dimensions")
    out = EasiCoefficients.zeros(dims, symmetric=symmetric)
    for l in range(s):
        blk = beta[l * k_x:(l + 1) * k_x]
        out.b[:, l] = blk[: dims.R + 1]
        out.C[l] = blk[dims.R + 1: dims.R + 1 + dims.M]
        out.D[l] = blk[dims.R + 1 + dims.M:]
    off = s * k_x
    step = s * (s + 1) // 2 if symmetric else s * s
    mats = []
    for _ in range(dims.M_p + 2):
        seg = beta[off: off + step]
        mats.append(unvech(seg, s) if symmetric else seg.reshape(s, s))
        off += step
    out.A = np.stack(mats[:-1])
    out.B = mats[-1]
    return out


def packed_labels(dims, symmetric=True):
    """Human-readable names for each packed coefficient, in pack order.
    Equations and goods are 1-based in the labels."""
    labels = []
    for l in range(dims.s):
        labels += ["b%d[%d]" % (r, l + 1) for r in range(dims.R + 1)]
        labels += ["C[%d,%d]" % (l + 1, m + 1) for m in range(dims.M)]
        labels += ["D[%d,%d]" % (l + 1, m + 1) for m in range(dims.M_y)]
    blocks = ["A%d" % m for m in range(dims.M_p + 1)] + ["B"]
    for name in blocks:
        if symmetric:
            labels += ["%s[%d,%d]" % (name, i + 1, j + 1)
                       for i, j in vech_indices(dims.s)]
        else:
            labels += ["%s[%d,%d]" % (name, i + 1, j + 1)
                       for i in range(dims.s) for j in range(dims.s)]
    return labels


def restriction_map(dims, symmetric=True):
    """T mapping the packed coefficient vector to equation-major order, so
    that F_i = (I_s kron f_i') T with f_i = [x_i; p*_i].  Symmetric blocks
    hit the same vech element from both (l, t) and (t, l), which is exactly
    the (I_s kron p') D_s construction."""
    s, k_x = dims.s, dims.k_x
    q = k_x + dims.d_star
    T = np.zeros((s * q, dims.d_beta(symmetric)))
    vpos = {p: k for k, p in enumerate(vech_indices(s))}
    step = s * (s + 1) // 2 if symmetric else s * s
    for l in range(s):
        for c in range(k_x):
            T[l * q + c, l * k_x + c] = 1.0
        for m in range(dims.M_p + 2):
            for t in range(s):
                col = s * k_x + m * step
                col += vpos[(max(l, t), min(l, t))] if symmetric else l * s + t
                T[l * q + k_x + m * s + t, col] = 1.0
    return T


# ======================================================================
# Design matrices
# ======================================================================

def exog_vector(y, h, h_y, dims):
    """x = [1, y, ..., y^R, h', h_y' * y]'."""
    return np.concatenate([
        [1.0],
        [y ** r for r in range(1, dims.R + 1)],
        h,
        h_y * y,
    ])


def price_regressors(p, y, h_p):
    """p* = [p' h_0, p' h_1, ..., p' h_Mp, p' y]' with h_0 = 1."""
    hp_full = np.concatenate([[1.0], h_p])
    return np.concatenate([p * hm for hm in hp_full] + [p * y])


@dataclass
class DesignPair:
    """Structural design F (s x d_beta), first-stage design G (d* x d_gamma),
    the endogenous regressor vector p* and the exogenous vector x."""

    F: np.ndarray
    G: np.ndarray
    p_star: np.ndarray
    x: np.ndarray


def build_designs(obs, y, dims, symmetric=True):
    """Assemble the per-observation design pair.  F reproduces the reduced
    share system row by row when multiplied into the packed coefficients;
    G = [I_{d*} kron x', I_{d*} kron z']."""
    if obs.h.shape != (dims.M,) or obs.h_p.shape != (dims.M_p,) \
            or obs.h_y.shape != (dims.M_y,) or obs.z.shape != (dims.ell,):
        raise ValueError("observation covariate blocks do not match dimensions")
    x = exog_vector(y, obs.h, obs.h_y, dims)
    p_star = price_regressors(obs.rel_log_prices, y, obs.h_p)
    f = np.concatenate([x, p_star])
    F = np.kron(np.eye(dims.s), f[None, :]) @ restriction_map(dims, symmetric)
    G = np.hstack([
        np.kron(np.eye(dims.d_star), x[None, :]),
        np.kron(np.eye(dims.d_star), obs.z[None, :]),
    ])
    return DesignPair(F=F, G=G, p_star=p_star, x=x)


def compact_designs(data, y, dims):
    """Stacked compact regressor matrices shared by every equation:
    Fc[i] = [x_i', p*_i'] (n x (k_x + d*)) and Gc[i] = [x_i', z_i'].
    Returns (Fc, Gc, Pstar)."""
    n = data.n
    X = np.column_stack(
        [np.ones(n)]
        + [y ** r for r in range(1, dims.R + 1)]
        + ([data.H] if dims.M else [])
        + ([data.Hy * y[:, None]] if dims.M_y else [])
    )
    Hp_full = np.column_stack([np.ones(n), data.Hp])
    P = data.P
    blocks = [P * Hp_full[:, m:m + 1] for m in range(dims.M_p + 1)] + [P * y[:, None]]
    Pstar = np.hstack(blocks)
    Fc = np.hstack([X, Pstar])
    Gc = np.hstack([X, data.Z])
    return Fc, Gc, Pstar


def gamma_permutation(dims):
    """Permutation taking the public gamma layout (all x blocks equation-major,
    then all z blocks) to the compact order (per-equation [x block, z block])."""
    d, k_x, ell = dims.d_star, dims.k_x, dims.ell
    q = k_x + ell
    Tg = np.zeros((d * q, dims.d_gamma))
    for eq in range(d):
        for c in range(k_x):
            Tg[eq * q + c, eq * k_x + c] = 1.0
        for c in range(ell):
            Tg[eq * q + k_x + c, d * k_x + eq * ell + c] = 1.0
    return Tg


# ======================================================================
# Weighted Gram accumulation (Kronecker identity)
# ======================================================================

def weighted_gram(design_compact, responses, weight, restriction):
    """Accumulate sum_i F_i' S F_i and sum_i F_i' S y_i without forming any
    padded F_i, via S kron (Fc'Fc) and [I kron (Fc'Y)] vec(S); the restriction
    matrix maps the equation-major products back to the packed ordering.
    """
    weight = np.asarray(weight, dtype=float)
    if not np.allclose(weight, weight.T, atol=1e-12):
        raise ValueError("weight matrix must be symmetric")
    gram_c = design_compact.T @ design_compact
    M = restriction.T @ np.kron(weight, gram_c) @ restriction
    v = restriction.T @ (design_compact.T @ responses @ weight).reshape(-1, order="F")
    return M, v


def padded_row_design(f, s_eq, restriction):
    """Single padded design (s_eq x d) from a compact regressor vector."""
    return np.kron(np.eye(s_eq), f[None, :]) @ restriction


# ======================================================================
# Regularity checks
# ======================================================================

def semi_elasticity_price(full, h_p, y):
    """Gamma = sum_m A_m h_m + B y, the share-price semi-elasticity block."""
    hp_full = np.concatenate([[1.0], np.asarray(h_p, dtype=float)])
    return np.tensordot(hp_full, full.A, axes=(0, 0)) + full.B * y


def check_regularity(full, obs, y, tol=1e-10):
    """Cost monotonicity: pt'[sum_r b_r r y^(r-1) + D h_y + B pt/2] + 1 > 0.
    Concavity: eigenvalues of Gamma + w w' - diag(w) all <= tol."""
    pt, w = obs.log_prices, obs.shares
    R = full.b.shape[0] - 1
    grad_y = sum(full.b[r] * r * y ** (r - 1) for r in range(1, R + 1))
    grad_y = grad_y + full.D @ obs.h_y
    mono = pt @ (grad_y + 0.5 * (full.B @ pt)) + 1.0 > 0.0
    slutsky = semi_elasticity_price(full, obs.h_p, y) + np.outer(w, w) - np.diag(w)
    concave = bool(np.linalg.eigvalsh(slutsky).max() <= tol)
    return {"monotonic": bool(mono), "concave": concave}


# ======================================================================
# Forward share solve (used by the generator, analytics and policy engine)
# ======================================================================

def full_system_shares(full, pt, y, h, h_p, h_y):
    """Right-hand side of the completed share system at implicit utility y."""
    R = full.b.shape[0] - 1
    hp_full = np.concatenate([[1.0], h_p])
    w = sum(full.b[r] * y ** r for r in range(R + 1))
    for m in range(full.A.shape[0]):
        w = w + hp_full[m] * (full.A[m] @ pt)
    w = w + (full.B @ pt) * y + full.C @ h + full.D @ (h_y * y)
    return w


def solve_shares(full, pt, e_log, h, h_p, h_y, eps=None, tol=1e-10, max_iter=200):
    """Solve the (y, w*) fixed point of the demand system at one point.

    eps, if given, is the s-vector of structural disturbances; the base good
    receives -sum(eps) so latent shares keep their exact unit sum.  Observed
    shares are the censored/renormalized latents at every iteration, matching
    how implicit utility is computed from observed shares during estimation.
    Returns (observed shares, latent shares, y).
    """
    S = full.b.shape[1]
    eps_full = np.zeros(S)
    if eps is not None:
        eps_full[:-1] = eps
        eps_full[-1] = -np.sum(eps)
    hp_full = np.concatenate([[1.0], h_p])
    quad_a, denom = _utility_pieces(full, pt, hp_full)
    if abs(denom) < 1e-12:
        raise ValueError("degenerate implicit-utility denominator")

    w = np.full(S, 1.0 / S)
    y = (e_log - pt @ w + quad_a) / denom
    for it in range(max_iter):
        w_star = full_system_shares(full, pt, y, h, h_p, h_y) + eps_full
        w_new = latent_to_observed(w_star)
        y_new = (e_log - pt @ w_new + quad_a) / denom
        if it > 100:   # damp late iterations in case of slow oscillation
            y_new = 0.5 * (y_new + y)
        if abs(y_new - y) < tol and np.max(np.abs(w_new - w)) < tol:
            return w_new, w_star, y_new
        w, y = w_new, y_new
    raise FixedPointError(
        "share fixed point did not converge in %d iterations (e=%.4f)" % (max_iter, e_log)
    )
