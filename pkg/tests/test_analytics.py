import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from easimix.model import (
    Dataset,
    Dimensions,
    FullCoefficients,
    complete_system,
    packed_labels,
)
from easimix.sampler import ChainSettings, PriorHyperparams, run_chain
from easimix import analytics
from easimix.analytics import (
    ZeroShareError,
    autocorrelation,
    bayes_factor_inequality,
    bayes_factor_symmetry,
    chain_diagnostics,
    cluster_profiles,
    correlation_summary,
    effective_sample_size,
    elasticity_set,
    engel_curve,
    hpd_interval,
    income_elasticities,
    inclusion_probabilities,
    parameter_names,
    parameter_series,
    price_elasticities,
    reference_point,
    semi_elasticities,
    summarize,
    symmetry_gap_indices,
)
from easimix.synth import default_truth, generate_population
from conftest import random_coeffs
import oracles


@pytest.fixture
def rich_dims():
    return Dimensions(S=3, R=2, M=1, M_p=1, M_y=1, ell=8, J=2)


def interior_case(dims, rng, coef_scale=0.04):
    """Random completed system plus an interior evaluation point solved by
    the independent oracle fixed point."""
    full = complete_system(random_coeffs(dims, rng, scale=coef_scale), dims)
    pt = rng.normal(0.0, 0.2, size=dims.S)
    e_log = float(rng.normal(0.0, 0.3))
    h = rng.normal(0.0, 1.0, size=dims.M)
    h_p = rng.normal(0.0, 0.5, size=dims.M_p)
    h_y = rng.normal(0.0, 0.5, size=dims.M_y)
    w, y = oracles.oracle_interior_shares(full, pt, e_log, h, h_p, h_y)
    point = SimpleNamespace(
        shares=w, log_prices=pt, h=h, h_p=h_p, h_y=h_y
    )
    return full, point, e_log, y


# ======================================================================
# Elasticities against central finite differences
# ======================================================================

def test_marshallian_matches_finite_differences(rich_dims, rng):
    for _ in range(10):
        full, point, e_log, y = interior_case(rich_dims, rng)
        gamma_semi, _, de = semi_elasticities(full, point, y)
        got = price_elasticities(gamma_semi, de, point.shares)["marshallian"]
        ref = oracles.fd_marshallian(
            full, point.log_prices, e_log, point.h, point.h_p, point.h_y
        )
        assert np.allclose(got, ref, rtol=1e-4, atol=1e-6)


def test_hicksian_matches_finite_differences(rich_dims, rng):
    for _ in range(10):
        full, point, e_log, y = interior_case(rich_dims, rng)
        gamma_semi, _, de = semi_elasticities(full, point, y)
        got = price_elasticities(gamma_semi, de, point.shares)["hicksian"]
        ref = oracles.fd_hicksian(
            full, point.log_prices, y, point.h, point.h_p, point.h_y
        )
        assert np.allclose(got, ref, rtol=1e-4, atol=1e-6)


def test_income_matches_finite_differences(rich_dims, rng):
    for _ in range(10):
        full, point, e_log, y = interior_case(rich_dims, rng)
        _, _, de = semi_elasticities(full, point, y)
        got = income_elasticities(de, point.shares)
        ref = oracles.fd_income(
            full, point.log_prices, e_log, point.h, point.h_p, point.h_y
        )
        assert np.allclose(got, ref, rtol=1e-4, atol=1e-6)


def test_unit_elastic_collapse(rich_dims, rng):
    """No price or utility response in the shares: Hicksian rows collapse to
    shares minus the identity, Marshallian to -I, income elasticities to 1."""
    dims = rich_dims
    coeffs = random_coeffs(dims, rng, scale=0.0)   # only the b0 row survives
    full = complete_system(coeffs, dims)
    w = full.b[0]
    point = SimpleNamespace(
        shares=w, log_prices=rng.normal(0.0, 0.3, size=dims.S),
        h=np.zeros(dims.M), h_p=np.zeros(dims.M_p), h_y=np.zeros(dims.M_y),
    )
    gamma_semi, dy, de = semi_elasticities(full, point, y=0.7)
    mats = price_elasticities(gamma_semi, de, w)
    S = dims.S
    assert np.max(np.abs(mats["hicksian"] - (np.outer(np.ones(S), w) - np.eye(S)))) < 1e-12
    assert np.max(np.abs(mats["marshallian"] + np.eye(S))) < 1e-12
    assert np.max(np.abs(income_elasticities(de, w) - 1.0)) < 1e-12


def test_aggregation_identities(rich_dims, rng):
    """Completed systems satisfy the classical adding-up/homogeneity checks:
    Hicksian rows sum to zero, Marshallian rows sum to minus the income
    elasticity, and share-weighted income elasticities sum to one."""
    for _ in range(6):
        full, point, _, y = interior_case(rich_dims, rng)
        gamma_semi, _, de = semi_elasticities(full, point, y)
        mats = price_elasticities(gamma_semi, de, point.shares)
        eta = income_elasticities(de, point.shares)
        w = point.shares
        assert np.allclose(mats["hicksian"].sum(axis=1), 0.0, atol=1e-10)
        assert np.allclose(mats["marshallian"].sum(axis=1), -eta, atol=1e-10)
        assert abs(w @ eta - 1.0) < 1e-10


def test_zero_share_raises(rich_dims, rng):
    full, point, _, y = interior_case(rich_dims, rng)
    gamma_semi, _, de = semi_elasticities(full, point, y)
    w = point.shares.copy()
    w[1] = 0.0
    with pytest.raises(ZeroShareError, match="good index 1"):
        price_elasticities(gamma_semi, de, w)
    with pytest.raises(ZeroShareError):
        income_elasticities(de, w)


def test_degenerate_denominator_raises():
    full = FullCoefficients(
        b=np.array([[1 / 3, 1 / 3, 1 / 3], [0.0, 0.0, 0.0]]),
        A=np.zeros((1, 3, 3)),
        B=np.diag([2.0, 0.0, -2.0]),   # pt'B pt = 2 at pt = e_1
        C=np.zeros((3, 0)),
        D=np.zeros((3, 0)),
    )
    point = SimpleNamespace(
        shares=np.full(3, 1 / 3), log_prices=np.array([1.0, 0.0, 0.0]),
        h=np.zeros(0), h_p=np.zeros(0), h_y=np.zeros(0),
    )
    with pytest.raises(ValueError, match="denominator"):
        semi_elasticities(full, point, y=0.0)


def test_elasticity_set_bundle(rich_dims, rng):
    full, point, _, y = interior_case(rich_dims, rng)
    es = elasticity_set(full, point, y)
    gamma_semi, dy, de = semi_elasticities(full, point, y)
    mats = price_elasticities(gamma_semi, de, point.shares)
    assert np.array_equal(es.hicksian, mats["hicksian"])
    assert np.array_equal(es.marshallian, mats["marshallian"])
    assert np.array_equal(es.income, income_elasticities(de, point.shares))
    assert es.evaluated_at["y"] == y
    # stored evaluation point is a copy, not a view
    es.evaluated_at["shares"][0] = -1.0
    assert point.shares[0] > 0.0


# ======================================================================
# Engel curves
# ======================================================================

def test_engel_curve_unit_sums(rich_dims, rng):
    full = complete_system(random_coeffs(rich_dims, rng, scale=0.05), rich_dims)
    grid = np.linspace(-1.2, 1.2, 9)
    h = rng.normal(size=rich_dims.M)
    h_y = rng.normal(size=rich_dims.M_y)
    curves = engel_curve(full, h, h_y, grid)
    assert curves.shape == (9, rich_dims.S)
    assert np.allclose(curves.sum(axis=1), 1.0, atol=1e-12)


def test_engel_curve_polynomial_evaluation(rich_dims, rng):
    full = complete_system(random_coeffs(rich_dims, rng, scale=0.05), rich_dims)
    h = rng.normal(size=rich_dims.M)
    h_y = rng.normal(size=rich_dims.M_y)
    e = 0.37
    row = engel_curve(full, h, h_y, [e])[0]
    by_hand = (
        full.b[0] + full.b[1] * e + full.b[2] * e ** 2
        + full.C @ h + full.D @ (h_y * e)
    )
    assert np.allclose(row, by_hand, atol=1e-14)


# ======================================================================
# HPD intervals
# ======================================================================

def test_hpd_matches_exhaustive_window_scan(rng):
    for mass in (0.5, 0.9, 0.95):
        x = rng.lognormal(0.0, 0.8, size=501)
        assert hpd_interval(x, mass) == oracles.hpd_all_windows(x, mass)
        x = rng.standard_normal(200)
        assert hpd_interval(x, mass) == oracles.hpd_all_windows(x, mass)


@settings(max_examples=40, deadline=None)
@given(
    vals=st.lists(
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, width=32),
        min_size=10, max_size=120,
    ),
    mass=st.floats(min_value=0.05, max_value=0.99),
)
def test_hpd_window_property(vals, mass):
    lo, hi = hpd_interval(vals, mass)
    lo0, hi0 = oracles.hpd_all_windows(vals, mass)
    assert (lo, hi) == (lo0, hi0)
    inside = np.sum((np.asarray(vals) >= lo) & (np.asarray(vals) <= hi))
    assert inside >= int(np.ceil(mass * len(vals)))


def test_hpd_input_validation(rng):
    with pytest.raises(ValueError, match="at least 10"):
        hpd_interval(np.arange(5), 0.9)
    with pytest.raises(ValueError, match="mass"):
        hpd_interval(rng.standard_normal(50), 1.0)


def test_summarize_fields(rng):
    x = rng.standard_normal(400)
    ps = summarize(x, 0.9)
    assert ps.draw_count == 400
    assert ps.hpd_low <= ps.point <= ps.hpd_high
    assert ps.point == pytest.approx(np.median(x))


# ======================================================================
# Short chains shared by the posterior-level tests
# ======================================================================

@pytest.fixture(scope="module")
def fitted():
    truth = default_truth(seed=0)
    rec = generate_population(truth, 150)
    priors = PriorHyperparams.default(truth.dims)
    priors.R_eps_given_u = np.stack([np.eye(truth.dims.s) * 0.01] * truth.dims.J)
    settings_ = ChainSettings(sweeps=200, burn_in=80, thinning=2, seed=3)
    chain = run_chain(rec.data, priors, settings_, truth.dims)
    return truth, rec, chain, priors


@pytest.fixture(scope="module")
def fitted_unrestricted():
    truth = default_truth(seed=0)
    rec = generate_population(truth, 120)
    priors = PriorHyperparams.default(truth.dims, symmetric=False)
    priors.R_eps_given_u = np.stack([np.eye(truth.dims.s) * 0.01] * truth.dims.J)
    settings_ = ChainSettings(
        sweeps=560, burn_in=120, thinning=2, seed=5, symmetric=False
    )
    chain = run_chain(rec.data, priors, settings_, truth.dims)
    return truth, rec, chain, priors


# ======================================================================
# Bayes factors
# ======================================================================

def test_symmetry_gap_indices_mirror_packed_labels(rich_dims):
    labels = packed_labels(rich_dims, symmetric=False)
    for a, b in symmetry_gap_indices(rich_dims):
        name_a, name_b = labels[a], labels[b]
        block_a, idx_a = name_a.split("[")
        block_b, idx_b = name_b.split("[")
        l, t = idx_a.rstrip("]").split(",")
        assert block_a == block_b
        assert idx_b.rstrip("]") == "%s,%s" % (t, l)


def test_symmetry_factor_requires_unrestricted_chain(fitted):
    truth, rec, chain, priors = fitted
    with pytest.raises(ValueError, match="without the restriction"):
        bayes_factor_symmetry(chain, priors)


def test_symmetry_factor_finite_on_unrestricted_chain(fitted_unrestricted):
    truth, rec, chain, priors = fitted_unrestricted
    val = bayes_factor_symmetry(chain, priors)
    assert np.isfinite(val)


def test_symmetry_factor_needs_enough_draws(fitted_unrestricted):
    truth, rec, chain, priors = fitted_unrestricted
    starved = dataclasses.replace(chain, beta=chain.beta[:20])
    with pytest.raises(ValueError, match="too few draws"):
        bayes_factor_symmetry(starved, priors)


def test_inequality_factor_structure(fitted):
    truth, rec, chain, priors = fitted
    out = bayes_factor_inequality(
        chain, "monotonicity", rec.data, priors,
        indices=np.arange(6), prior_draws=60,
        rng=np.random.default_rng(4),
    )
    assert set(out) == {"two_log_bf", "posterior_prob", "prior_prob", "bound"}
    assert np.isfinite(out["two_log_bf"])
    assert 0.0 < out["posterior_prob"] < 1.0
    assert 0.0 < out["prior_prob"] < 1.0
    assert out["bound"] in (None, "lower", "upper")


def test_inequality_factor_unknown_restriction(fitted):
    truth, rec, chain, priors = fitted
    with pytest.raises(KeyError):
        bayes_factor_inequality(chain, "convexity", rec.data, priors)


# ======================================================================
# Membership, names, series and diagnostics
# ======================================================================

def test_inclusion_probabilities(fitted):
    _, rec, chain, _ = fitted
    probs = inclusion_probabilities(chain)
    assert probs.shape == (rec.data.n, 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    i = 7
    for j in range(2):
        assert probs[i, j] == np.mean(chain.psi[:, i] == j)


def test_parameter_names_layout(fitted):
    truth, _, chain, _ = fitted
    names = parameter_names(chain)
    d_b = chain.beta.shape[2]
    assert len(names) == 2 * d_b + chain.gamma.shape[1] + 2
    assert names[0].startswith("cluster1.")
    assert names[-1] == "weight[2]"
    assert len(set(names)) == len(names)


def test_parameter_series_round_trip(fitted):
    truth, _, chain, _ = fitted
    labels = packed_labels(truth.dims, True)
    d_b = chain.beta.shape[2]
    assert np.array_equal(
        parameter_series(chain, "cluster2.%s" % labels[3]), chain.beta[:, 1, 3]
    )
    assert np.array_equal(parameter_series(chain, "gamma[4]"), chain.gamma[:, 3])
    assert np.array_equal(parameter_series(chain, "weight[1]"), chain.phi[:, 0])
    with pytest.raises(ValueError, match="unknown parameter"):
        parameter_series(chain, "cluster9.b0[1]")


def test_autocorrelation_basics(rng):
    x = oracles.ar1_series(rng, 4000, rho=0.6)
    acf = autocorrelation(x, 3)
    assert acf[0] == pytest.approx(1.0)
    assert acf[1] == pytest.approx(0.6, abs=0.06)
    assert np.array_equal(autocorrelation(np.full(30, 2.2), 5), np.zeros(6))


def test_ess_matches_ar1_reference(rng):
    n, rho = 4000, 0.6
    x = oracles.ar1_series(rng, n, rho)
    got = effective_sample_size(x)
    ref = oracles.ar1_ess(n, rho)
    assert abs(got - ref) / ref < 0.30
    assert np.isnan(effective_sample_size(np.full(100, 1.0)))


def test_chain_diagnostics_selectors(fitted):
    truth, _, chain, _ = fitted
    out = chain_diagnostics(chain, "weight[*]")
    assert sorted(out) == ["weight[1]", "weight[2]"]
    entry = out["weight[1]"]
    assert entry["trace"].shape == (chain.n_retained,)
    assert entry["acf"].shape[0] == min(50, chain.n_retained - 1) + 1
    assert entry["degenerate"] in (True, False)
    everything = chain_diagnostics(chain, "*")
    assert len(everything) == len(parameter_names(chain))
    with pytest.raises(ValueError, match="matched no parameter"):
        chain_diagnostics(chain, "elephant[*]")


def test_chain_diagnostics_needs_draws(fitted):
    truth, _, chain, _ = fitted
    starved = dataclasses.replace(
        chain,
        beta=chain.beta[:30], gamma=chain.gamma[:30], phi=chain.phi[:30],
        psi=chain.psi[:30],
    )
    with pytest.raises(ValueError, match="at least 50"):
        chain_diagnostics(starved)


# ======================================================================
# Correlation summaries and cluster profiles
# ======================================================================

def test_correlation_summary_shape_and_range(fitted):
    truth, _, chain, _ = fitted
    dim = truth.dims.s + truth.dims.d_star
    for j in range(2):
        corr = correlation_summary(chain, j)
        assert corr.shape == (dim, dim)
        assert np.allclose(np.diag(corr), 1.0, atol=1e-12)
        assert np.allclose(corr, corr.T, atol=1e-12)
        assert (np.abs(corr) <= 1.0 + 1e-12).all()


def test_cluster_profiles(fitted):
    truth, rec, chain, _ = fitted
    rows = cluster_profiles(chain, rec.data)
    counted = sum(rows[j]["count"] for j in rows if rows[j] is not None)
    assert counted == rec.data.n
    for j, row in rows.items():
        if row is None:
            continue
        assert row["mean_shares"].shape == (truth.dims.S,)
        assert abs(row["mean_shares"].sum() - 1.0) < 0.05
        assert row["weighted_persons"] > 0


# ======================================================================
# Representative evaluation point
# ======================================================================

def test_reference_point_mixes_columns_correctly():
    data = Dataset(
        W=np.array([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5], [0.4, 0.4, 0.2]]),
        Pt=np.array([[0.1, 0.0, 0.2], [0.3, 0.0, 0.4], [0.1, 0.2, 0.0]]),
        e=np.array([4.0, 5.0, 6.0]),
        H=np.array([[0.0, 1.0], [1.0, 2.0], [1.0, 4.0]]),
        Hp=np.zeros((3, 0)),
        Hy=np.zeros((3, 0)),
        Z=np.array([[1.0], [2.0], [3.0]]),
        weight=np.array([1.0, 1.0, 2.0]),
    )
    ref = reference_point(data)
    wgt = np.array([0.25, 0.25, 0.5])
    assert np.allclose(ref.shares, wgt @ data.W)
    assert abs(ref.shares.sum() - 1.0) < 1e-12
    assert np.allclose(ref.log_prices, wgt @ data.Pt)
    assert ref.log_expenditure == pytest.approx(5.25)
    # first demographic column is binary: weighted mode, not mean
    assert ref.h[0] == 1.0
    # second has three levels: weighted mean
    assert ref.h[1] == pytest.approx(0.25 * 1.0 + 0.25 * 2.0 + 0.5 * 4.0)
    assert ref.z[0] == pytest.approx(2.25)
    assert ref.weight == 1.0
