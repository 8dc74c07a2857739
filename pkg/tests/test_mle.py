import numpy as np
import pytest

from latentcat.data import ContingencyTable, tabulate
from latentcat.errors import DomainError
from latentcat.generate import GeneratorSpec, draw, make_model
from latentcat.mle import CmleConfig, fit, loglik, param_count
from latentcat.spectral import MisclassificationModel, eigendecompose_identify

from conftest import (
    PUBLISHED_F_XSTAR,
    PUBLISHED_F_XSTAR_SE,
    model_distance,
    population_table,
    published_cell_model,
)


def loglik_bruteforce(model, table):
    """Straight-loop mixture likelihood, independent of the array kernels."""
    total = 0.0
    s_x, _, s_z = table.support
    for x in range(s_x):
        for y in range(2):
            for z in range(s_z):
                m = int(table.counts[x, y, z])
                if m == 0:
                    continue
                p = 0.0
                for s in range(model.s_x):
                    fy = model.f_y_given_xstar[s] if y == 1 else 1 - model.f_y_given_xstar[s]
                    p += (
                        model.m_x_given_xstar[x, s]
                        * fy
                        * model.m_z_given_xstar[z, s]
                        * model.f_xstar[s]
                    )
                if p <= 0:
                    return -np.inf
                total += m * np.log(p)
    return total


# ---------------------------------------------------------------------------
# param_count / loglik
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "supports,expected", [((3, 2, 3), 17), ((7, 2, 7), 97), ((2, 2, 2), 7)]
)
def test_param_count(supports, expected):
    assert param_count(*supports) == expected


def test_param_count_requires_binary_minimum():
    with pytest.raises(DomainError):
        param_count(1, 2, 3)


def test_loglik_point_mass_is_zero(valid_model):
    # All observed mass on one cell and a model that puts mixture mass 1
    # there: two degenerate latent states both reporting (1, 0, 1).
    model = MisclassificationModel(
        m_x_given_xstar=np.array([[1.0, 1.0], [0.0, 0.0]]),
        f_y_given_xstar=np.array([0.0, 0.0]),
        m_z_given_xstar=np.array([[1.0, 1.0], [0.0, 0.0]]),
        f_xstar=np.array([0.5, 0.5]),
    )
    counts = np.zeros((2, 2, 2), dtype=int)
    counts[0, 0, 0] = 9
    table = ContingencyTable(counts=counts, n=9)
    assert loglik(model, table) == pytest.approx(0.0)


def test_loglik_matches_bruteforce(valid_model):
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 40, size=(3, 2, 3))
    table = ContingencyTable(counts=counts, n=int(counts.sum()))
    assert loglik(valid_model, table) == pytest.approx(
        loglik_bruteforce(valid_model, table), rel=1e-12
    )


def test_loglik_information_inequality(valid_model):
    table = population_table(valid_model, n=1_000_000)
    best = loglik(valid_model, table)
    rng = np.random.default_rng(1)
    for _ in range(5):
        noise = rng.normal(scale=0.03, size=(3, 3))
        m_x = np.clip(valid_model.m_x_given_xstar + noise, 1e-6, None)
        m_x /= m_x.sum(axis=0)
        perturbed = MisclassificationModel(
            m_x_given_xstar=m_x,
            f_y_given_xstar=valid_model.f_y_given_xstar,
            m_z_given_xstar=valid_model.m_z_given_xstar,
            f_xstar=valid_model.f_xstar,
        )
        assert loglik(perturbed, table) <= best + 1e-6


def test_loglik_rejects_invalid_bundle(valid_model):
    table = population_table(valid_model, n=1000)
    bad = MisclassificationModel(
        m_x_given_xstar=valid_model.m_x_given_xstar * 1.2,
        f_y_given_xstar=valid_model.f_y_given_xstar,
        m_z_given_xstar=valid_model.m_z_given_xstar,
        f_xstar=valid_model.f_xstar,
    )
    with pytest.raises(DomainError):
        loglik(bad, table)


def test_loglik_minus_inf_on_impossible_cell():
    model = MisclassificationModel(
        m_x_given_xstar=np.array([[1.0, 1.0], [0.0, 0.0]]),
        f_y_given_xstar=np.array([0.5, 0.5]),
        m_z_given_xstar=np.array([[1.0, 1.0], [0.0, 0.0]]),
        f_xstar=np.array([0.5, 0.5]),
    )
    counts = np.zeros((2, 2, 2), dtype=int)
    counts[1, 0, 0] = 3
    table = ContingencyTable(counts=counts, n=3)
    assert loglik(model, table) == -np.inf


def test_loglik_invariant_to_cell_relabeling(valid_model):
    rng = np.random.default_rng(2)
    counts = rng.integers(0, 30, size=(3, 2, 3))
    table = ContingencyTable(counts=counts, n=int(counts.sum()))
    perm = [2, 0, 1]
    permuted_table = ContingencyTable(
        counts=counts[:, :, perm], n=int(counts.sum())
    )
    permuted_model = MisclassificationModel(
        m_x_given_xstar=valid_model.m_x_given_xstar,
        f_y_given_xstar=valid_model.f_y_given_xstar,
        m_z_given_xstar=valid_model.m_z_given_xstar[perm, :],
        f_xstar=valid_model.f_xstar,
    )
    assert loglik(valid_model, table) == pytest.approx(
        loglik(permuted_model, permuted_table), rel=1e-12
    )


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def recovery_spec(seed):
    return GeneratorSpec(
        misclassification_strength=0.15,
        eigenvalue_separation=0.35,
        z_mix=0.85,
        latent_uniform_mix=0.85,
        min_singular_value=0.12,
        seed=seed,
    )


def test_fit_recovers_single_model():
    [model] = make_model(recovery_spec(21))
    sample = draw([model], [1.0], 50_000, seed=22).data
    result = fit(
        tabulate(sample),
        CmleConfig(n_starts=10, seed=23, ord_constraint="enforce"),
    )
    assert model_distance(result.model, model) < 0.015
    assert result.n_starts_converged == 10


def test_fit_monotone_improvement():
    [model] = make_model(recovery_spec(24))
    sample = draw([model], [1.0], 10_000, seed=25).data
    result = fit(tabulate(sample), CmleConfig(n_starts=6, seed=26))
    for start in result.starts:
        assert result.loglik >= start.start_loglik - 1e-9
        if start.converged:
            assert start.final_loglik >= start.start_loglik - 1e-9


def test_fit_identity_data_boundary_flags():
    [model] = make_model(
        GeneratorSpec(misclassification_strength=0.0, eigenvalue_separation=0.25,
                      seed=27)
    )
    sample = draw([model], [1.0], 50_000, seed=28).data
    result = fit(
        tabulate(sample), CmleConfig(n_starts=8, seed=29, ord_constraint="enforce")
    )
    assert np.abs(result.model.m_x_given_xstar - np.eye(3)).max() < 0.02
    assert result.boundary_flags


def test_fit_published_scale_recovery():
    # Simulate at the published group's sample size from its published
    # reporting matrix and latent marginal; the refit latent marginal must
    # sit within two published standard errors of the generator.
    model = published_cell_model()
    sample = draw([model], [1.0], 2615, seed=30).data
    result = fit(
        tabulate(sample), CmleConfig(n_starts=10, seed=31, ord_constraint="enforce")
    )
    dev = np.abs(result.model.f_xstar - PUBLISHED_F_XSTAR)
    assert np.all(dev <= 2 * PUBLISHED_F_XSTAR_SE)


def test_fit_ord_enforce_orders_last_row():
    [model] = make_model(recovery_spec(32))
    sample = draw([model], [1.0], 20_000, seed=33).data
    result = fit(
        tabulate(sample), CmleConfig(n_starts=6, seed=34, ord_constraint="enforce")
    )
    assert np.all(np.diff(result.model.m_x_given_xstar[-1, :]) >= 0)
    assert result.model.ord_satisfied


def test_fit_check_only_flags_without_permuting():
    # Force the label-permuted basin by warm-starting there; check-only mode
    # must return that basin's solution, flagged, rather than reordering it.
    [model] = make_model(recovery_spec(35))
    sample = draw([model], [1.0], 20_000, seed=36).data
    perm = [1, 0, 2]
    swapped = MisclassificationModel(
        m_x_given_xstar=model.m_x_given_xstar[:, perm],
        f_y_given_xstar=model.f_y_given_xstar[perm],
        m_z_given_xstar=model.m_z_given_xstar[:, perm],
        f_xstar=model.f_xstar[perm],
    )
    result = fit(
        tabulate(sample),
        CmleConfig(n_starts=1, seed=37, ord_constraint="check-only"),
        warm_start=swapped,
    )
    assert not result.model.ord_satisfied
    # the permuted optimum matches the truth under the same permutation
    assert model_distance(result.model, swapped) < 0.05


def test_fit_agreement_with_spectral_on_population():
    [model] = make_model(recovery_spec(38))
    table = population_table(model, n=10_000_000)
    from latentcat.data import frequency_pmf

    spectral_model, diag = eigendecompose_identify(frequency_pmf(table), tol=1e-6)
    assert diag.eigenvalue_gap > 0.05
    result = fit(
        table, CmleConfig(n_starts=4, seed=39, ord_constraint="enforce")
    )
    assert model_distance(result.model, spectral_model) < 1e-4


def test_fit_empty_table_rejected(valid_model):
    with pytest.raises(DomainError):
        fit(ContingencyTable(counts=np.zeros((3, 2, 3), dtype=int), n=0))
