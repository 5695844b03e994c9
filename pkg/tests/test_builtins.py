import numpy as np
import pytest
import scipy.stats

from chainmeld import (
    ConfigError,
    ModelInconsistencyError,
    SubmodelSpec,
    UnsupportedConfigError,
    builtin_discrete_chain,
    builtin_gaussian_chain,
    empirical_table,
    enumerate_melded_posterior,
    enumerate_pooled_prior,
    log_pooling,
    poe_pooling,
    tv_distance,
    validate_chain,
)
from chainmeld.builtins import BuiltChain
from chainmeld.chain import ChainModel

from conftest import make_discrete_chain, random_table


class TestGaussianChain:
    def test_validates(self):
        built = builtin_gaussian_chain()
        assert validate_chain(built.model) == []

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"rho": 1.0},
            {"rho": -1.0},
            {"sigma1": 0.0},
            {"sigma2": (1.0, -1.0)},
            {"tau": -2.0},
            {"y2": [1.0]},  # data without a psi2 scale
        ],
    )
    def test_invalid_params(self, kwargs):
        with pytest.raises(ConfigError):
            builtin_gaussian_chain(**kwargs)

    def test_middle_marginal_matches_scipy(self, rng):
        built = builtin_gaussian_chain(rho=0.6)
        cov = np.array([[1.0, 0.6], [0.6, 1.0]])
        ref = scipy.stats.multivariate_normal([0.0, 0.0], cov)
        x = rng.standard_normal((40, 2))
        np.testing.assert_allclose(
            built.model.submodels[1].eval_log_prior(x), ref.logpdf(x), atol=1e-10
        )

    def test_end_marginal_batched(self, rng):
        built = builtin_gaussian_chain()
        x = rng.standard_normal((3, 4, 1))
        out = built.model.submodels[0].eval_log_prior(x)
        assert np.asarray(out).shape == (3, 4)
        ref = scipy.stats.norm(-2.5, 1.0).logpdf(x[..., 0])
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_likelihood_enters_joint(self):
        built = builtin_gaussian_chain(y1=[0.0], s1=2.0)
        phi = np.array([1.0])
        with_data = built.model.submodels[0].eval_log_joint(phi, np.empty(0))
        no_data = builtin_gaussian_chain().model.submodels[0].eval_log_joint(
            phi, np.empty(0)
        )
        expected = scipy.stats.norm(1.0, 2.0).logpdf(0.0)
        assert with_data - no_data == pytest.approx(expected, abs=1e-10)

    def test_rho_zero_prior_factorizes(self, rng):
        built = builtin_gaussian_chain(rho=0.0)
        spec2 = built.model.submodels[1]
        a, b = rng.standard_normal(2)
        joint = float(np.asarray(spec2.eval_log_prior(np.array([a, b]))))
        split = float(np.asarray(built.boundary_marginals[(1, 0)](np.array([a])))) + float(
            np.asarray(built.boundary_marginals[(1, 1)](np.array([b])))
        )
        assert joint == pytest.approx(split, abs=1e-10)


class TestDiscreteChain:
    def test_validates(self, discrete_chain):
        assert validate_chain(discrete_chain.model) == []

    def test_unnormalized_table_rejected(self):
        bad = np.ones((2, 2))  # sums to 4
        good = random_table(np.random.default_rng(0), (2, 2, 2, 2))
        with pytest.raises(ConfigError):
            builtin_discrete_chain(
                bad, good, bad, ((2,), (2,)), ((2,), (2,), (2,))
            )

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            builtin_discrete_chain(
                random_table(rng, (2, 2)),
                random_table(rng, (2, 2)),
                random_table(rng, (2, 2)),
                ((2, 2), (2, 2)),
            )

    def test_negative_entries_rejected(self):
        t = np.array([[0.7, 0.5], [-0.1, -0.1]])
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            builtin_discrete_chain(
                t, random_table(rng, (2, 2)), random_table(rng, (2,) * 2),
                ((2,), (2,)), ((2,), (), ()),
            )

    def test_marginals_sum_correctly(self, discrete_chain):
        p2 = discrete_chain.meta["prior_tables"][1]
        spec2 = discrete_chain.model.submodels[1]
        manual = p2.sum(axis=(4, 5))
        state = np.array([1.0, 0.0, 0.0, 1.0])
        assert spec2.eval_log_prior(state) == pytest.approx(
            np.log(manual[1, 0, 0, 1]), abs=1e-12
        )

    def test_boundary_marginals(self, discrete_chain):
        p2 = discrete_chain.meta["prior_tables"][1]
        m12 = p2.sum(axis=(2, 3, 4, 5))
        value = discrete_chain.boundary_marginals[(1, 0)](np.array([0.0, 1.0]))
        assert value == pytest.approx(np.log(m12[0, 1]), abs=1e-12)


class TestEnumeration:
    def test_uniform_tables_give_uniform_posterior(self):
        u = lambda shape: np.full(shape, 1.0 / np.prod(shape))
        built = builtin_discrete_chain(
            u((2, 2)), u((2, 2)), u((2, 2)),
            ((2,), (2,)), ((2,), (), (2,)),
        )
        oracle = enumerate_melded_posterior(built, poe_pooling(built.model))
        np.testing.assert_allclose(oracle.probs, 1.0 / len(oracle.probs), atol=1e-12)

    def test_poe_proportional_to_joint_product(self, discrete_chain):
        # independent oracle: direct table arithmetic
        built = discrete_chain
        oracle = enumerate_melded_posterior(built, poe_pooling(built.model))
        p1, p2, p3 = built.meta["prior_tables"]
        lik2 = built.meta["likelihood_tables"][1]
        expected = np.zeros(len(oracle.probs))
        for k, row in enumerate(oracle.states.astype(int)):
            a, b, c, d, e, f = row  # phi12 (2), phi23 (2), psi2 (2)
            expected[k] = p1[a, b] * p2[a, b, c, d, e, f] * lik2[a, b, c, d, e, f] * p3[c, d]
        expected /= expected.sum()
        np.testing.assert_allclose(oracle.probs, expected, atol=1e-12)

    def test_state_space_limit(self):
        u = lambda shape: np.full(shape, 1.0 / np.prod(shape))
        built = builtin_discrete_chain(
            u((5, 5)), u((5,) * 7), u((5, 5)),
            ((5,), (5,)), ((5,), (5,) * 5, (5,)),
        )
        with pytest.raises(UnsupportedConfigError):
            enumerate_melded_posterior(built, poe_pooling(built.model))

    def test_requires_discrete(self):
        built = builtin_gaussian_chain()
        with pytest.raises(UnsupportedConfigError):
            enumerate_melded_posterior(built, poe_pooling(built.model))

    def test_inconsistency_surfaced(self, discrete_chain):
        # a middle submodel whose marginal is zero where its joint is not
        model = discrete_chain.model
        spec2 = model.submodels[1]
        bad2 = SubmodelSpec(
            1, "phi12", "phi23", spec2.log_joint,
            lambda x: -np.inf,
            psi_coords=spec2.psi_coords,
        )
        patched = BuiltChain(
            model=ChainModel(
                (model.submodels[0], bad2, model.submodels[2]), model.phi_blocks
            ),
            boundary_marginals=discrete_chain.boundary_marginals,
            supports=discrete_chain.supports,
            meta=discrete_chain.meta,
        )
        pool = log_pooling(patched.model, [1.0, 0.0, 1.0])
        with pytest.raises(ModelInconsistencyError):
            enumerate_melded_posterior(patched, pool)

    def test_pooled_prior_enumeration_mass(self, discrete_chain):
        pool = log_pooling(discrete_chain.model, [0.5, 0.5, 0.5])
        table = enumerate_pooled_prior(discrete_chain, pool)
        assert table.probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert table.states.shape == (16, 4)


class TestTables:
    def test_tv_distance_bounds(self, discrete_chain):
        pool = poe_pooling(discrete_chain.model)
        oracle = enumerate_melded_posterior(discrete_chain, pool)
        assert tv_distance(oracle, oracle) == 0.0

    def test_tv_requires_same_states(self, discrete_chain):
        pool = poe_pooling(discrete_chain.model)
        oracle = enumerate_melded_posterior(discrete_chain, pool)
        other = oracle.marginal([0, 1])
        with pytest.raises(UnsupportedConfigError):
            tv_distance(oracle, other)

    def test_empirical_table_counts(self, discrete_chain):
        pool = poe_pooling(discrete_chain.model)
        oracle = enumerate_melded_posterior(discrete_chain, pool)
        draws = np.vstack([oracle.states[3]] * 3 + [oracle.states[10]])
        emp = empirical_table(draws, oracle)
        assert emp.probs[3] == pytest.approx(0.75)
        assert emp.probs[10] == pytest.approx(0.25)

    def test_marginal_sums(self, discrete_chain):
        pool = poe_pooling(discrete_chain.model)
        oracle = enumerate_melded_posterior(discrete_chain, pool)
        marg = oracle.marginal(oracle.group_columns("phi12"))
        assert marg.probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert marg.states.shape[0] == 4
