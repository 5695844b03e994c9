"""Shared builders for the test suite.

The discrete chains built here are the enumeration-oracle vehicles: small
enough to enumerate exactly, awkward enough (random tables, a likelihood
factor on the middle submodel) to exercise the samplers properly.
"""

import numpy as np
import pytest

from chainmeld import UnitFactorization, builtin_discrete_chain


def random_table(rng, shape, spread=0.5):
    t = np.exp(spread * rng.standard_normal(shape))
    return t / t.sum()


def make_discrete_chain(seed=7, factorized_ends=True, with_units=True):
    """Seeded 3-submodel discrete chain: 2+2 binary shared coords, binary
    2-D psi2, middle-submodel likelihood folded in.  64 joint states."""
    rng = np.random.default_rng(seed)
    if factorized_ends:
        def end_table():
            a = random_table(rng, 2)
            b = random_table(rng, 2)
            return np.multiply.outer(a, b)
        p1, p3 = end_table(), end_table()
    else:
        p1 = random_table(rng, (2, 2))
        p3 = random_table(rng, (2, 2))
    p2 = random_table(rng, (2, 2, 2, 2, 2, 2))
    lik2 = np.exp(0.3 * rng.standard_normal((2, 2, 2, 2, 2, 2)))
    units = (None, None, None)
    if with_units:
        uf = UnitFactorization(((0,), (1,)), ((), ()))
        units = (uf, None, uf)
    return builtin_discrete_chain(
        p1, p2, p3,
        phi_cards=((2, 2), (2, 2)),
        psi_cards=((), (2, 2), ()),
        likelihoods=(None, lik2, None),
        units=units,
    )


@pytest.fixture
def discrete_chain():
    return make_discrete_chain()


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
