import numpy as np
import pytest

from gplccm.design import UtilityDesign
from gplccm.simulate import recovery_config, simulate


def random_design(rng, n_persons=30, n_scen=3, n_alt=3, n_par=3, beta=None, availability=False):
    """Design with logit choices drawn at ``beta`` (standard normal when omitted)."""
    n = n_persons * n_scen
    X = rng.normal(size=(n, n_alt, n_par))
    avail = np.ones((n, n_alt), dtype=bool)
    if availability:
        avail = rng.random((n, n_alt)) < 0.8
        avail[:, 0] = True
    b = rng.normal(size=n_par) if beta is None else np.asarray(beta, dtype=float)
    V = np.where(avail, X @ b, -np.inf)
    chosen = np.argmax(V + rng.gumbel(size=V.shape), axis=1)
    person = np.repeat(np.arange(n_persons), n_scen)
    names = tuple(f"b{i}" for i in range(n_par))
    return UtilityDesign(X, avail, chosen, person, n_persons, names)


def two_class_design(rng, n_persons=60, n_scen=5):
    """Persons split by the sign of one feature, with opposite tastes."""
    S = rng.normal(size=(n_persons, 2))
    cls = (S[:, 0] > 0).astype(int)
    B = np.array([[2.0, -1.0], [-1.0, 2.0]])
    n = n_persons * n_scen
    X = rng.uniform(-2, 2, size=(n, 3, 2))
    person = np.repeat(np.arange(n_persons), n_scen)
    V = np.einsum("njp,np->nj", X, B[cls[person]])
    chosen = np.argmax(V + rng.gumbel(size=V.shape), axis=1)
    design = UtilityDesign(X, np.ones((n, 3), dtype=bool), chosen, person, n_persons, ("b0", "b1"))
    return design, S, cls


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_sim():
    return simulate(recovery_config(n_persons=60, n_scenarios=4), seed=3)
