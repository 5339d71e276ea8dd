import numpy as np
import pytest

from collapsing_bandits.belief import ModelValidationError, validate_model

M1 = (0.2, 0.6, 0.5, 0.8)


@pytest.fixture
def m1():
    return validate_model(*M1)


def random_natural_models(rng, count):
    """Rejection-sample strict-natural models, independent of the package generators."""
    out = []
    while len(out) < count:
        p = rng.uniform(0.0, 1.0, size=4)
        try:
            out.append(validate_model(*p))
        except ModelValidationError:
            continue
    return out


def stationary_by_power_iteration(P, tol=1e-13, max_iter=1_000_000):
    """Stationary row vector of a row-stochastic matrix by repeated multiplication."""
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    # lazy chain avoids periodic oscillation without moving the fixed point
    lazy = 0.5 * (np.eye(n) + P)
    for _ in range(max_iter):
        nxt = pi @ lazy
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt
        pi = nxt
    raise RuntimeError("power iteration did not converge")


def induced_chain(chains, policy):
    """Explicit transition matrix of the belief process under a threshold policy.

    States 0..x0-1 are chain 0, x0..x0+x1-1 chain 1.
    """
    x0, x1 = policy.x0, policy.x1
    n = x0 + x1
    M = np.zeros((n, n))
    heads = {0: 0, 1: x0}
    for omega, x in ((0, x0), (1, x1)):
        base = heads[omega]
        for u in range(1, x + 1):
            i = base + u - 1
            if u < x:
                M[i, i + 1] = 1.0
            else:
                b = chains.belief(omega, u)
                M[i, heads[1]] += b
                M[i, heads[0]] += 1.0 - b
    return M


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
