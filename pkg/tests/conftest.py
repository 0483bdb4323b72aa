import numpy as np
import pytest

from fieldmatch.basis import Basis


def random_spd(rng, n, cond=100.0):
    """Random SPD matrix with eigenvalues spread over ``[1, cond]``."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), size=n))
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def random_psd(rng, n, rank):
    a = rng.standard_normal((n, rank))
    return a @ a.T


def random_basis(rng, ell, r, q=None):
    """Orthonormal-column basis with decreasing singular values and zero mean."""
    gamma, _ = np.linalg.qr(rng.standard_normal((ell, r)))
    s = np.sort(rng.uniform(0.5, 5.0, size=r))[::-1]
    energy = np.cumsum(s**2)
    explained = energy / energy[-1]
    explained[-1] = 1.0
    return Basis(gamma, s, np.zeros(ell), r if q is None else q, explained, r + 5)


def dense_mahalanobis(d, total):
    """Oracle: quadratic form with an explicit dense inverse."""
    return float(d @ np.linalg.inv(total) @ d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
