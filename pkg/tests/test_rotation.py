import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldmatch.basis import center_ensemble, reconstruction_error, svd_basis, truncate_basis
from fieldmatch.covariance import combine_error_spec
from fieldmatch.errors import ConstraintInfeasibleError, InvalidArgumentError
from fieldmatch.rotation import (
    RotationConfig,
    captured_fraction,
    rotate_basis,
    terminal_case_check,
)

from conftest import random_spd


def _ensemble(rng, ell, n, decay=0.7):
    """Ensemble with geometrically decaying structure so truncation is non-trivial."""
    modes = rng.standard_normal((ell, n))
    amps = rng.standard_normal((n, n)) * decay ** np.arange(n)[:, None]
    return center_ensemble(modes @ amps + 5.0)


class TestTerminalCaseCheck:
    def test_spanned_z(self, rng):
        ens = _ensemble(rng, 20, 6)
        basis = truncate_basis(svd_basis(ens), 0.9)
        z = basis.mu + basis.gamma_q @ rng.standard_normal(basis.q)
        verdict = terminal_case_check(basis, z, None, 10.0)
        assert not verdict.terminal
        assert verdict.r_w == pytest.approx(0.0, abs=1e-10)

    def test_orthogonal_component_at_twice_threshold(self, rng):
        ens = _ensemble(rng, 20, 6)
        basis = truncate_basis(svd_basis(ens), 0.9)
        w = random_spd(rng, 20)
        spec = combine_error_spec(w)
        perp = rng.standard_normal(20)
        # dense oracle for R_W, then scale the residual to land on 2T
        w_inv = np.linalg.inv(w)
        g = basis.gamma_q
        resid = perp - g @ np.linalg.solve(g.T @ w_inv @ g, g.T @ w_inv @ perp)
        r_unit = resid @ w_inv @ resid
        t = 25.0
        z = basis.mu + g @ rng.standard_normal(basis.q) + np.sqrt(2 * t / r_unit) * perp
        verdict = terminal_case_check(basis, z, spec, t)
        assert verdict.terminal
        assert verdict.r_w == pytest.approx(2 * t, rel=1e-9)

    def test_threshold_is_strict(self, rng):
        ens = _ensemble(rng, 10, 4)
        basis = truncate_basis(svd_basis(ens), 0.9)
        z = basis.mu + rng.standard_normal(10)
        r = terminal_case_check(basis, z, None, 0.0).r_w
        assert not terminal_case_check(basis, z, None, r).terminal


class TestRotateBasis:
    def test_leading_direction_observed(self, rng):
        ens = _ensemble(rng, 30, 8)
        svd = svd_basis(ens)
        z = svd.mu + 3.0 * svd.vectors[:, 0]
        rot = rotate_basis(ens, z, RotationConfig())
        assert rot.r == svd.r
        assert rot.q == truncate_basis(svd, 0.9).q
        np.testing.assert_allclose(np.abs(rot.vectors.T @ svd.vectors), np.eye(svd.r), atol=1e-8)
        np.testing.assert_allclose(rot.singular_values, svd.singular_values, rtol=1e-8)

    def test_w_orthonormal(self, rng):
        ens = _ensemble(rng, 25, 9)
        w = random_spd(rng, 25)
        spec = combine_error_spec(w)
        rot = rotate_basis(ens, ens.mu + rng.standard_normal(25), RotationConfig(weight=spec))
        gram = rot.vectors.T @ np.linalg.solve(w, rot.vectors)
        np.testing.assert_allclose(gram, np.eye(rot.r), atol=1e-8)

    def test_within_ensemble_span(self, rng):
        ens = _ensemble(rng, 25, 7)
        svd = svd_basis(ens)
        rot = rotate_basis(ens, ens.mu + rng.standard_normal(25))
        outside = rot.vectors - svd.vectors @ (svd.vectors.T @ rot.vectors)
        assert np.abs(outside).max() < 1e-10

    def test_z_outside_span_returns_svd(self, rng):
        ens = _ensemble(rng, 20, 5)
        svd = svd_basis(ens)
        perp = rng.standard_normal(20)
        perp -= svd.vectors @ (svd.vectors.T @ perp)
        rot = rotate_basis(ens, ens.mu + perp)
        assert rot.kind == "svd"
        np.testing.assert_array_equal(rot.vectors, svd.vectors)
        assert rot.q == truncate_basis(svd, 0.9).q

    def test_leading_vector_keeps_variance(self, rng):
        ens = _ensemble(rng, 40, 10)
        cfg = RotationConfig(min_first_vector_variance=0.2)
        rot = rotate_basis(ens, ens.mu + rng.standard_normal(40), cfg)
        assert captured_fraction(rot.vectors[:, 0], ens.f_centered)[0] >= 0.2

    def test_infeasible_constraint(self, rng):
        # eight equal singular values: no direction explains more than 1/8
        f = np.kron(np.eye(8), [1.0, -1.0])
        ens = center_ensemble(f)
        with pytest.raises(ConstraintInfeasibleError):
            rotate_basis(ens, ens.mu + rng.standard_normal(8), RotationConfig(min_first_vector_variance=0.5))

    def test_needs_rank_two(self):
        ens = center_ensemble([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
        with pytest.raises(InvalidArgumentError):
            rotate_basis(ens, np.zeros(2))

    @pytest.mark.parametrize("value", [0.0, 1.0, -0.1])
    def test_config_validation(self, value):
        with pytest.raises(InvalidArgumentError):
            RotationConfig(min_first_vector_variance=value)

    def test_deterministic(self, rng):
        ens = _ensemble(rng, 30, 8)
        z = ens.mu + rng.standard_normal(30)
        a, b = rotate_basis(ens, z), rotate_basis(ens, z)
        assert np.array_equal(a.vectors, b.vectors) and a.q == b.q

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), weighted=st.booleans())
    def test_never_worse_than_svd(self, seed, weighted):
        rng = np.random.default_rng(seed)
        ell, n = int(rng.integers(8, 40)), int(rng.integers(4, 12))
        ens = _ensemble(rng, ell, n, decay=rng.uniform(0.3, 0.95))
        spec = combine_error_spec(random_spd(rng, ell)) if weighted else None
        z = ens.mu + rng.standard_normal(ell) * rng.uniform(0.1, 10)
        cfg = RotationConfig(weight=spec, min_first_vector_variance=rng.uniform(0.01, 0.3))
        rot = rotate_basis(ens, z, cfg)
        svd = truncate_basis(svd_basis(ens), cfg.truncation_threshold)
        r_rot = reconstruction_error(rot, z, spec)
        r_svd = reconstruction_error(svd, z, spec)
        assert r_rot <= r_svd * (1 + 1e-9) + 1e-9
        # and at exactly the SVD truncation size
        r_same_q = reconstruction_error(rot.with_q(svd.q), z, spec)
        assert r_same_q <= r_svd * (1 + 1e-9) + 1e-9


class TestAngleScan:
    def test_leading_vector_matches_brute_force(self):
        rng = np.random.default_rng(7)
        ell = 12
        u, _ = np.linalg.qr(rng.standard_normal((ell, 2)))
        # two-dimensional ensemble span with a 4:1 variance split
        coords = rng.standard_normal((2, 30)) * np.array([[2.0], [1.0]])
        ens = center_ensemble(u @ coords)
        fc = ens.f_centered
        z = ens.mu + u @ np.array([0.2, 1.0])
        min_var = 0.5
        rot = rotate_basis(ens, z, RotationConfig(min_first_vector_variance=min_var, blend_grid=512))

        thetas = np.linspace(0.0, np.pi, 10_000, endpoint=False)
        dirs = u @ np.vstack([np.cos(thetas), np.sin(thetas)])
        feasible = captured_fraction(dirs, fc) >= min_var
        zc = z - ens.mu
        r = zc @ zc - (dirs.T @ zc) ** 2
        r[~feasible] = np.inf
        best = thetas[np.argmin(r)]

        v = u.T @ rot.vectors[:, 0]
        got = np.arctan2(v[1], v[0]) % np.pi
        # one step of the coarser grid (the blend path, in angle) bounds the error
        g = u.T @ svd_basis(ens).vectors[:, 0]
        v1 = u.T @ zc / np.linalg.norm(zc)
        g = g if g @ v1 >= 0 else -g
        lams = np.linspace(0.0, 1.0, 512)
        path = np.outer(1 - lams, v1) + np.outer(lams, g)
        path_angles = np.unwrap(np.arctan2(path[:, 1], path[:, 0]))
        step = max(np.abs(np.diff(path_angles)).max(), np.pi / 10_000)
        diff = min(abs(got - best), np.pi - abs(got - best))
        assert diff <= step + 1e-12
