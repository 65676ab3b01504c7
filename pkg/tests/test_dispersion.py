import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minbal.dispersion import (
    BracketingError,
    ConjugacyReport,
    Dispersion,
    DispersionSpec,
    DomainError,
    check_conjugacy,
    primal_f,
    rho,
    rho_prime,
)

VAR = DispersionSpec(Dispersion.VARIANCE, r=10, n=40)
ENT = DispersionSpec(Dispersion.NEGATIVE_ENTROPY, r=10, n=40)
SAD = DispersionSpec(Dispersion.SMOOTHED_ABSOLUTE_DEVIATION, r=10, n=40)
ALL = (VAR, ENT, SAD)


class TestClosedForms:
    def test_variance_rho_at_zero(self):
        assert rho(0.0, VAR) == 0.0

    def test_variance_rho_direct(self):
        spec = DispersionSpec(Dispersion.VARIANCE, r=4, n=8)
        assert rho(2.0, spec) == pytest.approx(-0.5, abs=1e-15)

    def test_entropy_rho(self):
        assert rho(-1.0, ENT) == pytest.approx(-1.0, abs=1e-15)

    def test_variance_rho_prime_at_zero_is_centering(self):
        spec = DispersionSpec(Dispersion.VARIANCE, r=5, n=10)
        assert rho_prime(0.0, spec) == pytest.approx(0.2, abs=1e-15)

    def test_entropy_rho_prime(self):
        assert rho_prime(-1.0, ENT) == pytest.approx(1.0, abs=1e-15)

    def test_variance_rho_prime_hand_value(self):
        assert rho_prime(0.4, VAR) == pytest.approx(-0.1, abs=1e-15)

    def test_vectorized_matches_scalar(self):
        grid = np.linspace(-2, 2, 7)
        for spec in ALL:
            np.testing.assert_allclose(rho(grid, spec), [rho(t, spec) for t in grid])
            np.testing.assert_allclose(rho_prime(grid, spec), [rho_prime(t, spec) for t in grid])


class TestPrimal:
    def test_variance_zero_at_center(self):
        assert primal_f(1.0 / VAR.r, VAR) == 0.0

    def test_entropy_zero_at_one(self):
        assert primal_f(1.0, ENT) == 0.0

    def test_variance_hand_value(self):
        assert primal_f(0.3, VAR) == pytest.approx(0.04, abs=1e-15)

    def test_entropy_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            primal_f(0.0, ENT)
        with pytest.raises(DomainError):
            primal_f(-0.5, ENT)

    def test_sad_is_near_absolute_deviation_away_from_center(self):
        u = 0.05
        val = primal_f(1.0 / SAD.r + u, SAD)
        assert val == pytest.approx(abs(u), rel=1e-2)


class TestDomain:
    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_nonfinite_rejected(self, bad):
        for fn in (rho, rho_prime):
            with pytest.raises(DomainError):
                fn(bad, VAR)
        with pytest.raises(DomainError):
            primal_f(bad, VAR)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DispersionSpec(Dispersion.VARIANCE, r=0, n=5)
        with pytest.raises(ValueError):
            DispersionSpec(Dispersion.VARIANCE, r=6, n=5)
        with pytest.raises(ValueError):
            DispersionSpec(Dispersion.SMOOTHED_ABSOLUTE_DEVIATION, r=2, n=5, epsilon=0.0)


GRIDS = {
    Dispersion.VARIANCE: np.linspace(-1, 1, 101),
    Dispersion.NEGATIVE_ENTROPY: np.linspace(-3, 1, 101),
    Dispersion.SMOOTHED_ABSOLUTE_DEVIATION: np.linspace(-2, 2, 101),
}


class TestDerivativeConsistency:
    @pytest.mark.parametrize("spec", ALL, ids=lambda s: s.kind.value)
    def test_rho_prime_matches_central_difference(self, spec):
        grid = GRIDS[spec.kind]
        h = 1e-6
        if spec.kind is Dispersion.SMOOTHED_ABSOLUTE_DEVIATION:
            # The curvature jumps at the two Huber junctions; a symmetric
            # difference straddling one is off by O(h / epsilon) even
            # though the derivative itself is continuous there.
            junction = 1.0 + spec.epsilon**2
            grid = grid[np.abs(np.abs(grid) - junction) > 1e-3]
        fd = (rho(grid + h, spec) - rho(grid - h, spec)) / (2 * h)
        exact = rho_prime(grid, spec)
        scale = np.maximum(np.abs(exact), 1e-3)
        assert np.max(np.abs(fd - exact) / scale) < 1e-6

    @pytest.mark.parametrize("spec", ALL, ids=lambda s: s.kind.value)
    def test_rho_prime_non_increasing(self, spec):
        grid = GRIDS[spec.kind]
        vals = rho_prime(grid, spec)
        assert np.all(np.diff(vals) <= 1e-15)

    def test_entropy_weights_positive_everywhere(self):
        assert np.all(rho_prime(np.linspace(-30, 30, 301), ENT) > 0)

    def test_variance_weights_can_go_negative(self):
        # Documented behavior, not an error: the affine link crosses zero.
        assert rho_prime(3.0, VAR) < 0


class TestConjugacyOracle:
    def test_variance_closed_form_matches_definition(self):
        rep = check_conjugacy(VAR, np.linspace(-1, 1, 101))
        assert rep.max_discrepancy <= 1e-10

    def test_entropy_closed_form_matches_definition(self):
        rep = check_conjugacy(ENT, np.linspace(-3, 1, 101))
        assert rep.max_discrepancy <= 1e-8

    def test_smoothed_absdev_closed_form_matches_definition(self):
        # Grid straddles both quadratic branches and the junctions.
        rep = check_conjugacy(SAD, np.linspace(-2, 2, 101))
        assert rep.max_discrepancy <= 1e-8

    def test_single_point_grid(self):
        rep = check_conjugacy(VAR, [0.0])
        assert isinstance(rep, ConjugacyReport)
        assert rep.max_discrepancy <= 1e-12
        assert rep.grid_size == 1

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            check_conjugacy(VAR, [])

    def test_nonfinite_grid_rejected(self):
        with pytest.raises(DomainError):
            check_conjugacy(VAR, [0.0, np.nan])


@settings(max_examples=50, deadline=None)
@given(
    t=st.floats(-3, 3),
    r=st.integers(1, 50),
    extra=st.integers(0, 50),
)
def test_weight_link_inverts_primal_slope(t, r, extra):
    """rho_prime sends a score to the weight whose dispersion slope negates it."""
    spec = DispersionSpec(Dispersion.VARIANCE, r=r, n=r + extra)
    w = rho_prime(t, spec)
    assert 2 * (w - 1.0 / r) == pytest.approx(-t, abs=1e-9)
