"""
Tests for Karhunen-Loeve random fields
"""

import json

import numpy as np
import pytest
from scipy import integrate

from discovery.errors import RootSearchError
from discovery.randfield import (
    KleField,
    KleSpec,
    char_roots,
    characteristic,
    eigenfunctions,
    eigenpair,
    eigenvalues,
    energy_fraction,
    sample_field,
    standard_normals,
)


class TestEigenpairs:
    """Closed-form spectrum of the exponential covariance"""

    @pytest.fixture
    def spec(self):
        return KleSpec(length=8.0)

    def test_default_correlation_length(self, spec):
        assert spec.correlation_length == pytest.approx(3.2)

    def test_twelve_modes_keep_most_of_the_energy(self, spec):
        assert energy_fraction(spec) == pytest.approx(0.956, abs=0.01)

    def test_roots_solve_the_characteristic_equation(self, spec):
        omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
        assert np.all(np.diff(omega) > 0)
        assert omega[0] > 0
        assert np.max(np.abs(characteristic(omega, spec.correlation_length, spec.length))) < 1e-10

    def test_eigenfunctions_are_orthonormal(self, spec):
        nodes, weights = np.polynomial.legendre.leggauss(200)
        x = 0.5 * spec.length * (nodes + 1.0)
        w = 0.5 * spec.length * weights
        omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
        f = eigenfunctions(x, omega, spec)
        gram = f.T @ (w[:, None] * f)
        assert np.max(np.abs(gram - np.eye(spec.n_modes))) < 1e-6

    @pytest.mark.parametrize("i", [0, 3, 11])
    def test_covariance_operator_reproduces_each_mode(self, spec, i):
        lam, omega = eigenpair(i, spec)
        eta = spec.correlation_length
        f = lambda y: float(eigenfunctions(np.array([y]), np.array([omega]), spec)[0, 0])
        for x in (0.7, 4.1, 7.5):
            value, _ = integrate.quad(
                lambda y: np.exp(-abs(x - y) / eta) * f(y), 0.0, spec.length, points=[x], epsabs=1e-13, limit=200
            )
            assert value == pytest.approx(lam * f(x), rel=1e-6, abs=1e-10)

    def test_eigenvalues_decrease(self, spec):
        omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
        assert np.all(np.diff(eigenvalues(omega, spec)) < 0)

    def test_roots_approach_multiples_of_pi_over_length(self, spec):
        omega = char_roots(spec.correlation_length, spec.length, 60)
        offset = omega * spec.length / np.pi - np.arange(60)
        assert np.all((offset > 0) & (offset < 1))
        for i in range(10, 60):
            assert 0.45 / i < offset[i] < 0.55 / i

    def test_energy_fraction_grows_towards_one(self):
        fractions = [energy_fraction(KleSpec(length=8.0, n_modes=n)) for n in (1, 2, 4, 8, 12, 50, 500)]
        assert all(b > a for a, b in zip(fractions, fractions[1:]))
        assert 0.995 < fractions[-1] < 1.0

    def test_truncated_expansion_reconstructs_the_covariance(self):
        spec = KleSpec(length=8.0, n_modes=100)
        omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
        x = np.linspace(0.0, spec.length, 9)
        f = eigenfunctions(x, omega, spec)
        reconstructed = f @ (eigenvalues(omega, spec)[:, None] * f.T)
        exact = np.exp(-np.abs(x[:, None] - x[None, :]) / spec.correlation_length)
        np.testing.assert_allclose(reconstructed, exact, atol=0.02)

    def test_mode_index_is_checked(self, spec):
        with pytest.raises(ValueError):
            eigenpair(12, spec)

    def test_failed_root_search(self, spec, mocker):
        mocker.patch("discovery.randfield._scan", return_value=[1.0])
        with pytest.raises(RootSearchError):
            char_roots(spec.correlation_length, spec.length, 5)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            KleSpec(length=0.0)
        with pytest.raises(ValueError):
            KleSpec(length=1.0, variance=-1.0)
        with pytest.raises(ValueError):
            KleSpec(length=1.0, n_modes=0)


class TestSampling:
    """Seeded log-normal realisations"""

    def test_standard_normals(self):
        z = standard_normals(11, 20000)
        assert abs(z.mean()) < 0.03
        assert abs(z.std() - 1.0) < 0.03
        assert np.array_equal(z, standard_normals(11, 20000))

    def test_same_seed_same_field(self):
        x = np.linspace(0.0, 8.0, 50)
        a = sample_field(KleSpec(length=8.0, seed=7))
        b = sample_field(KleSpec(length=8.0, seed=7))
        c = sample_field(KleSpec(length=8.0, seed=8))
        assert np.array_equal(a(x), b(x))
        assert not np.allclose(a(x), c(x))

    def test_parameter_is_exp_of_the_log_field(self):
        field = KleField(KleSpec(length=1.0, mean=0.5), xi=np.zeros(12))
        x = np.linspace(0.0, 1.0, 5)
        np.testing.assert_allclose(field(x), np.exp(0.5))
        assert np.all(sample_field(KleSpec(length=1.0, variance=4.0))(x) > 0)

    @pytest.mark.slow
    def test_sample_variance_matches_the_truncated_spectrum(self):
        spec = KleSpec(length=8.0)
        x = np.linspace(0.0, spec.length, 9)
        omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
        expected = eigenfunctions(x, omega, spec) ** 2 @ eigenvalues(omega, spec)
        samples = np.array([sample_field(KleSpec(length=8.0, seed=s)).log_field(x) for s in range(10000)])
        np.testing.assert_allclose(samples.var(axis=0), expected, rtol=0.06)
        assert np.max(np.abs(samples.mean(axis=0))) < 0.05

    def test_modal_weight_count_is_checked(self):
        with pytest.raises(ValueError):
            KleField(KleSpec(length=1.0), xi=np.zeros(3))

    def test_field_dump(self, tmp_path):
        field = sample_field(KleSpec(length=8.0, seed=7))
        field.to_csv(str(tmp_path / "field.csv"), str(tmp_path / "field.json"), nx=11)
        payload = json.loads((tmp_path / "field.json").read_text(encoding="utf-8"))
        assert payload["spec"]["seed"] == 7
        assert len(payload["xi"]) == 12
        assert payload["energy_fraction"] == pytest.approx(energy_fraction(field.spec))
        header = (tmp_path / "field.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header == "x,R,parameter"
