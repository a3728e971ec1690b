"""Tests for the conditional dynamics models."""

from __future__ import annotations

import numpy as np
import pytest

from evkf import dynamics, expfam
from evkf.approximators import Activation, Mlp
from evkf.dynamics import (
    DynamicsModel,
    LinearGaussian,
    MlpCB,
    MlpGamma,
    MlpGaussian,
    builtin_crnn,
    builtin_vdp,
    conditional_kl,
    conditional_kl_batch,
    dynamics_from_dict,
    make_learner_dynamics,
    random_crnn_weights,
)
from evkf.exceptions import DomainError, FamilyMismatchError, ShapeError
from evkf.expfam import FamilyTag

from .conftest import finite_difference


def _models(rng: np.random.Generator) -> dict[str, tuple[DynamicsModel, np.ndarray]]:
    """Trainable models with a batch of in-support states."""
    z_real = rng.standard_normal((4, 2))
    return {
        "linear": (LinearGaussian(0.5 * rng.standard_normal((2, 2)), [0.2, 0.3]), z_real),
        "linear-noise": (
            LinearGaussian(0.5 * rng.standard_normal((2, 2)), [0.2, 0.3], learn_noise=True),
            z_real,
        ),
        "mlp-diag-noise": (
            MlpGaussian(
                Mlp.init(2, 2, rng, hidden=6),
                [0.4, 0.1],
                residual=True,
                diagonal=True,
                learn_noise=True,
            ),
            z_real,
        ),
        "cb": (MlpCB(Mlp.init(2, 2, rng, hidden=6)), rng.uniform(0.05, 0.95, (4, 2))),
        "gamma": (
            MlpGamma(
                Mlp.init(2, 2, rng, hidden=6, output_activation=Activation.SOFTPLUS), b0=5.0
            ),
            rng.uniform(0.3, 2.0, (4, 2)),
        ),
    }


class TestNaturalMap:
    """Test lambda(z) for the built-in models."""

    def test_linear_gaussian_matches_expfam(self, rng: np.random.Generator) -> None:
        """Test the Gaussian transition equals N(Az, Q) built directly."""
        A = rng.standard_normal((2, 2))
        Q = np.array([[0.3, 0.1], [0.1, 0.2]])
        model = LinearGaussian(A, Q)
        z = rng.standard_normal(2)
        expected = expfam.gaussian(A @ z, Q)
        np.testing.assert_allclose(model.natural_map(z).lam, expected.lam, rtol=1e-12)

    def test_gamma_moments(self, rng: np.random.Generator) -> None:
        """Test Gamma dynamics have mean f(z) and variance 1 / b0."""
        net = Mlp.init(2, 2, rng, output_activation=Activation.SOFTPLUS)
        model = MlpGamma(net, b0=8.0)
        z = np.array([0.7, 1.3])
        mean, cov = expfam.moments(model.natural_map(z))
        np.testing.assert_allclose(mean, np.maximum(net.forward(z), 1e-3), rtol=1e-12)
        np.testing.assert_allclose(np.diag(cov), 1.0 / 8.0, rtol=1e-12)

    def test_vdp_drift(self) -> None:
        """Test one Euler step of the oscillator."""
        model = builtin_vdp(tau1=1.0, tau2=1.0, gamma=1.5, dt=0.1, sigma=0.1)
        z = np.array([[1.0, 2.0]])
        expected = [1.0 + 0.1 * 2.0, 2.0 + 0.1 * (1.5 * (1.0 - 1.0) * 2.0 - 1.0)]
        np.testing.assert_allclose(model.mean_map_batch(z)[0], expected)

    def test_support_errors(self, rng: np.random.Generator) -> None:
        """Test states outside the support raise DomainError."""
        cb = MlpCB(Mlp.init(2, 2, rng))
        with pytest.raises(DomainError):
            dynamics.natural_map(cb, [1.2, 0.5])
        gamma = make_learner_dynamics(FamilyTag.gamma(2), rng)
        with pytest.raises(DomainError):
            dynamics.natural_map(gamma, [-0.1, 0.5])

    def test_wrong_dimension(self) -> None:
        """Test a state of the wrong dimension raises ShapeError."""
        with pytest.raises(ShapeError):
            builtin_vdp().natural_map(np.zeros(3))

    def test_vdp_rejects_bad_sigma(self) -> None:
        """Test sigma <= 0 is refused."""
        with pytest.raises(DomainError):
            builtin_vdp(sigma=0.0)

    def test_gamma_needs_softplus(self, rng: np.random.Generator) -> None:
        """Test the Gamma model refuses an unconstrained network."""
        with pytest.raises(DomainError):
            MlpGamma(Mlp.init(2, 2, rng))


class TestGradients:
    """Test parameter and input derivatives."""

    @pytest.mark.parametrize("name", ["linear", "linear-noise", "mlp-diag-noise", "cb", "gamma"])
    def test_natural_map_vjp(self, name: str, rng: np.random.Generator) -> None:
        """Test the parameter VJP against finite differences."""
        model, z = _models(rng)[name]
        upstream = rng.standard_normal((z.shape[0], model.family.stat_dim))

        def objective(theta: np.ndarray) -> float:
            return float(np.sum(upstream * model.with_parameters(theta).natural_map_batch(z)))

        fd = finite_difference(objective, model.parameters())
        np.testing.assert_allclose(
            model.natural_map_vjp(z, upstream), fd, rtol=1e-5, atol=1e-7
        )

    @pytest.mark.parametrize("name", ["linear", "mlp-diag-noise", "cb", "gamma"])
    def test_mean_jacobian(self, name: str, rng: np.random.Generator) -> None:
        """Test d E[z_t | z] / dz against finite differences of the conditional mean."""
        model, z = _models(rng)[name]
        point = z[0]
        jac = model.mean_jacobian(point)
        for i in range(model.dim):

            def mean_i(x: np.ndarray, i: int = i) -> float:
                return float(expfam.moments(model.natural_map(x))[0][i])

            np.testing.assert_allclose(jac[i], finite_difference(mean_i, point), atol=1e-6)

    def test_vdp_and_crnn_jacobians(self, rng: np.random.Generator) -> None:
        """Test the fixed-drift Jacobians."""
        L = 3
        crnn = builtin_crnn(L, 2.5, random_crnn_weights(L, rng), 0.1, 1.0, 0.01 * np.eye(L))
        for model, point in ((builtin_vdp(), np.array([0.4, -1.1])), (crnn, rng.normal(size=L))):
            jac = model.mean_jacobian(point)
            for i in range(model.dim):
                fd = finite_difference(
                    lambda x, i=i, m=model: float(m.mean_map_batch(x[None, :])[0, i]), point
                )
                np.testing.assert_allclose(jac[i], fd, atol=1e-7)

    def test_fixed_models_are_not_trainable(self) -> None:
        """Test built-in systems expose no parameters."""
        model = builtin_vdp()
        assert not model.trainable
        assert model.natural_map_vjp(np.zeros((1, 2)), np.zeros((1, 6))).size == 0
        with pytest.raises(ShapeError):
            model.with_parameters(np.ones(2))


class TestConditionalKl:
    """Test KL between transition models."""

    def test_identical_models(self, rng: np.random.Generator) -> None:
        """Test the KL of a model against itself vanishes."""
        model = make_learner_dynamics(FamilyTag.continuous_bernoulli(2), rng)
        z = rng.uniform(0.0, 1.0, (10, 2))
        np.testing.assert_allclose(conditional_kl_batch(model, model, z), 0.0, atol=1e-12)

    def test_batch_matches_single(self, rng: np.random.Generator) -> None:
        """Test batched and single-state KL agree."""
        a = make_learner_dynamics(FamilyTag.gamma(2), rng)
        b = make_learner_dynamics(FamilyTag.gamma(2), rng)
        z = rng.uniform(0.2, 2.0, (5, 2))
        batch = conditional_kl_batch(a, b, z)
        single = [conditional_kl(a, b, row) for row in z]
        np.testing.assert_allclose(batch, single, rtol=1e-9, atol=1e-12)

    def test_gaussian_mean_shift(self) -> None:
        """Test the KL of two Gaussian transitions differing by a mean shift."""
        Q = np.diag([0.5, 2.0])
        a = LinearGaussian(np.eye(2), Q)
        b = LinearGaussian(np.eye(2) * 0.5, Q)
        z = np.array([1.0, 2.0])
        diff = 0.5 * z
        expected = 0.5 * diff @ np.linalg.inv(Q) @ diff
        assert conditional_kl(a, b, z) == pytest.approx(expected, rel=1e-10)

    def test_family_mismatch(self, rng: np.random.Generator) -> None:
        """Test that KL across families raises."""
        with pytest.raises(FamilyMismatchError):
            conditional_kl(
                make_learner_dynamics(FamilyTag.gamma(2), rng), builtin_vdp(), np.ones(2)
            )


class TestSampling:
    """Test conditional sampling."""

    def test_samples_stay_in_support(self, rng: np.random.Generator) -> None:
        """Test CB draws stay in the unit cube and Gamma draws stay positive."""
        cb = make_learner_dynamics(FamilyTag.continuous_bernoulli(3), rng)
        out = cb.conditional_sample(rng.uniform(0.0, 1.0, (200, 3)), rng)
        assert np.all((out >= 0.0) & (out <= 1.0))
        gamma = make_learner_dynamics(FamilyTag.gamma(2), rng)
        assert np.all(gamma.conditional_sample(np.ones((200, 2)), rng) > 0.0)

    def test_gaussian_sample_statistics(self, rng: np.random.Generator) -> None:
        """Test Gaussian transitions reproduce their conditional mean and covariance."""
        Q = np.array([[0.3, 0.1], [0.1, 0.2]])
        model = LinearGaussian(np.eye(2), Q)
        draws = model.conditional_sample(np.ones((20_000, 2)), rng)
        np.testing.assert_allclose(draws.mean(axis=0), [1.0, 1.0], atol=0.02)
        np.testing.assert_allclose(np.cov(draws.T), Q, atol=0.02)

    def test_single_state_returns_vector(self, rng: np.random.Generator) -> None:
        """Test one state gives one draw of shape (L,)."""
        assert builtin_vdp().conditional_sample(np.zeros(2), rng).shape == (2,)


class TestCheckpoint:
    """Test model serialization."""

    def test_roundtrip(self, rng: np.random.Generator) -> None:
        """Test every model kind is rebuilt exactly from its checkpoint."""
        L = 2
        models = [
            *(model for model, _ in _models(rng).values()),
            builtin_vdp(),
            builtin_crnn(L, 2.0, random_crnn_weights(L, rng), 0.1, 1.0, 0.01),
        ]
        z = rng.uniform(0.1, 0.9, (3, L))
        for model in models:
            back = dynamics_from_dict(model.to_dict())
            assert type(back) is type(model)
            assert back.family == model.family
            np.testing.assert_array_equal(back.natural_map_batch(z), model.natural_map_batch(z))

    def test_unknown_kind(self) -> None:
        """Test an unknown checkpoint kind is refused."""
        with pytest.raises(ValueError, match="Unknown dynamics kind"):
            dynamics_from_dict({"kind": "lstm"})

    def test_bad_noise(self) -> None:
        """Test an indefinite noise covariance is refused."""
        with pytest.raises(DomainError):
            LinearGaussian(np.eye(2), [[1.0, 2.0], [2.0, 1.0]])
