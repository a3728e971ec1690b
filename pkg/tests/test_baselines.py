"""Tests for the reference filters."""

from __future__ import annotations

import numpy as np
import pytest

from evkf import expfam
from evkf.baselines import (
    Ensemble,
    ParticleCloud,
    bpf_step,
    enkf_step,
    kalman_filter,
    kalman_filter_models,
    kalman_step,
    riccati_covariance,
    run_bpf,
    run_enkf,
    systematic_resample,
)
from evkf.dynamics import builtin_vdp
from evkf.exceptions import DomainError, NumericError, ShapeError
from evkf.expfam import FamilyTag
from evkf.observations import LinearGaussianObs
from evkf.simulate import simulate

from .conftest import make_lgssm, make_poisson


class TestKalman:
    """Test the exact linear-Gaussian filter."""

    def test_scalar_step(self) -> None:
        """Test one step against hand-computed values."""
        m, P = kalman_step([0.0], [[1.0]], [[1.0]], [[1.0]], [[1.0]], [0.0], [1.0], [2.0])
        # P_pred = 2, S = 3, K = 2/3
        assert m[0] == pytest.approx(4.0 / 3.0)
        assert P[0, 0] == pytest.approx(2.0 / 3.0)

    def test_converges_to_riccati(self, rng: np.random.Generator) -> None:
        """Test the filtered covariance reaches the stationary Riccati solution."""
        dyn, obs = make_lgssm(rng)
        traj = simulate(dyn, obs, np.zeros(2), 200, rng)
        _, covs = kalman_filter_models(dyn, obs, traj.observations)
        P_inf = riccati_covariance(dyn.A, dyn.noise_cov, obs.C, obs.variances)
        np.testing.assert_allclose(covs[-1], P_inf, atol=1e-8)

    def test_models_wrapper(self, rng: np.random.Generator) -> None:
        """Test the model-driven wrapper starts from N(0, I)."""
        dyn, obs = make_lgssm(rng)
        ys = rng.standard_normal((5, 3))
        direct = kalman_filter(
            ys, np.zeros(2), np.eye(2), dyn.A, dyn.noise_cov, obs.C, obs.b, obs.variances
        )
        wrapped = kalman_filter_models(dyn, obs, ys)
        np.testing.assert_allclose(direct[0], wrapped[0], atol=1e-12)
        np.testing.assert_allclose(direct[1], wrapped[1], atol=1e-12)

    def test_rejects_indefinite_noise(self) -> None:
        """Test non-positive-definite noise raises DomainError."""
        with pytest.raises(DomainError):
            kalman_step([0.0], [[1.0]], [[1.0]], [[-1.0]], [[1.0]], [0.0], [1.0], [0.0])


class TestParticles:
    """Test the bootstrap particle filter."""

    def test_weights_are_normalized(self) -> None:
        """Test log-weights are shifted to sum to one."""
        cloud = ParticleCloud(np.zeros((3, 1)), np.array([0.0, 1.0, 2.0]))
        assert cloud.weights.sum() == pytest.approx(1.0)
        assert 1.0 < cloud.ess < 3.0

    def test_all_zero_weights(self) -> None:
        """Test a cloud with no mass raises NumericError."""
        with pytest.raises(NumericError):
            ParticleCloud(np.zeros((2, 1)), np.full(2, -np.inf))

    def test_weight_count(self) -> None:
        """Test one log-weight per particle is required."""
        with pytest.raises(ShapeError):
            ParticleCloud(np.zeros((2, 1)), np.zeros(3))

    def test_systematic_resample(self, rng: np.random.Generator) -> None:
        """Test counts stay within one of n w_i."""
        w = np.array([0.5, 0.25, 0.125, 0.125])
        idx = systematic_resample(w, rng)
        counts = np.bincount(idx, minlength=4)
        assert counts.sum() == 4
        assert np.all(np.abs(counts - 4 * w) <= 1.0)

    def test_resamples_when_degenerate(self, rng: np.random.Generator) -> None:
        """Test a low-ESS cloud is resampled to equal weights."""
        dyn = builtin_vdp()
        obs = LinearGaussianObs(np.eye(2), None, 1e-4)
        cloud = ParticleCloud.from_prior(expfam.initial_params(dyn.family), 200, rng)
        new = bpf_step(cloud, dyn, obs, np.array([0.1, -0.2]), rng)
        np.testing.assert_allclose(new.weights, 1.0 / 200)

    def test_tracks_lgssm(self, rng: np.random.Generator) -> None:
        """Test the BPF mean agrees with the Kalman mean on a linear model."""
        dyn, obs = make_lgssm(rng)
        traj = simulate(dyn, obs, np.zeros(2), 30, rng)
        kalman, _ = kalman_filter_models(dyn, obs, traj.observations)
        bpf = run_bpf(dyn, obs, traj.observations, rng, n_particles=5000)
        assert np.sqrt(np.mean((bpf - kalman) ** 2)) < 0.1


class TestEnsemble:
    """Test the stochastic ensemble Kalman filter."""

    def test_needs_two_members(self) -> None:
        """Test ensembles of one member are refused."""
        with pytest.raises(ShapeError):
            Ensemble(np.zeros((1, 2)))

    def test_tracks_lgssm(self, rng: np.random.Generator) -> None:
        """Test the EnKF mean agrees with the Kalman mean on a linear model."""
        dyn, obs = make_lgssm(rng)
        traj = simulate(dyn, obs, np.zeros(2), 30, rng)
        kalman, _ = kalman_filter_models(dyn, obs, traj.observations)
        enkf = run_enkf(dyn, obs, traj.observations, rng, n_members=3000)
        assert np.sqrt(np.mean((enkf - kalman) ** 2)) < 0.1

    def test_identical_members(self, rng: np.random.Generator) -> None:
        """Test an ensemble started from a single point spreads and stays finite."""
        dyn, obs = make_lgssm(rng)
        out = enkf_step(Ensemble(np.ones((10, 2))), dyn, obs, np.zeros(3), rng)
        assert np.all(np.isfinite(out.members))
        assert np.all(np.ptp(out.members, axis=0) > 0.0)

    def test_poisson_readout(self, rng: np.random.Generator) -> None:
        """Test the EnKF runs with Poisson counts and yields finite means."""
        dyn = builtin_vdp()
        obs = make_poisson(rng, L=2, N=6, dt=0.1)
        traj = simulate(dyn, obs, np.array([1.0, 0.0]), 20, rng)
        means = run_enkf(dyn, obs, traj.observations, rng, n_members=200)
        assert means.shape == (20, 2)
        assert np.all(np.isfinite(means))

    def test_prior_sampling(self, rng: np.random.Generator) -> None:
        """Test ensembles drawn from the default prior."""
        ens = Ensemble.from_prior(expfam.initial_params(FamilyTag.gaussian(2)), 4000, rng)
        np.testing.assert_allclose(ens.mean(), 0.0, atol=0.1)
        np.testing.assert_allclose(ens.covariance(), np.eye(2), atol=0.1)
