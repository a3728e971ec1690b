"""Tests for the variational filter."""

from __future__ import annotations

import numpy as np
import pytest

from evkf import expfam, filtering
from evkf.approximators import Mlp
from evkf.baselines import kalman_filter_models, kalman_step
from evkf.const import LearningObjective, OptimizerKind, VarianceCorrection
from evkf.dynamics import LinearGaussian, MlpCB, MlpGaussian, builtin_vdp, make_learner_dynamics
from evkf.exceptions import ConfigError, FamilyMismatchError
from evkf.expfam import FamilyTag
from evkf.filtering import (
    DynamicsLearner,
    EvkfConfig,
    EvkfFilter,
    compute_bounds,
    correct_variance,
    dynamics_loss_and_grad,
    predict,
    predict_oracle,
    predict_raw,
    update,
    window_loss_and_grad,
)
from evkf.observations import LinearGaussianObs, PoissonExp
from evkf.simulate import simulate
from evkf.util import StepTimer

from .conftest import finite_difference, make_lgssm, make_poisson, random_gaussian


class TestEvkfConfig:
    """Test filter settings."""

    def test_defaults(self) -> None:
        """Test the default configuration disables learning."""
        cfg = EvkfConfig()
        assert cfg.learn_every is None
        assert cfg.variance_correction is VarianceCorrection.EKF_LIKE

    def test_coerces_strings(self) -> None:
        """Test enum fields accept their string values."""
        cfg = EvkfConfig(learning_objective="kl", optimizer="sgd", variance_correction="none")
        assert cfg.learning_objective is LearningObjective.KL
        assert cfg.optimizer is OptimizerKind.SGD
        assert cfg.variance_correction is VarianceCorrection.NONE

    @pytest.mark.parametrize(
        ("field", "value"),
        [("mc_samples_predict", 0), ("cvi_step_size", 1.5), ("learn_every", 0), ("cvi_tol", 0.0)],
    )
    def test_rejects_bad_values(self, field: str, value: float) -> None:
        """Test out-of-range settings raise ConfigError with the field path."""
        with pytest.raises(ConfigError) as err:
            EvkfConfig(**{field: value})
        assert err.value.path == field


class TestKalmanExactness:
    """Test the filter reproduces the Kalman filter on linear-Gaussian models."""

    def test_matches_kalman(self, rng: np.random.Generator) -> None:
        """Test filtered means and covariances against the exact recursion."""
        dyn, obs = make_lgssm(rng, L=2, N=3)
        traj = simulate(dyn, obs, np.zeros(2), 60, rng)
        run = EvkfFilter(dyn, obs, EvkfConfig(), rng, learn=False).run(traj.observations)
        means, covs = kalman_filter_models(dyn, obs, traj.observations)
        np.testing.assert_allclose(run.means, means, atol=1e-8)
        np.testing.assert_allclose(run.covariances, covs, atol=1e-8)

    def test_single_update_is_conjugate(self, rng: np.random.Generator) -> None:
        """Test one CVI update lands on the Bayes posterior for Gaussian readouts."""
        obs = LinearGaussianObs(rng.standard_normal((3, 2)), rng.standard_normal(3), 0.4)
        q_pred = random_gaussian(rng, 2)
        y = rng.standard_normal(3)
        q_post, info = update(q_pred, obs, y, EvkfConfig())
        m, P = expfam.moments(q_pred)
        m_k, P_k = kalman_step(m, P, np.eye(2), 1e-300 * np.eye(2), obs.C, obs.b, 0.4, y)
        m_post, P_post = expfam.moments(q_post)
        np.testing.assert_allclose(m_post, m_k, atol=1e-8)
        np.testing.assert_allclose(P_post, P_k, atol=1e-8)
        assert info.halvings == 0


class TestPredict:
    """Test the prediction step."""

    def test_affine_prediction_is_exact(self, rng: np.random.Generator) -> None:
        """Test linear dynamics give N(Am, APA^T + Q) with variance correction."""
        dyn, _ = make_lgssm(rng)
        q = random_gaussian(rng, 2)
        m, P = expfam.moments(q)
        m_bar, P_bar = expfam.moments(predict(q, dyn, EvkfConfig(), rng))
        np.testing.assert_allclose(m_bar, dyn.A @ m, atol=1e-10)
        np.testing.assert_allclose(P_bar, dyn.A @ P @ dyn.A.T + dyn.noise_cov, atol=1e-10)

    def test_no_correction_keeps_noise(self, rng: np.random.Generator) -> None:
        """Test the raw prediction's covariance is Q for Gaussian dynamics."""
        dyn, _ = make_lgssm(rng)
        cfg = EvkfConfig(variance_correction=VarianceCorrection.NONE)
        _, P_bar = expfam.moments(predict(random_gaussian(rng, 2), dyn, cfg, rng))
        np.testing.assert_allclose(P_bar, dyn.noise_cov, atol=1e-12)

    @pytest.mark.parametrize("family", ["gaussian", "cb", "gamma"])
    def test_matches_oracle(self, family: str, rng: np.random.Generator) -> None:
        """Test the closed-form prediction minimizes the prediction free energy.

        Both sides use their own draws, so they only meet up to Monte Carlo error.
        """
        if family == "gaussian":
            dyn = builtin_vdp()
            q_prev = random_gaussian(rng, 2)
        elif family == "cb":
            dyn = make_learner_dynamics(FamilyTag.continuous_bernoulli(2), rng)
            q_prev = expfam.continuous_bernoulli([1.0, -2.0])
        else:
            dyn = make_learner_dynamics(FamilyTag.gamma(2), rng)
            q_prev = expfam.gamma([4.0, 6.0], [3.0, 5.0])
        cfg = EvkfConfig(mc_samples_predict=50_000)
        closed = predict_raw(q_prev, dyn, cfg, np.random.default_rng(7))
        oracle = predict_oracle(q_prev, dyn, np.random.default_rng(8), n_samples=50_000)
        np.testing.assert_allclose(
            expfam.mean_from_natural(oracle).mu,
            expfam.mean_from_natural(closed).mu,
            rtol=0.02,
            atol=0.05,
        )

    def test_oracle_recovers_linear_prediction(self, rng: np.random.Generator) -> None:
        """Test the sampled oracle lands on N(Am, Q) for linear dynamics."""
        dyn, _ = make_lgssm(rng)
        q_prev = random_gaussian(rng, 2)
        cfg = EvkfConfig(variance_correction=VarianceCorrection.NONE)
        closed = predict(q_prev, dyn, cfg, rng)
        oracle = predict_oracle(q_prev, dyn, np.random.default_rng(5), n_samples=50_000)
        m_oracle, P_oracle = expfam.moments(oracle)
        m_closed, P_closed = expfam.moments(closed)
        np.testing.assert_allclose(m_oracle, m_closed, atol=0.05)
        np.testing.assert_allclose(P_oracle, P_closed, rtol=1e-4, atol=1e-6)

    def test_family_mismatch(self, rng: np.random.Generator) -> None:
        """Test a posterior from another family is refused."""
        with pytest.raises(FamilyMismatchError):
            predict(expfam.gamma([2.0, 2.0], [1.0, 1.0]), builtin_vdp(), EvkfConfig(), rng)

    def test_gamma_variance_correction(self, rng: np.random.Generator) -> None:
        """Test Gamma predictions keep their mean and gain the propagated variance."""
        dyn = make_learner_dynamics(FamilyTag.gamma(2), rng, b0=10.0)
        q_prev = expfam.gamma([5.0, 8.0], [4.0, 6.0])
        raw = predict_raw(q_prev, dyn, EvkfConfig(), np.random.default_rng(1))
        corrected = predict(q_prev, dyn, EvkfConfig(), np.random.default_rng(1))
        m_raw, _ = expfam.moments(raw)
        m_cor, P_cor = expfam.moments(corrected)
        np.testing.assert_allclose(m_cor, m_raw, rtol=1e-9)
        assert np.all(np.diag(P_cor) >= 1.0 / 10.0 - 1e-12)

    def test_diagonal_correction_drops_cross_terms(self, rng: np.random.Generator) -> None:
        """Test a diagonal Gaussian gains only the diagonal of A P A^T."""
        dyn, _ = make_lgssm(rng)
        q_prev = random_gaussian(rng, 2, diagonal=True)
        q_raw = random_gaussian(rng, 2, diagonal=True)
        _, P_prev = expfam.moments(q_prev)
        m_raw, P_raw = expfam.moments(q_raw)
        m, P = expfam.moments(correct_variance(q_raw, q_prev, dyn, EvkfConfig()))
        np.testing.assert_allclose(m, m_raw, atol=1e-10)
        expected = np.diag(P_raw) + np.diag(dyn.A @ P_prev @ dyn.A.T)
        np.testing.assert_allclose(np.diag(P), expected, rtol=1e-10)

    def test_cb_is_not_corrected(self, rng: np.random.Generator) -> None:
        """Test continuous Bernoulli predictions pass through unchanged."""
        dyn = make_learner_dynamics(FamilyTag.continuous_bernoulli(2), rng)
        q_raw = expfam.continuous_bernoulli([0.5, -1.0])
        q_prev = expfam.continuous_bernoulli([2.0, 0.0])
        assert correct_variance(q_raw, q_prev, dyn, EvkfConfig()) is q_raw


class TestUpdate:
    """Test the CVI update."""

    @pytest.mark.parametrize("tag", [FamilyTag.gaussian(2), FamilyTag.continuous_bernoulli(2)])
    def test_improves_objective(self, tag: FamilyTag, rng: np.random.Generator) -> None:
        """Test the update never lowers E_q[log p(y|z)] - KL(q || q_bar)."""
        obs = make_poisson(rng, L=2, N=6, dt=0.5)
        q_pred = expfam.initial_params(tag)
        y = obs.sample_obs(expfam.moments(q_pred)[0], rng)
        start = obs.expected_loglik(q_pred, y)
        q_post, info = update(q_pred, obs, y, EvkfConfig())
        assert info.elbo >= start - 1e-9
        assert info.iterations >= 1
        assert expfam.is_valid(q_post)

    def test_gamma_update_stays_valid(self, rng: np.random.Generator) -> None:
        """Test the Gamma posterior stays inside the natural domain."""
        obs = PoissonExp(0.2 * np.abs(rng.standard_normal((5, 2))), np.full(5, 1.0), dt=1.0)
        q_pred = expfam.gamma([3.0, 3.0], [3.0, 3.0])
        y = np.array([0.0, 9.0, 4.0, 1.0, 20.0])
        q_post, _ = update(q_pred, obs, y, EvkfConfig(cvi_max_iters=50))
        assert expfam.is_valid(q_post)

    def test_diagonal_with_mixing_readout(self) -> None:
        """Test a diagonal posterior converges to the mean-field optimum.

        For a Gaussian readout the mean-field mean equals the exact posterior mean,
        while the precisions only pick up the diagonal of C^T R^-1 C.
        """
        C = np.array([[1.0, 0.5]])
        obs = LinearGaussianObs(C, variances=1.0)
        q_pred = expfam.gaussian([0.0, 0.0], [1.0, 1.0], diagonal=True)
        y = np.array([1.2])
        q_post, _ = update(q_pred, obs, y, EvkfConfig(cvi_max_iters=200))
        m, P = expfam.moments(q_post)
        info = C.T @ C
        np.testing.assert_allclose(m, np.linalg.solve(np.eye(2) + info, C.T @ y), atol=1e-4)
        np.testing.assert_allclose(np.diag(P), 1.0 / (1.0 + np.diag(info)), atol=1e-4)


class TestBounds:
    """Test the per-step lower bounds."""

    def test_gap_is_non_negative(self, rng: np.random.Generator) -> None:
        """Test L >= M for a nonlinear model with Poisson readouts."""
        dyn = builtin_vdp()
        obs = make_poisson(rng, L=2, N=8, dt=0.1)
        q_prev = random_gaussian(rng, 2)
        cfg = EvkfConfig(variance_correction=VarianceCorrection.NONE)
        q_raw = predict_raw(q_prev, dyn, cfg, rng)
        y = obs.sample_obs(expfam.moments(q_raw)[0], rng)
        q_post, _ = update(q_raw, obs, y, cfg)
        bounds = compute_bounds(q_prev, q_post, q_raw, dyn, obs, y, rng, n_samples=64)
        assert bounds.gap >= -1e-6
        assert bounds.elbo_M <= bounds.elbo_L + 1e-6

    def test_recorded_in_diagnostics(self, rng: np.random.Generator) -> None:
        """Test compute_bounds fills the per-step diagnostics."""
        dyn = make_learner_dynamics(FamilyTag.continuous_bernoulli(2), rng)
        obs = LinearGaussianObs(rng.standard_normal((4, 2)), None, 0.1)
        traj = simulate(dyn, obs, np.full(2, 0.5), 10, rng)
        cfg = EvkfConfig(compute_bounds=True, bounds_mc_samples=32)
        run = EvkfFilter(dyn, obs, cfg, rng, learn=False).run(traj.observations)
        gaps = np.array([d.gap for d in run.diagnostics])
        assert np.all(np.isfinite(gaps))
        assert np.all(gaps >= -1e-6)


class TestLearning:
    """Test the dynamics learning objectives."""

    @pytest.mark.parametrize("objective", list(LearningObjective))
    @pytest.mark.parametrize("family", ["gaussian", "cb"])
    def test_gradient_matches_finite_difference(
        self, objective: LearningObjective, family: str, rng: np.random.Generator
    ) -> None:
        """Test the window gradient with common random numbers."""
        if family == "gaussian":
            dyn = MlpGaussian(Mlp.init(2, 2, rng, hidden=5), 0.1 * np.eye(2), residual=True)
            pairs = [(random_gaussian(rng, 2), random_gaussian(rng, 2)) for _ in range(3)]
        else:
            dyn = MlpCB(Mlp.init(2, 2, rng, hidden=5))
            pairs = [
                (
                    expfam.continuous_bernoulli(rng.uniform(-2, 2, 2)),
                    expfam.continuous_bernoulli(rng.uniform(-2, 2, 2)),
                )
                for _ in range(3)
            ]
        cfg = EvkfConfig(learn_mc_samples=4, learning_objective=objective)
        _, grad = window_loss_and_grad(pairs, dyn, cfg, np.random.default_rng(3))

        def loss(theta: np.ndarray) -> float:
            value, _ = window_loss_and_grad(
                pairs, dyn.with_parameters(theta), cfg, np.random.default_rng(3)
            )
            return value

        fd = finite_difference(loss, dyn.parameters())
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)

    def test_loss_vanishes_at_own_prediction(self, rng: np.random.Generator) -> None:
        """Test the loss is zero when the target is the model's own prediction."""
        dyn, _ = make_lgssm(rng)
        q_prev = random_gaussian(rng, 2)
        cfg = EvkfConfig()
        target = predict_raw(q_prev, dyn, cfg, rng)
        loss, grad = dynamics_loss_and_grad(target, q_prev, dyn, cfg, rng)
        assert loss == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_learner_window(self, rng: np.random.Generator) -> None:
        """Test the learner updates once per full window and stops when frozen."""
        dyn = LinearGaussian(0.5 * np.eye(2), 0.1 * np.eye(2))
        learner = DynamicsLearner(dyn, EvkfConfig(learn_every=3, step_size=0.05))
        q_prev = random_gaussian(rng, 2)
        target = expfam.gaussian([1.0, -1.0], 0.1 * np.eye(2))
        results = [learner.observe(target, q_prev, rng) for _ in range(3)]
        assert results[:2] == [None, None]
        assert results[2] is not None and results[2] > 0.0
        assert learner.updates == 1
        assert not np.allclose(learner.dynamics.parameters(), dyn.parameters())
        learner.freeze()
        assert learner.observe(target, q_prev, rng) is None

    def test_learning_disabled_by_default(self, rng: np.random.Generator) -> None:
        """Test learn_every=None freezes the learner."""
        learner = DynamicsLearner(make_lgssm(rng)[0], EvkfConfig())
        assert learner.frozen

    @pytest.mark.parametrize("seed", range(4))
    def test_learning_reduces_lgssm_error(self, seed: int) -> None:
        """Test KL learning moves a perturbed transition matrix towards the truth."""
        rng = np.random.default_rng(seed)
        dyn, obs = make_lgssm(rng, L=2, N=4)
        traj = simulate(dyn, obs, np.zeros(2), 1500, rng)
        start = LinearGaussian(dyn.A + 0.3, dyn.noise_cov)
        cfg = EvkfConfig(learn_every=10, step_size=0.02, learning_objective="kl")
        flt = EvkfFilter(start, obs, cfg, rng)
        flt.run(traj.observations)
        before = np.linalg.norm(start.A - dyn.A)
        after = np.linalg.norm(flt.dynamics.parameters().reshape(2, 2) - dyn.A)
        assert after < 0.5 * before

    def test_kl_gradient_stationary_at_truth(self, rng: np.random.Generator) -> None:
        """Test the KL window gradient on exact posteriors vanishes only near the true A."""
        dyn, obs = make_lgssm(rng, L=2, N=4)
        traj = simulate(dyn, obs, np.zeros(2), 3000, rng)
        means, covs = kalman_filter_models(dyn, obs, traj.observations)
        posts = [expfam.gaussian(m, P) for m, P in zip(means, covs, strict=True)]
        pairs = list(zip(posts[1:], posts[:-1], strict=True))
        cfg = EvkfConfig(learning_objective="kl")
        _, at_truth = window_loss_and_grad(pairs, dyn, cfg, rng)
        offset = 0.3 * np.ones((2, 2))
        perturbed = LinearGaussian(dyn.A + offset, dyn.noise_cov)
        _, off_truth = window_loss_and_grad(pairs, perturbed, cfg, rng)
        assert np.linalg.norm(at_truth) < 0.2 * np.linalg.norm(off_truth)
        # descent direction points back at the truth
        assert off_truth @ offset.ravel() > 0.0


class TestEvkfFilter:
    """Test the stateful driver."""

    def test_dimension_mismatch(self, rng: np.random.Generator) -> None:
        """Test readouts of another latent dimension are refused."""
        with pytest.raises(FamilyMismatchError):
            EvkfFilter(builtin_vdp(), make_poisson(rng, L=3), EvkfConfig(), rng)

    def test_timer_records_steps(self, rng: np.random.Generator) -> None:
        """Test per-step wall time is recorded when a timer is given."""
        dyn, obs = make_lgssm(rng)
        traj = simulate(dyn, obs, np.zeros(2), 5, rng)
        timer = StepTimer()
        run = EvkfFilter(dyn, obs, EvkfConfig(), rng).run(
            traj.observations, timer=timer, keep_states=True
        )
        assert timer.count == 5
        assert all(d.wall_us >= 0.0 for d in run.diagnostics)
        assert [s.t for s in run.states] == [1, 2, 3, 4, 5]

    def test_cb_means_stay_in_unit_cube(self, rng: np.random.Generator) -> None:
        """Test CB filtering with Poisson counts keeps means in [0, 1]."""
        dyn = make_learner_dynamics(FamilyTag.continuous_bernoulli(2), rng)
        obs = make_poisson(rng, L=2, N=6, dt=1.0)
        traj = simulate(dyn, obs, np.full(2, 0.5), 15, rng)
        run = EvkfFilter(dyn, obs, EvkfConfig(), rng, learn=False).run(traj.observations)
        assert np.all((run.means >= 0.0) & (run.means <= 1.0))

    def test_step_function(self, rng: np.random.Generator) -> None:
        """Test the free step function advances time and records diagnostics."""
        dyn, obs = make_lgssm(rng)
        state = filtering.initial_state(dyn.family)
        new = filtering.step(state, np.zeros(3), dyn, obs, EvkfConfig(), rng)
        assert new.t == 1
        assert new.diagnostics is not None
        assert new.diagnostics.cvi_iters >= 1
        assert np.isnan(new.diagnostics.learn_loss)
