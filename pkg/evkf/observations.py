"""Observation models with closed-form expected log-likelihoods.

Gradients are returned with respect to the mean parameters mu of q, which is what
the CVI update consumes. For dense Gaussian q the chain rule through (m, P) gives
d/dmu_1 = f_m - 2 f_P m and d/dmu_2 = f_P; diagonal q keeps only diag(f_P).
Factorized non-Gaussian families get the gradient w.r.t. lambda first and convert
it with the per-coordinate Fisher blocks.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np
from scipy import special

from . import expfam
from .const import FamilyKind
from .exceptions import DomainError, FamilyMismatchError, NumericError, ShapeError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from .expfam import FamilyTag, NaturalParams

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
_MAX_LOG_RATE = 700.0


def _gaussian_mu_gradient(
    tag: FamilyTag, m: FloatArray, f_m: FloatArray, f_P: FloatArray
) -> FloatArray:
    """Map gradients w.r.t. (m, P) onto the mean-parameter layout of a Gaussian tag."""
    if tag.kind is FamilyKind.GAUSSIAN_DIAG:
        # diagonal mu_2 only carries m_i^2, so cross terms of f_P drop out
        f_var = np.diag(f_P)
        return np.concatenate([f_m - 2.0 * f_var * m, f_var])
    return np.concatenate([f_m - 2.0 * f_P @ m, (0.5 * (f_P + f_P.T)).reshape(-1)])


class ObservationModel(ABC):
    """Fixed readout y_t | z_t through a loading matrix C and offset b."""

    kind: ClassVar[str]

    def __init__(self, C: ArrayLike, b: ArrayLike | None = None) -> None:
        """Validate the loading matrix and offsets."""
        self.C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        if not np.all(np.isfinite(self.C)):
            raise DomainError("Loading matrix C must be finite")
        n_obs = self.C.shape[0]
        self.b = np.zeros(n_obs) if b is None else np.asarray(b, dtype=np.float64).reshape(-1)
        if self.b.shape != (n_obs,):
            raise ShapeError(f"Offset b must have length {n_obs}, got {self.b.shape}")

    @property
    def obs_dim(self) -> int:
        """N."""
        return int(self.C.shape[0])

    @property
    def latent_dim(self) -> int:
        """L."""
        return int(self.C.shape[1])

    def _check(self, q: NaturalParams, y: ArrayLike) -> FloatArray:
        if q.tag.dim != self.latent_dim:
            raise FamilyMismatchError(
                f"Posterior has L={q.tag.dim}, readout expects {self.latent_dim}"
            )
        obs = np.asarray(y, dtype=np.float64).reshape(-1)
        if obs.shape != (self.obs_dim,):
            raise ShapeError(f"Observation must have length {self.obs_dim}, got {obs.shape}")
        return obs

    def is_conjugate_to(self, tag: FamilyTag) -> bool:  # noqa: ARG002
        """Whether one CVI step with unit step size is the exact posterior."""
        return False

    @abstractmethod
    def expected_loglik(self, q: NaturalParams, y: ArrayLike) -> float:
        """E_q[log p(y | z)]."""

    @abstractmethod
    def grad_mean_params(self, q: NaturalParams, y: ArrayLike) -> FloatArray:
        """Gradient of ``expected_loglik`` w.r.t. the mean parameters of q."""

    @abstractmethod
    def mean_response(self, z: FloatArray) -> FloatArray:
        """E[y | z] for each row of an (n, L) array."""

    @abstractmethod
    def response_variance(self, z: FloatArray) -> FloatArray:
        """Var[y_n | z] for each row, shape (n, N)."""

    @abstractmethod
    def log_likelihood(self, z: FloatArray, y: ArrayLike) -> FloatArray:
        """log p(y | z_i) for each row."""

    @abstractmethod
    def sample_batch(self, z: FloatArray, rng: np.random.Generator) -> FloatArray:
        """One observation per row of z."""

    def sample_obs(self, z: ArrayLike, rng: np.random.Generator) -> FloatArray:
        """One draw of y | z."""
        arr = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if arr.shape[1] != self.latent_dim:
            raise ShapeError(f"States must have {self.latent_dim} columns, got {arr.shape[1]}")
        out = self.sample_batch(arr, rng)
        return out[0] if np.ndim(z) == 1 else out

    @abstractmethod
    def to_dict(self) -> dict[str, Any]:
        """JSON-ready description."""


class PoissonExp(ObservationModel):
    """y_n ~ Poisson(dt exp(C_n z + b_n)).

    The expected log-likelihood drops the data-only term -log y_n!.
    """

    kind = "poisson"

    def __init__(self, C: ArrayLike, b: ArrayLike | None = None, dt: float = 1.0) -> None:
        """Readout with bin width ``dt``."""
        super().__init__(C, b)
        if dt <= 0.0:
            raise DomainError(f"Bin width must be positive, got {dt}")
        self.dt = float(dt)
        self._log_dt = math.log(self.dt)

    def _log_rates(self, z: FloatArray) -> FloatArray:
        return np.asarray(z @ self.C.T + self.b + self._log_dt)

    def _mgf_terms(self, q: NaturalParams) -> tuple[FloatArray, FloatArray | None]:
        """log E_q[exp(C_n z)] per neuron and, for factorized q, its lambda-gradients."""
        fam = q.family
        if q.tag.is_gaussian:
            m, P = fam.moments(q.lam)
            return np.asarray(self.C @ m + 0.5 * np.einsum("nl,lk,nk->n", self.C, P, self.C)), None
        if q.tag.kind is FamilyKind.GAMMA:
            alpha, beta = expfam.gamma_shape_rate(q)
            ratio = self.C / beta
            bad = np.argwhere(ratio >= 1.0)
            if bad.size:
                n, l = (int(i) for i in bad[0])
                raise DomainError(
                    f"Gamma MGF undefined: rate {beta[l]:.4g} <= C[{n}, {l}] = {self.C[n, l]:.4g}"
                )
            log_mgf = np.sum(-alpha * np.log1p(-ratio), axis=1)
            # d/d(alpha - 1) and d/d(-beta) of sum_l -alpha_l log(1 - C_nl / beta_l)
            d_shape = -np.log1p(-ratio)
            d_rate = alpha / (beta - self.C) - alpha / beta
            grads = np.concatenate([d_shape, d_rate], axis=1)
            return log_mgf, grads
        if q.tag.kind is FamilyKind.CONTINUOUS_BERNOULLI:
            eta = q.lam
            shifted = expfam.cb_log_partition(eta + self.C)
            log_mgf = np.sum(shifted - expfam.cb_log_partition(eta), axis=1)
            grads = expfam.cb_mean(eta + self.C) - expfam.cb_mean(eta)
            return log_mgf, np.asarray(grads)
        raise FamilyMismatchError(f"No Poisson closed form for {q.tag.kind}")

    def _expected_rates(self, q: NaturalParams) -> tuple[FloatArray, FloatArray | None]:
        log_mgf, grads = self._mgf_terms(q)
        log_rate = log_mgf + self.b + self._log_dt
        if np.any(log_rate > _MAX_LOG_RATE):
            raise NumericError("Expected Poisson rate overflows")
        return np.exp(log_rate), grads

    def expected_loglik(self, q: NaturalParams, y: ArrayLike) -> float:
        obs = self._check(q, y)
        m, _ = q.family.moments(q.lam)
        rates, _ = self._expected_rates(q)
        return float(obs @ (self.C @ m + self.b + self._log_dt) - np.sum(rates))

    def grad_mean_params(self, q: NaturalParams, y: ArrayLike) -> FloatArray:
        obs = self._check(q, y)
        fam = q.family
        rates, mgf_grads = self._expected_rates(q)
        if q.tag.is_gaussian:
            m, _ = fam.moments(q.lam)
            f_m = self.C.T @ (obs - rates)
            f_P = -0.5 * (self.C.T * rates) @ self.C
            return _gaussian_mu_gradient(q.tag, m, f_m, f_P)
        assert isinstance(fam, expfam.FactorizedFamily)
        assert mgf_grads is not None
        dm, _ = fam.mean_var_grad(q.lam)
        # y^T C E[z]: per coordinate l the weight (C^T y)_l times dE[z_l]/dlambda_l
        grad_lam = fam.unblock((self.C.T @ obs)[:, None] * dm)
        grad_lam = grad_lam - rates @ mgf_grads
        return fam.natural_gradient_to_mean(q.lam, grad_lam)

    def mean_response(self, z: FloatArray) -> FloatArray:
        log_rate = self._log_rates(z)
        if np.any(log_rate > _MAX_LOG_RATE):
            raise NumericError("Poisson rate overflows")
        return np.exp(log_rate)

    def response_variance(self, z: FloatArray) -> FloatArray:
        return self.mean_response(z)

    def log_likelihood(self, z: FloatArray, y: ArrayLike) -> FloatArray:
        obs = np.asarray(y, dtype=np.float64).reshape(-1)
        log_rate = self._log_rates(z)
        with np.errstate(over="ignore"):
            rate = np.exp(log_rate)
        return np.asarray(log_rate @ obs - rate.sum(axis=1) - special.gammaln(obs + 1.0).sum())

    def sample_batch(self, z: FloatArray, rng: np.random.Generator) -> FloatArray:
        return np.asarray(rng.poisson(self.mean_response(z)), dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "C": self.C.tolist(), "b": self.b.tolist(), "dt": self.dt}


class LinearGaussianObs(ObservationModel):
    """y = C z + b + noise with independent variances r_n^2."""

    kind = "gaussian"

    def __init__(
        self, C: ArrayLike, b: ArrayLike | None = None, variances: ArrayLike = 1.0
    ) -> None:
        """Readout with per-channel noise variances."""
        super().__init__(C, b)
        r2 = np.broadcast_to(np.asarray(variances, dtype=np.float64), (self.obs_dim,)).copy()
        if np.any(r2 <= 0.0) or not np.all(np.isfinite(r2)):
            raise DomainError("Observation noise variances must be positive and finite")
        self.variances = r2
        self._prec = 1.0 / r2
        self._log_norm = -0.5 * float(np.sum(np.log(r2) + _LOG_2PI))

    def is_conjugate_to(self, tag: FamilyTag) -> bool:
        if tag.kind is FamilyKind.GAUSSIAN_DENSE:
            return True
        if tag.kind is FamilyKind.GAUSSIAN_DIAG:
            # exact only when the readout precision does not couple coordinates
            info = (self.C.T * self._prec) @ self.C
            return bool(np.allclose(info, np.diag(np.diag(info))))
        return False

    def expected_loglik(self, q: NaturalParams, y: ArrayLike) -> float:
        obs = self._check(q, y)
        m, P = q.family.moments(q.lam)
        resid = obs - self.b - self.C @ m
        spread = np.einsum("nl,lk,nk->n", self.C, P, self.C)
        return self._log_norm - 0.5 * float(np.sum((resid**2 + spread) * self._prec))

    def grad_mean_params(self, q: NaturalParams, y: ArrayLike) -> FloatArray:
        obs = self._check(q, y)
        fam = q.family
        m, _ = fam.moments(q.lam)
        resid = obs - self.b - self.C @ m
        f_m = self.C.T @ (self._prec * resid)
        if q.tag.is_gaussian:
            f_P = -0.5 * (self.C.T * self._prec) @ self.C
            return _gaussian_mu_gradient(q.tag, m, f_m, f_P)
        assert isinstance(fam, expfam.FactorizedFamily)
        f_var = -0.5 * (self.C**2).T @ self._prec
        dm, dvar = fam.mean_var_grad(q.lam)
        grad_lam = fam.unblock(f_m[:, None] * dm + f_var[:, None] * dvar)
        return fam.natural_gradient_to_mean(q.lam, grad_lam)

    def mean_response(self, z: FloatArray) -> FloatArray:
        return np.asarray(z @ self.C.T + self.b)

    def response_variance(self, z: FloatArray) -> FloatArray:
        return np.broadcast_to(self.variances, (z.shape[0], self.obs_dim)).copy()

    def log_likelihood(self, z: FloatArray, y: ArrayLike) -> FloatArray:
        obs = np.asarray(y, dtype=np.float64).reshape(-1)
        resid = obs - self.mean_response(z)
        return np.asarray(self._log_norm - 0.5 * (resid**2) @ self._prec)

    def sample_batch(self, z: FloatArray, rng: np.random.Generator) -> FloatArray:
        mean = self.mean_response(z)
        return np.asarray(mean + rng.standard_normal(mean.shape) * np.sqrt(self.variances))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "C": self.C.tolist(),
            "b": self.b.tolist(),
            "variances": self.variances.tolist(),
        }


def observation_from_dict(data: dict[str, Any]) -> ObservationModel:
    """Rebuild an observation model from ``to_dict`` output."""
    kind = data.get("kind")
    if kind == PoissonExp.kind:
        return PoissonExp(data["C"], data.get("b"), data.get("dt", 1.0))
    if kind == LinearGaussianObs.kind:
        return LinearGaussianObs(data["C"], data.get("b"), data["variances"])
    raise ValueError(f"Unknown observation kind '{kind}'")


def expected_loglik(obs: ObservationModel, q: NaturalParams, y: ArrayLike) -> float:
    """E_q[log p(y | z)] in closed form."""
    return obs.expected_loglik(q, y)


def grad_expected_loglik_mean_params(
    obs: ObservationModel, q: NaturalParams, y: ArrayLike
) -> FloatArray:
    """Gradient of the expected log-likelihood w.r.t. the mean parameters of q."""
    return obs.grad_mean_params(q, y)


def sample_obs(obs: ObservationModel, z: ArrayLike, rng: np.random.Generator) -> FloatArray:
    """One draw of y | z."""
    return obs.sample_obs(z, rng)
