"""Conditional exponential-family dynamics p(z_t | z_{t-1}).

Every model exposes the natural-parameter map lambda(z) on batches, samples from
the conditional, the Jacobian of the conditional mean (for variance correction)
and, when trainable, a vector-Jacobian product of lambda(z) w.r.t. its flat
parameters.
"""

from __future__ import annotations

import copy
import logging
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np

from . import expfam
from .approximators import Activation, Mlp
from .const import (
    DEFAULT_GAMMA_B0,
    DEFAULT_HIDDEN_UNITS,
    GAMMA_HIDDEN_UNITS,
    SUPPORT_EPS,
    VDP_DT,
    VDP_GAMMA,
    VDP_SIGMA,
    VDP_TAU,
    FamilyKind,
)
from .exceptions import DomainError, FamilyMismatchError, ShapeError
from .expfam import FamilyTag, NaturalParams

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)

# Gamma conditional means are floored here so shape and rate stay in the domain.
_GAMMA_MEAN_FLOOR = 1e-3


class DynamicsModel(ABC):
    """Base class for conditional dynamics; instances are treated as values."""

    kind: ClassVar[str]
    # lambda(z) affine in z, so E_q[lambda(z)] = lambda(E_q[z]).
    affine: ClassVar[bool] = False

    family: FamilyTag

    @property
    def dim(self) -> int:
        """Latent dimension L."""
        return self.family.dim

    def clamp_support(self, z: FloatArray) -> FloatArray:
        """Map inputs onto the region where the network is evaluated."""
        return z

    def _inputs(self, z: ArrayLike) -> tuple[FloatArray, bool]:
        arr = np.asarray(z, dtype=np.float64)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if arr.shape[1] != self.dim:
            raise ShapeError(f"Dynamics expects {self.dim}-dimensional states, got {arr.shape[1]}")
        return arr, single

    @abstractmethod
    def natural_map_batch(self, z: FloatArray) -> FloatArray:
        """lambda(z) for each row of an (n, L) array, shape (n, D)."""

    def natural_map(self, z: ArrayLike) -> NaturalParams:
        """Natural parameters of p(. | z) for a single state."""
        arr, _ = self._inputs(z)
        return NaturalParams(self.family, self.natural_map_batch(arr)[0])

    @abstractmethod
    def conditional_sample_batch(self, z: FloatArray, rng: np.random.Generator) -> FloatArray:
        """One draw from p(. | z_i) for each row."""

    def conditional_sample(self, z: ArrayLike, rng: np.random.Generator) -> FloatArray:
        """One draw from p(. | z); a batch of states gives a batch of draws."""
        arr, single = self._inputs(z)
        out = self.conditional_sample_batch(arr, rng)
        return out[0] if single else out

    @abstractmethod
    def mean_jacobian(self, z: ArrayLike) -> FloatArray:
        """d E[z_t | z_{t-1}] / d z_{t-1} at a single state, shape (L, L)."""

    @property
    def n_params(self) -> int:
        """Number of trainable scalars."""
        return int(self.parameters().shape[0])

    @property
    def trainable(self) -> bool:
        """Whether the model has parameters to learn."""
        return self.n_params > 0

    def parameters(self) -> FloatArray:
        """Trainable parameters as one flat vector."""
        return np.zeros(0)

    def with_parameters(self, flat: ArrayLike) -> DynamicsModel:
        """A copy holding the given trainable parameters."""
        if np.asarray(flat).size:
            raise ShapeError(f"{type(self).__name__} has no trainable parameters")
        return self

    def natural_map_vjp(self, z: FloatArray, upstream: FloatArray) -> FloatArray:
        """Sum over rows of upstream_i^T d lambda(z_i) / d theta."""
        if not self.trainable:
            return np.zeros(0)
        raise NotImplementedError

    @abstractmethod
    def to_dict(self) -> dict[str, Any]:
        """JSON-ready checkpoint with a kind tag."""

    @classmethod
    @abstractmethod
    def from_dict(cls, data: dict[str, Any]) -> DynamicsModel:
        """Rebuild from ``to_dict`` output."""


def _check_noise(noise_cov: ArrayLike, dim: int) -> FloatArray:
    Q = np.array(noise_cov, dtype=np.float64)
    if Q.ndim == 0:
        Q = Q * np.eye(dim)
    elif Q.ndim == 1:
        Q = np.diag(Q)
    if Q.shape != (dim, dim):
        raise ShapeError(f"State noise must be {dim}x{dim}, got {Q.shape}")
    if not np.allclose(Q, Q.T) or not np.all(np.isfinite(Q)):
        raise DomainError("State noise covariance must be finite and symmetric")
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise DomainError("State noise covariance must be positive definite") from None
    return 0.5 * (Q + Q.T)


class GaussianDynamics(DynamicsModel):
    """N(z_t | m(z_{t-1}), Q); lambda(z) = (Q^-1 m(z), -1/2 Q^-1)."""

    def __init__(
        self, noise_cov: ArrayLike, dim: int, diagonal: bool = False, learn_noise: bool = False
    ) -> None:
        """Validate Q and fix the family tag."""
        Q = _check_noise(noise_cov, dim)
        off_diag = Q - np.diag(np.diag(Q))
        if (diagonal or learn_noise) and np.any(off_diag != 0.0):
            raise DomainError("Diagonal families and learned noise need a diagonal Q")
        self.family = FamilyTag.gaussian(dim, diagonal)
        self.learn_noise = learn_noise
        self._set_noise(Q)

    def _set_noise(self, Q: FloatArray) -> None:
        self.noise_cov = Q
        self.noise_chol = np.linalg.cholesky(Q)
        inv = np.linalg.inv(Q)
        self.noise_prec = 0.5 * (inv + inv.T)

    @abstractmethod
    def mean_map_batch(self, z: FloatArray) -> FloatArray:
        """Conditional mean for each row."""

    def _mean_parameters(self) -> FloatArray:
        return np.zeros(0)

    def _with_mean_parameters(self, flat: FloatArray) -> GaussianDynamics:  # noqa: ARG002
        return self

    def _mean_vjp(self, z: FloatArray, g_mean: FloatArray) -> FloatArray:  # noqa: ARG002
        return np.zeros(0)

    def natural_map_batch(self, z: FloatArray) -> FloatArray:
        m = self.mean_map_batch(z)
        eta1 = m @ self.noise_prec
        if self.family.kind is FamilyKind.GAUSSIAN_DIAG:
            block = -0.5 * np.diag(self.noise_prec)
        else:
            block = (-0.5 * self.noise_prec).reshape(-1)
        return np.concatenate([eta1, np.broadcast_to(block, (z.shape[0], block.size))], axis=1)

    def conditional_sample_batch(self, z: FloatArray, rng: np.random.Generator) -> FloatArray:
        m = self.mean_map_batch(z)
        return np.asarray(m + rng.standard_normal(m.shape) @ self.noise_chol.T)

    def parameters(self) -> FloatArray:
        parts = [self._mean_parameters()]
        if self.learn_noise:
            parts.append(np.log(np.diag(self.noise_cov)))
        return np.concatenate(parts)

    def with_parameters(self, flat: ArrayLike) -> GaussianDynamics:
        vec = np.asarray(flat, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"Expected {self.n_params} parameters, got {vec.shape}")
        n_mean = self._mean_parameters().shape[0]
        out = self._with_mean_parameters(vec[:n_mean])
        if self.learn_noise:
            out = copy.copy(out)
            out._set_noise(np.diag(np.exp(vec[n_mean:])))
        return out

    def natural_map_vjp(self, z: FloatArray, upstream: FloatArray) -> FloatArray:
        L = self.dim
        g1 = upstream[:, :L]
        grads = [self._mean_vjp(z, g1 @ self.noise_prec)]
        if self.learn_noise:
            prec = np.diag(self.noise_prec)
            m = self.mean_map_batch(z)
            if self.family.kind is FamilyKind.GAUSSIAN_DIAG:
                g2 = upstream[:, L:]
            else:
                g2 = np.diagonal(upstream[:, L:].reshape(-1, L, L), axis1=1, axis2=2)
            # d/ds of e^-s m and -1/2 e^-s, with s = log diag Q
            grads.append(np.sum(-g1 * m * prec + 0.5 * g2 * prec, axis=0))
        return np.concatenate(grads)

    def _noise_dict(self) -> dict[str, Any]:
        return {
            "noise_cov": self.noise_cov.tolist(),
            "diagonal": self.family.kind is FamilyKind.GAUSSIAN_DIAG,
            "learn_noise": self.learn_noise,
        }


class LinearGaussian(GaussianDynamics):
    """m(z) = A z."""

    kind = "linear_gaussian"
    affine = True

    def __init__(
        self,
        A: ArrayLike,
        noise_cov: ArrayLike,
        diagonal: bool = False,
        learn_noise: bool = False,
        trainable: bool = True,
    ) -> None:
        """Build from the transition matrix and the state noise."""
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if self.A.shape[0] != self.A.shape[1]:
            raise ShapeError(f"Transition matrix must be square, got {self.A.shape}")
        self.train_mean = trainable
        super().__init__(noise_cov, self.A.shape[0], diagonal, learn_noise)

    def mean_map_batch(self, z: FloatArray) -> FloatArray:
        return np.asarray(z @ self.A.T)

    def mean_jacobian(self, z: ArrayLike) -> FloatArray:  # noqa: ARG002
        return self.A.copy()

    def _mean_parameters(self) -> FloatArray:
        return self.A.ravel().copy() if self.train_mean else np.zeros(0)

    def _with_mean_parameters(self, flat: FloatArray) -> LinearGaussian:
        out = copy.copy(self)
        if self.train_mean:
            out.A = flat.reshape(self.A.shape).copy()
        return out

    def _mean_vjp(self, z: FloatArray, g_mean: FloatArray) -> FloatArray:
        if not self.train_mean:
            return np.zeros(0)
        return np.asarray((g_mean.T @ z).ravel())

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "A": self.A.tolist(),
            "trainable": self.train_mean,
            **self._noise_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LinearGaussian:
        return cls(
            data["A"],
            data["noise_cov"],
            diagonal=data.get("diagonal", False),
            learn_noise=data.get("learn_noise", False),
            trainable=data.get("trainable", True),
        )


class MlpGaussian(GaussianDynamics):
    """m(z) = net(z), or z + net(z) when ``residual``."""

    kind = "mlp_gaussian"

    def __init__(
        self,
        net: Mlp,
        noise_cov: ArrayLike,
        residual: bool = False,
        diagonal: bool = False,
        learn_noise: bool = False,
    ) -> None:
        """Build from a mean network L -> L and the state noise."""
        if net.in_dim != net.out_dim:
            raise ShapeError(f"Mean network must map L -> L, got {net.in_dim} -> {net.out_dim}")
        self.net = net
        self.residual = residual
        super().__init__(noise_cov, net.in_dim, diagonal, learn_noise)

    def mean_map_batch(self, z: FloatArray) -> FloatArray:
        out = self.net.forward(z)
        return np.asarray(z + out) if self.residual else out

    def mean_jacobian(self, z: ArrayLike) -> FloatArray:
        jac = self.net.input_jacobian(z)
        return jac + np.eye(self.dim) if self.residual else jac

    def _mean_parameters(self) -> FloatArray:
        return self.net.parameters()

    def _with_mean_parameters(self, flat: FloatArray) -> MlpGaussian:
        out = copy.copy(self)
        out.net = self.net.with_parameters(flat)
        return out

    def _mean_vjp(self, z: FloatArray, g_mean: FloatArray) -> FloatArray:
        return self.net.backward(z, g_mean).params

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "net": self.net.to_dict(),
            "residual": self.residual,
            **self._noise_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MlpGaussian:
        return cls(
            Mlp.from_dict(data["net"]),
            data["noise_cov"],
            residual=data.get("residual", False),
            diagonal=data.get("diagonal", False),
            learn_noise=data.get("learn_noise", False),
        )


class CrnnDynamics(GaussianDynamics):
    """Chaotic RNN: m(z) = z + (dt / tau)(gamma W tanh(z) - z)."""

    kind = "crnn"

    def __init__(
        self, W: ArrayLike, gamma: float, dt: float, tau: float, noise_cov: ArrayLike
    ) -> None:
        """Fixed drift; nothing is trainable."""
        self.W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        if self.W.shape[0] != self.W.shape[1]:
            raise ShapeError(f"Recurrent weights must be square, got {self.W.shape}")
        if dt <= 0.0 or tau <= 0.0:
            raise DomainError("CRNN needs dt > 0 and tau > 0")
        self.gamma = float(gamma)
        self.dt = float(dt)
        self.tau = float(tau)
        super().__init__(noise_cov, self.W.shape[0])

    def mean_map_batch(self, z: FloatArray) -> FloatArray:
        rate = self.dt / self.tau
        return np.asarray(z + rate * (self.gamma * np.tanh(z) @ self.W.T - z))

    def mean_jacobian(self, z: ArrayLike) -> FloatArray:
        arr, _ = self._inputs(z)
        rate = self.dt / self.tau
        sech2 = 1.0 - np.tanh(arr[0]) ** 2
        return np.eye(self.dim) + rate * (self.gamma * self.W * sech2 - np.eye(self.dim))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "W": self.W.tolist(),
            "gamma": self.gamma,
            "dt": self.dt,
            "tau": self.tau,
            "noise_cov": self.noise_cov.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CrnnDynamics:
        return cls(data["W"], data["gamma"], data["dt"], data["tau"], data["noise_cov"])


class VanDerPolDynamics(GaussianDynamics):
    """Euler-discretized noisy Van der Pol oscillator in two dimensions."""

    kind = "vdp"

    def __init__(self, tau1: float, tau2: float, gamma: float, dt: float, sigma: float) -> None:
        """Fixed drift with Q = sigma^2 I."""
        if min(tau1, tau2, dt) <= 0.0:
            raise DomainError("Van der Pol needs positive time constants and step")
        if sigma <= 0.0:
            raise DomainError(f"Van der Pol noise sigma must be positive, got {sigma}")
        self.tau1 = float(tau1)
        self.tau2 = float(tau2)
        self.gamma = float(gamma)
        self.dt = float(dt)
        self.sigma = float(sigma)
        super().__init__(self.sigma**2 * np.eye(2), 2)

    def mean_map_batch(self, z: FloatArray) -> FloatArray:
        z1, z2 = z[:, 0], z[:, 1]
        n1 = z1 + self.dt / self.tau1 * z2
        n2 = z2 + self.dt / self.tau2 * (self.gamma * (1.0 - z1**2) * z2 - z1)
        return np.stack([n1, n2], axis=1)

    def mean_jacobian(self, z: ArrayLike) -> FloatArray:
        arr, _ = self._inputs(z)
        z1, z2 = arr[0]
        r1 = self.dt / self.tau1
        r2 = self.dt / self.tau2
        return np.array(
            [
                [1.0, r1],
                [r2 * (-2.0 * self.gamma * z1 * z2 - 1.0), 1.0 + r2 * self.gamma * (1.0 - z1**2)],
            ]
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "tau1": self.tau1,
            "tau2": self.tau2,
            "gamma": self.gamma,
            "dt": self.dt,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> VanDerPolDynamics:
        return cls(data["tau1"], data["tau2"], data["gamma"], data["dt"], data["sigma"])


class MlpCB(DynamicsModel):
    """Factorized continuous Bernoulli with eta = net(z) on [0, 1]^L."""

    kind = "mlp_cb"

    def __init__(self, net: Mlp) -> None:
        """The network's output is the natural parameter directly."""
        if net.in_dim != net.out_dim:
            raise ShapeError(f"CB network must map L -> L, got {net.in_dim} -> {net.out_dim}")
        self.net = net
        self.family = FamilyTag.continuous_bernoulli(net.in_dim)

    def clamp_support(self, z: FloatArray) -> FloatArray:
        return np.clip(z, SUPPORT_EPS, 1.0 - SUPPORT_EPS)

    def natural_map_batch(self, z: FloatArray) -> FloatArray:
        return self.net.forward(self.clamp_support(z))

    def conditional_sample_batch(self, z: FloatArray, rng: np.random.Generator) -> FloatArray:
        eta = self.natural_map_batch(z)
        return expfam.cb_inverse_cdf(eta, rng.random(eta.shape))

    def mean_jacobian(self, z: ArrayLike) -> FloatArray:
        arr, _ = self._inputs(z)
        x = self.clamp_support(arr)[0]
        eta = self.net.forward(x)
        return expfam.cb_variance(eta)[:, None] * self.net.input_jacobian(x)

    def parameters(self) -> FloatArray:
        return self.net.parameters()

    def with_parameters(self, flat: ArrayLike) -> MlpCB:
        return MlpCB(self.net.with_parameters(flat))

    def natural_map_vjp(self, z: FloatArray, upstream: FloatArray) -> FloatArray:
        return self.net.backward(self.clamp_support(z), upstream).params

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MlpCB:
        return cls(Mlp.from_dict(data["net"]))


class MlpGamma(DynamicsModel):
    """z_t ~ Gamma(b0 f(z)^2, b0 f(z)), so E[z_t] = f(z) and Var[z_t] = 1 / b0."""

    kind = "mlp_gamma"

    def __init__(self, net: Mlp, b0: float = DEFAULT_GAMMA_B0) -> None:
        """``net`` must end in a softplus so f stays positive."""
        if net.in_dim != net.out_dim:
            raise ShapeError(f"Gamma network must map L -> L, got {net.in_dim} -> {net.out_dim}")
        if net.output_activation is not Activation.SOFTPLUS:
            raise DomainError("Gamma mean network needs a softplus output")
        if b0 <= 0.0:
            raise DomainError(f"Gamma concentration b0 must be positive, got {b0}")
        self.net = net
        self.b0 = float(b0)
        self.family = FamilyTag.gamma(net.in_dim)

    def clamp_support(self, z: FloatArray) -> FloatArray:
        return np.maximum(z, SUPPORT_EPS)

    def mean_map_batch(self, z: FloatArray) -> FloatArray:
        """f(z), floored away from zero."""
        return np.maximum(self.net.forward(self.clamp_support(z)), _GAMMA_MEAN_FLOOR)

    def natural_map_batch(self, z: FloatArray) -> FloatArray:
        f = self.mean_map_batch(z)
        return np.concatenate([self.b0 * f**2 - 1.0, -self.b0 * f], axis=1)

    def conditional_sample_batch(self, z: FloatArray, rng: np.random.Generator) -> FloatArray:
        f = self.mean_map_batch(z)
        # small shapes can underflow to exactly 0.0
        return self.clamp_support(rng.gamma(self.b0 * f**2, 1.0 / (self.b0 * f)))

    def mean_jacobian(self, z: ArrayLike) -> FloatArray:
        arr, _ = self._inputs(z)
        return self.net.input_jacobian(self.clamp_support(arr)[0])

    def parameters(self) -> FloatArray:
        return self.net.parameters()

    def with_parameters(self, flat: ArrayLike) -> MlpGamma:
        return MlpGamma(self.net.with_parameters(flat), self.b0)

    def natural_map_vjp(self, z: FloatArray, upstream: FloatArray) -> FloatArray:
        L = self.dim
        x = self.clamp_support(z)
        f = self.mean_map_batch(z)
        g_f = 2.0 * self.b0 * f * upstream[:, :L] - self.b0 * upstream[:, L:]
        return self.net.backward(x, g_f).params

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "net": self.net.to_dict(), "b0": self.b0}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MlpGamma:
        return cls(Mlp.from_dict(data["net"]), data.get("b0", DEFAULT_GAMMA_B0))


DYNAMICS_BY_KIND: dict[str, type[DynamicsModel]] = {
    cls.kind: cls
    for cls in (LinearGaussian, MlpGaussian, CrnnDynamics, VanDerPolDynamics, MlpCB, MlpGamma)
}


def dynamics_from_dict(data: dict[str, Any]) -> DynamicsModel:
    """Rebuild any dynamics model from its checkpoint."""
    kind = data.get("kind")
    if kind not in DYNAMICS_BY_KIND:
        raise ValueError(f"Unknown dynamics kind '{kind}'")
    return DYNAMICS_BY_KIND[kind].from_dict(data)


def natural_map(model: DynamicsModel, z: ArrayLike) -> NaturalParams:
    """Natural parameters of p(z_t | z_{t-1} = z)."""
    arr = np.asarray(z, dtype=np.float64)
    kind = model.family.kind
    if kind is FamilyKind.GAMMA and np.any(arr <= 0.0):
        raise DomainError(f"State {arr} is outside the Gamma support")
    if kind is FamilyKind.CONTINUOUS_BERNOULLI and np.any((arr < 0.0) | (arr > 1.0)):
        raise DomainError(f"State {arr} is outside [0, 1]^L")
    return model.natural_map(arr)


def conditional_sample(model: DynamicsModel, z: ArrayLike, rng: np.random.Generator) -> FloatArray:
    """One draw from p(z_t | z_{t-1} = z)."""
    return model.conditional_sample(z, rng)


def conditional_kl(model_a: DynamicsModel, model_b: DynamicsModel, z: ArrayLike) -> float:
    """KL(p_a(. | z) || p_b(. | z))."""
    if model_a.family != model_b.family:
        raise FamilyMismatchError(f"Family mismatch: {model_a.family} vs {model_b.family}")
    return expfam.kl(model_a.natural_map(z), model_b.natural_map(z))


def conditional_kl_batch(
    model_a: DynamicsModel, model_b: DynamicsModel, z: FloatArray
) -> FloatArray:
    """Row-wise conditional KL over a batch of states."""
    if model_a.family != model_b.family:
        raise FamilyMismatchError(f"Family mismatch: {model_a.family} vs {model_b.family}")
    fam = expfam.family_of(model_a.family)
    lam_a = model_a.natural_map_batch(z)
    lam_b = model_b.natural_map_batch(z)
    mu_a = np.stack([fam.mean(row) for row in lam_a])
    value = (
        np.sum((lam_a - lam_b) * mu_a, axis=1)
        - fam.log_partition_batch(lam_a)
        + fam.log_partition_batch(lam_b)
    )
    return np.maximum(value, 0.0)


def builtin_crnn(
    L: int,
    gamma: float,
    W: ArrayLike,
    dt: float,
    tau: float,
    Q: ArrayLike,
) -> CrnnDynamics:
    """Chaotic RNN dynamics with fixed weights W."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (L, L):
        raise ShapeError(f"W must be {L}x{L}, got {W.shape}")
    return CrnnDynamics(W, gamma, dt, tau, Q)


def random_crnn_weights(L: int, rng: np.random.Generator) -> FloatArray:
    """Recurrent weights W_ij ~ N(0, 1/L)."""
    return np.asarray(rng.standard_normal((L, L)) / np.sqrt(L))


def builtin_vdp(
    tau1: float = VDP_TAU,
    tau2: float = VDP_TAU,
    gamma: float = VDP_GAMMA,
    dt: float = VDP_DT,
    sigma: float = VDP_SIGMA,
) -> VanDerPolDynamics:
    """Noisy Van der Pol oscillator."""
    return VanDerPolDynamics(tau1, tau2, gamma, dt, sigma)


def make_learner_dynamics(
    tag: FamilyTag,
    rng: np.random.Generator,
    noise_cov: ArrayLike | None = None,
    learn_noise: bool = False,
    b0: float = DEFAULT_GAMMA_B0,
    hidden: int | None = None,
) -> DynamicsModel:
    """Randomly initialised trainable model for a filter family."""
    L = tag.dim
    _LOGGER.debug("Initialising learnable %s dynamics (L=%d)", tag.kind, L)
    if tag.is_gaussian:
        net = Mlp.init(L, L, rng, hidden=hidden or DEFAULT_HIDDEN_UNITS)
        Q = np.eye(L) * VDP_SIGMA**2 if noise_cov is None else noise_cov
        return MlpGaussian(
            net,
            Q,
            residual=True,
            diagonal=tag.kind is FamilyKind.GAUSSIAN_DIAG,
            learn_noise=learn_noise,
        )
    if tag.kind is FamilyKind.CONTINUOUS_BERNOULLI:
        return MlpCB(Mlp.init(L, L, rng, hidden=hidden or DEFAULT_HIDDEN_UNITS))
    net = Mlp.init(
        L, L, rng, hidden=hidden or GAMMA_HIDDEN_UNITS, output_activation=Activation.SOFTPLUS
    )
    return MlpGamma(net, b0)
