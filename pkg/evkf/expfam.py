"""Constant-base-measure exponential families.

Natural parameters use the standard pairing with the sufficient statistics:

- Gaussian: t(z) = (z, zz^T), lambda = (P^-1 m, -1/2 P^-1), base measure (2 pi)^(-L/2).
  The dense variant stores the second block as a full L x L matrix (row-major).
- Diagonal Gaussian: t(z) = (z, z^2) per coordinate.
- Continuous Bernoulli: t(z) = z on [0, 1], base measure 1.
- Gamma: t(z) = (log z, z), lambda = (shape - 1, -rate), base measure 1.

Factorized families lay lambda out block-wise, all first entries then all second
entries, so ``lam.reshape(k, L).T`` gives one row per coordinate.
"""

from __future__ import annotations

import functools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg, special

from .const import (
    CB_SERIES_THRESHOLD,
    CB_SKEW_SERIES_THRESHOLD,
    CB_VARIANCE_SERIES_THRESHOLD,
    FACTORIZATION_JITTER,
    GAMMA_DOMAIN_MARGIN,
    NEWTON_MAX_ITERS,
    NEWTON_TOL,
    FamilyKind,
)
from .exceptions import FamilyMismatchError, InvalidParameterError, NumericError, ShapeError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FamilyTag:
    """Family kind plus latent dimension; determines the statistic dimension."""

    kind: FamilyKind
    dim: int

    def __post_init__(self) -> None:
        """Validate the latent dimension."""
        if self.dim < 1:
            raise InvalidParameterError(f"Latent dimension must be >= 1, got {self.dim}")

    @property
    def stat_dim(self) -> int:
        """Length D of the natural-parameter vector."""
        if self.kind is FamilyKind.GAUSSIAN_DENSE:
            return self.dim + self.dim * self.dim
        if self.kind is FamilyKind.CONTINUOUS_BERNOULLI:
            return self.dim
        return 2 * self.dim

    @property
    def is_gaussian(self) -> bool:
        """Whether this is one of the Gaussian families."""
        return self.kind in (FamilyKind.GAUSSIAN_DENSE, FamilyKind.GAUSSIAN_DIAG)

    @classmethod
    def gaussian(cls, dim: int, diagonal: bool = False) -> FamilyTag:
        """Gaussian tag, dense unless ``diagonal``."""
        kind = FamilyKind.GAUSSIAN_DIAG if diagonal else FamilyKind.GAUSSIAN_DENSE
        return cls(kind, dim)

    @classmethod
    def continuous_bernoulli(cls, dim: int) -> FamilyTag:
        """Factorized continuous Bernoulli tag."""
        return cls(FamilyKind.CONTINUOUS_BERNOULLI, dim)

    @classmethod
    def gamma(cls, dim: int) -> FamilyTag:
        """Factorized Gamma tag."""
        return cls(FamilyKind.GAMMA, dim)


def _as_vector(tag: FamilyTag, values: ArrayLike, what: str) -> FloatArray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape[0] != tag.stat_dim:
        raise ShapeError(f"{what} for {tag.kind} (L={tag.dim}) needs length {tag.stat_dim}")
    if tag.kind is FamilyKind.GAUSSIAN_DENSE:
        L = tag.dim
        block = arr[L:].reshape(L, L)
        arr[L:] = (0.5 * (block + block.T)).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NaturalParams:
    """Natural parameters lambda of a tagged family."""

    tag: FamilyTag
    lam: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        """Coerce to a read-only float vector, symmetrizing dense Gaussian blocks."""
        object.__setattr__(self, "lam", _as_vector(self.tag, self.lam, "Natural parameters"))

    @property
    def family(self) -> ExpFamily:
        """The family implementation for this tag."""
        return family_of(self.tag)


@dataclass(frozen=True, eq=False)
class MeanParams:
    """Mean parameters mu = E[t(z)] of a tagged family."""

    tag: FamilyTag
    mu: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        """Coerce to a read-only float vector."""
        object.__setattr__(self, "mu", _as_vector(self.tag, self.mu, "Mean parameters"))


class ExpFamily(ABC):
    """Family implementation working on raw parameter arrays."""

    def __init__(self, tag: FamilyTag) -> None:
        """Bind the implementation to a tag."""
        self.tag = tag
        self.dim = tag.dim

    @property
    @abstractmethod
    def log_base_measure(self) -> float:
        """Constant log h."""

    @abstractmethod
    def validate(self, lam: FloatArray) -> None:
        """Raise InvalidParameterError if lam is outside the natural domain."""

    @abstractmethod
    def log_partition(self, lam: FloatArray) -> float:
        """A(lambda)."""

    @abstractmethod
    def log_partition_batch(self, lams: FloatArray) -> FloatArray:
        """A evaluated on each row of an (n, D) array."""

    @abstractmethod
    def mean(self, lam: FloatArray) -> FloatArray:
        """Gradient of A."""

    @abstractmethod
    def natural(self, mu: FloatArray) -> FloatArray:
        """Inverse of ``mean``."""

    @abstractmethod
    def sample(self, lam: FloatArray, n: int, rng: np.random.Generator) -> FloatArray:
        """Draw an (n, L) sample."""

    @abstractmethod
    def sufficient_stats(self, z: FloatArray) -> FloatArray:
        """t(z) for each row of an (n, L) array."""

    @abstractmethod
    def in_support(self, z: FloatArray) -> NDArray[np.bool_]:
        """Row-wise support membership for an (n, L) array."""

    @abstractmethod
    def moments(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Mean vector and covariance matrix of z."""

    @abstractmethod
    def from_moments(self, mean: FloatArray, cov: FloatArray) -> FloatArray:
        """Moment-matched natural parameters (cov may be a variance vector)."""

    @abstractmethod
    def shift_linear(self, lam: FloatArray, shift: FloatArray) -> FloatArray:
        """Add ``shift`` to the natural coordinates paired with z itself."""

    def log_mgf(self, lam: FloatArray, c: FloatArray) -> float:
        """log E[exp(c^T z)] = A(lambda + c) - A(lambda) on the linear slots."""
        shifted = self.shift_linear(lam, c)
        self.validate(shifted)
        return self.log_partition(shifted) - self.log_partition(lam)


class FactorizedFamily(ExpFamily):
    """Shared machinery for families that factorize over coordinates."""

    block: int = 1
    linear_slot: int = 0

    def blocks(self, arr: FloatArray) -> FloatArray:
        """Reshape a length-D vector to one row per coordinate."""
        return np.asarray(arr, dtype=np.float64).reshape(self.block, self.dim).T

    def unblock(self, blocks: FloatArray) -> FloatArray:
        """Inverse of ``blocks``."""
        return np.ascontiguousarray(np.asarray(blocks).T).reshape(-1)

    def shift_linear(self, lam: FloatArray, shift: FloatArray) -> FloatArray:
        out = self.blocks(lam).copy()
        out[:, self.linear_slot] += shift
        return self.unblock(out)

    @abstractmethod
    def fisher_blocks(self, lam: FloatArray) -> FloatArray:
        """Per-coordinate Hessians of A, shape (L, k, k)."""

    @abstractmethod
    def mean_var_grad(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Per-coordinate gradients of E[z_i] and Var[z_i] w.r.t. lambda, each (L, k)."""

    def natural_gradient_to_mean(self, lam: FloatArray, grad_lam: FloatArray) -> FloatArray:
        """Convert a gradient w.r.t. lambda into one w.r.t. mu (applies F^-1)."""
        fisher = self.fisher_blocks(lam)
        g = self.blocks(grad_lam)
        solved = np.linalg.solve(fisher, g[..., None])[..., 0]
        return self.unblock(solved)


class _GaussianDense(ExpFamily):
    @property
    def log_base_measure(self) -> float:
        return -0.5 * self.dim * _LOG_2PI

    def _split(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        L = self.dim
        block = lam[L:].reshape(L, L)
        return lam[:L], 0.5 * (block + block.T)

    def _cholesky(self, matrix: FloatArray, what: str) -> FloatArray:
        try:
            return np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError:
            pass
        try:
            chol = np.linalg.cholesky(matrix + FACTORIZATION_JITTER * np.eye(self.dim))
        except np.linalg.LinAlgError:
            raise InvalidParameterError(f"{what} is not positive definite") from None
        _LOGGER.warning("%s needed jitter %.1e for factorization", what, FACTORIZATION_JITTER)
        return chol

    def _precision(self, lam: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        h, Lam = self._split(lam)
        J = -2.0 * Lam
        if not np.all(np.isfinite(J)) or not np.all(np.isfinite(h)):
            raise InvalidParameterError("Gaussian natural parameters are not finite")
        return h, J, self._cholesky(J, "Gaussian precision block")

    def validate(self, lam: FloatArray) -> None:
        self._precision(lam)

    def log_partition(self, lam: FloatArray) -> float:
        h, _, chol = self._precision(lam)
        w = linalg.solve_triangular(chol, h, lower=True)
        return float(0.5 * w @ w - np.sum(np.log(np.diag(chol))))

    def log_partition_batch(self, lams: FloatArray) -> FloatArray:
        L = self.dim
        h = lams[:, :L]
        blocks = lams[:, L:].reshape(-1, L, L)
        J = -(blocks + np.transpose(blocks, (0, 2, 1)))
        try:
            chol = np.linalg.cholesky(J)
        except np.linalg.LinAlgError:
            return np.array([self.log_partition(row) for row in lams])
        m = np.linalg.solve(J, h[..., None])[..., 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        return np.asarray(0.5 * np.sum(h * m, axis=1) - 0.5 * logdet, dtype=np.float64)

    def moments(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        h, _, chol = self._precision(lam)
        P = linalg.cho_solve((chol, True), np.eye(self.dim))
        P = 0.5 * (P + P.T)
        return P @ h, P

    def mean(self, lam: FloatArray) -> FloatArray:
        m, P = self.moments(lam)
        return np.concatenate([m, (P + np.outer(m, m)).reshape(-1)])

    def natural(self, mu: FloatArray) -> FloatArray:
        L = self.dim
        m = mu[:L]
        S = mu[L:].reshape(L, L)
        P = 0.5 * (S + S.T) - np.outer(m, m)
        return self.from_moments(m, P)

    def from_moments(self, mean: FloatArray, cov: FloatArray) -> FloatArray:
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 1:
            cov = np.diag(cov)
        cov = 0.5 * (cov + cov.T)
        chol = self._cholesky(cov, "Gaussian covariance")
        J = linalg.cho_solve((chol, True), np.eye(self.dim))
        J = 0.5 * (J + J.T)
        return np.concatenate([J @ mean, (-0.5 * J).reshape(-1)])

    def sample(self, lam: FloatArray, n: int, rng: np.random.Generator) -> FloatArray:
        m, P = self.moments(lam)
        chol = self._cholesky(P, "Gaussian covariance")
        eps = rng.standard_normal((n, self.dim))
        return np.asarray(m + eps @ chol.T, dtype=np.float64)

    def sufficient_stats(self, z: FloatArray) -> FloatArray:
        outer = np.einsum("ni,nj->nij", z, z).reshape(z.shape[0], -1)
        return np.concatenate([z, outer], axis=1)

    def in_support(self, z: FloatArray) -> NDArray[np.bool_]:
        return np.all(np.isfinite(z), axis=1)

    def shift_linear(self, lam: FloatArray, shift: FloatArray) -> FloatArray:
        out = np.array(lam, dtype=np.float64)
        out[: self.dim] += shift
        return out

    def log_mgf(self, lam: FloatArray, c: FloatArray) -> float:
        m, P = self.moments(lam)
        return float(c @ m + 0.5 * c @ P @ c)


class _GaussianDiag(FactorizedFamily):
    block = 2
    linear_slot = 0

    @property
    def log_base_measure(self) -> float:
        return -0.5 * self.dim * _LOG_2PI

    def validate(self, lam: FloatArray) -> None:
        b = self.blocks(lam)
        if not np.all(np.isfinite(b)) or np.any(b[:, 1] >= 0.0):
            raise InvalidParameterError("Diagonal Gaussian needs finite params and lambda_2 < 0")

    def _moments_blocks(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        self.validate(lam)
        b = self.blocks(lam)
        var = -0.5 / b[:, 1]
        return b[:, 0] * var, var

    def log_partition(self, lam: FloatArray) -> float:
        self.validate(lam)
        b = self.blocks(lam)
        return float(np.sum(-(b[:, 0] ** 2) / (4.0 * b[:, 1]) - 0.5 * np.log(-2.0 * b[:, 1])))

    def log_partition_batch(self, lams: FloatArray) -> FloatArray:
        L = self.dim
        h, l2 = lams[:, :L], lams[:, L:]
        return np.asarray(np.sum(-(h**2) / (4.0 * l2) - 0.5 * np.log(-2.0 * l2), axis=1))

    def moments(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        m, var = self._moments_blocks(lam)
        return m, np.diag(var)

    def mean(self, lam: FloatArray) -> FloatArray:
        m, var = self._moments_blocks(lam)
        return np.concatenate([m, var + m**2])

    def natural(self, mu: FloatArray) -> FloatArray:
        b = self.blocks(mu)
        return self.from_moments(b[:, 0], b[:, 1] - b[:, 0] ** 2)

    def from_moments(self, mean: FloatArray, cov: FloatArray) -> FloatArray:
        cov = np.asarray(cov, dtype=np.float64)
        var = np.diag(cov) if cov.ndim == 2 else cov
        if np.any(var <= 0.0) or not np.all(np.isfinite(var)):
            raise InvalidParameterError("Diagonal Gaussian variances must be positive")
        return np.concatenate([mean / var, -0.5 / var])

    def sample(self, lam: FloatArray, n: int, rng: np.random.Generator) -> FloatArray:
        m, var = self._moments_blocks(lam)
        return np.asarray(m + np.sqrt(var) * rng.standard_normal((n, self.dim)))

    def sufficient_stats(self, z: FloatArray) -> FloatArray:
        return np.concatenate([z, z**2], axis=1)

    def in_support(self, z: FloatArray) -> NDArray[np.bool_]:
        return np.all(np.isfinite(z), axis=1)

    def fisher_blocks(self, lam: FloatArray) -> FloatArray:
        m, var = self._moments_blocks(lam)
        fisher = np.empty((self.dim, 2, 2))
        fisher[:, 0, 0] = var
        fisher[:, 0, 1] = fisher[:, 1, 0] = 2.0 * m * var
        fisher[:, 1, 1] = 2.0 * var**2 + 4.0 * m**2 * var
        return fisher

    def mean_var_grad(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        m, var = self._moments_blocks(lam)
        dm = np.stack([var, 2.0 * m * var], axis=1)
        dvar = np.stack([np.zeros_like(var), 2.0 * var**2], axis=1)
        return dm, dvar


def cb_log_partition(eta: ArrayLike) -> FloatArray:
    """Elementwise log((e^eta - 1) / eta), with A(0) = 0."""
    eta = np.asarray(eta, dtype=np.float64)
    out = np.empty_like(eta)
    small = np.abs(eta) < CB_SERIES_THRESHOLD
    pos = ~small & (eta > 0)
    neg = ~small & (eta < 0)
    e = eta[small]
    out[small] = e / 2.0 + e**2 / 24.0 - e**4 / 2880.0
    p = eta[pos]
    out[pos] = p + np.log(-np.expm1(-p)) - np.log(p)
    q = eta[neg]
    out[neg] = np.log(-np.expm1(q)) - np.log(-q)
    return out


def cb_mean(eta: ArrayLike) -> FloatArray:
    """Elementwise E[z] of CB(eta)."""
    eta = np.asarray(eta, dtype=np.float64)
    out = np.empty_like(eta)
    small = np.abs(eta) < CB_SERIES_THRESHOLD
    e = eta[small]
    out[small] = 0.5 + e / 12.0 - e**3 / 720.0
    big = eta[~small]
    with np.errstate(over="ignore", divide="ignore"):
        out[~small] = 1.0 / (-np.expm1(-big)) - 1.0 / big
    return out


def cb_variance(eta: ArrayLike) -> FloatArray:
    """Elementwise Var[z] of CB(eta)."""
    eta = np.asarray(eta, dtype=np.float64)
    out = np.empty_like(eta)
    small = np.abs(eta) < CB_VARIANCE_SERIES_THRESHOLD
    e = eta[small]
    out[small] = 1.0 / 12.0 - e**2 / 240.0 + e**4 / 6048.0 - e**6 / 172800.0
    big = eta[~small]
    with np.errstate(over="ignore"):
        out[~small] = 1.0 / big**2 - 1.0 / (4.0 * np.sinh(big / 2.0) ** 2)
    return out


def cb_skewness(eta: ArrayLike) -> FloatArray:
    """Elementwise third cumulant (derivative of the variance) of CB(eta)."""
    eta = np.asarray(eta, dtype=np.float64)
    out = np.empty_like(eta)
    small = np.abs(eta) < CB_SKEW_SERIES_THRESHOLD
    e = eta[small]
    out[small] = -e / 120.0 + e**3 / 1512.0 - e**5 / 28800.0
    big = eta[~small]
    half = big / 2.0
    with np.errstate(over="ignore"):
        out[~small] = -2.0 / big**3 + 1.0 / (4.0 * np.tanh(half) * np.sinh(half) ** 2)
    return out


def cb_inverse_cdf(eta: ArrayLike, u: ArrayLike) -> FloatArray:
    """Elementwise CB(eta) quantile at u; eta and u broadcast together."""
    eta, u = np.broadcast_arrays(np.asarray(eta, np.float64), np.asarray(u, np.float64))
    z = np.empty(eta.shape)
    tiny = np.abs(eta) < 1e-12
    pos = ~tiny & (eta > 0)
    neg = ~tiny & (eta < 0)
    z[tiny] = u[tiny]
    ep, up = eta[pos], u[pos]
    z[pos] = 1.0 + np.log(up + (1.0 - up) * np.exp(-ep)) / ep
    en, un = eta[neg], u[neg]
    z[neg] = np.log1p(un * np.expm1(en)) / en
    return np.clip(z, 0.0, 1.0)


class _ContinuousBernoulli(FactorizedFamily):
    block = 1
    linear_slot = 0

    @property
    def log_base_measure(self) -> float:
        return 0.0

    def validate(self, lam: FloatArray) -> None:
        if not np.all(np.isfinite(lam)):
            raise InvalidParameterError("Continuous Bernoulli parameters must be finite")

    def log_partition(self, lam: FloatArray) -> float:
        self.validate(lam)
        return float(np.sum(cb_log_partition(lam)))

    def log_partition_batch(self, lams: FloatArray) -> FloatArray:
        return np.asarray(np.sum(cb_log_partition(lams), axis=1))

    def mean(self, lam: FloatArray) -> FloatArray:
        self.validate(lam)
        return cb_mean(lam)

    def natural(self, mu: FloatArray) -> FloatArray:
        target = np.asarray(mu, dtype=np.float64)
        if np.any(target <= 0.0) or np.any(target >= 1.0):
            raise InvalidParameterError("Continuous Bernoulli means must lie in (0, 1)")
        lo = -1.0 / target - 10.0
        hi = 1.0 / (1.0 - target) + 10.0
        eta = np.clip(12.0 * (target - 0.5), lo, hi)
        for iteration in range(NEWTON_MAX_ITERS):
            resid = cb_mean(eta) - target
            if np.max(np.abs(resid)) <= NEWTON_TOL:
                _LOGGER.debug("CB mean inversion converged in %d iterations", iteration)
                return np.asarray(eta)
            hi = np.where(resid > 0.0, eta, hi)
            lo = np.where(resid <= 0.0, eta, lo)
            step = eta - resid / cb_variance(eta)
            inside = np.isfinite(step) & (step > lo) & (step < hi)
            eta = np.where(inside, step, 0.5 * (lo + hi))
        raise NumericError(
            f"CB mean inversion did not converge in {NEWTON_MAX_ITERS} iterations",
            last_valid=eta,
        )

    def sample(self, lam: FloatArray, n: int, rng: np.random.Generator) -> FloatArray:
        self.validate(lam)
        eta = np.broadcast_to(lam, (n, self.dim))
        return cb_inverse_cdf(eta, rng.random((n, self.dim)))

    def sufficient_stats(self, z: FloatArray) -> FloatArray:
        return np.asarray(z, dtype=np.float64)

    def in_support(self, z: FloatArray) -> NDArray[np.bool_]:
        return np.all((z >= 0.0) & (z <= 1.0), axis=1)

    def moments(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        self.validate(lam)
        return cb_mean(lam), np.diag(cb_variance(lam))

    def from_moments(self, mean: FloatArray, cov: FloatArray) -> FloatArray:  # noqa: ARG002
        return self.natural(np.clip(mean, 1e-12, 1.0 - 1e-12))

    def fisher_blocks(self, lam: FloatArray) -> FloatArray:
        return cb_variance(lam).reshape(self.dim, 1, 1)

    def mean_var_grad(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        return cb_variance(lam).reshape(-1, 1), cb_skewness(lam).reshape(-1, 1)


class _Gamma(FactorizedFamily):
    block = 2
    linear_slot = 1

    @property
    def log_base_measure(self) -> float:
        return 0.0

    def validate(self, lam: FloatArray) -> None:
        b = self.blocks(lam)
        if not np.all(np.isfinite(b)):
            raise InvalidParameterError("Gamma natural parameters must be finite")
        if np.any(b[:, 0] <= -1.0 + GAMMA_DOMAIN_MARGIN):
            raise InvalidParameterError("Gamma shape entry must exceed -1")
        if np.any(b[:, 1] >= -GAMMA_DOMAIN_MARGIN):
            raise InvalidParameterError("Gamma rate entry must be negative")

    def shape_rate(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Shape and rate vectors."""
        self.validate(lam)
        b = self.blocks(lam)
        return b[:, 0] + 1.0, -b[:, 1]

    def log_partition(self, lam: FloatArray) -> float:
        alpha, beta = self.shape_rate(lam)
        return float(np.sum(special.gammaln(alpha) - alpha * np.log(beta)))

    def log_partition_batch(self, lams: FloatArray) -> FloatArray:
        L = self.dim
        alpha, beta = lams[:, :L] + 1.0, -lams[:, L:]
        return np.asarray(np.sum(special.gammaln(alpha) - alpha * np.log(beta), axis=1))

    def mean(self, lam: FloatArray) -> FloatArray:
        alpha, beta = self.shape_rate(lam)
        return np.concatenate([special.digamma(alpha) - np.log(beta), alpha / beta])

    def natural(self, mu: FloatArray) -> FloatArray:
        b = self.blocks(mu)
        mean_log, mean = b[:, 0], b[:, 1]
        if np.any(mean <= 0.0):
            raise InvalidParameterError("Gamma mean must be positive")
        s = np.log(mean) - mean_log
        if np.any(s <= 0.0) or not np.all(np.isfinite(s)):
            raise InvalidParameterError("Gamma mean parameters violate E[log z] < log E[z]")
        # 1/(2a) < log a - digamma(a) < 1/a brackets the root
        lo = 0.5 / s * (1.0 - 1e-9)
        hi = 1.0 / s * (1.0 + 1e-9)
        alpha = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
        alpha = np.clip(alpha, lo, hi)
        for iteration in range(NEWTON_MAX_ITERS):
            g = np.log(alpha) - special.digamma(alpha) - s
            if np.all(np.abs(g) <= NEWTON_TOL * (1.0 + s)):
                break
            hi = np.where(g < 0.0, alpha, hi)
            lo = np.where(g >= 0.0, alpha, lo)
            step = alpha - g / (1.0 / alpha - special.polygamma(1, alpha))
            inside = np.isfinite(step) & (step > lo) & (step < hi)
            new_alpha = np.where(inside, step, 0.5 * (lo + hi))
            done = np.all(np.abs(new_alpha - alpha) <= 1e-12 * alpha)
            alpha = new_alpha
            if done:
                break
        else:
            raise NumericError(
                f"Gamma mean inversion did not converge in {NEWTON_MAX_ITERS} iterations",
                last_valid=alpha,
            )
        _LOGGER.debug("Gamma mean inversion converged in %d iterations", iteration)
        lam = self.unblock(np.stack([alpha - 1.0, -alpha / mean], axis=1))
        self.validate(lam)
        return lam

    def sample(self, lam: FloatArray, n: int, rng: np.random.Generator) -> FloatArray:
        alpha, beta = self.shape_rate(lam)
        return np.asarray(rng.gamma(alpha, 1.0 / beta, size=(n, self.dim)))

    def sufficient_stats(self, z: FloatArray) -> FloatArray:
        with np.errstate(divide="ignore"):
            return np.concatenate([np.log(z), z], axis=1)

    def in_support(self, z: FloatArray) -> NDArray[np.bool_]:
        return np.all((z > 0.0) & np.isfinite(z), axis=1)

    def moments(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        alpha, beta = self.shape_rate(lam)
        return alpha / beta, np.diag(alpha / beta**2)

    def from_moments(self, mean: FloatArray, cov: FloatArray) -> FloatArray:
        cov = np.asarray(cov, dtype=np.float64)
        var = np.diag(cov) if cov.ndim == 2 else cov
        if np.any(mean <= 0.0) or np.any(var <= 0.0):
            raise InvalidParameterError("Gamma moment matching needs positive mean and variance")
        alpha = mean**2 / var
        beta = mean / var
        return self.unblock(np.stack([alpha - 1.0, -beta], axis=1))

    def fisher_blocks(self, lam: FloatArray) -> FloatArray:
        alpha, beta = self.shape_rate(lam)
        fisher = np.empty((self.dim, 2, 2))
        fisher[:, 0, 0] = special.polygamma(1, alpha)
        fisher[:, 0, 1] = fisher[:, 1, 0] = 1.0 / beta
        fisher[:, 1, 1] = alpha / beta**2
        return fisher

    def mean_var_grad(self, lam: FloatArray) -> tuple[FloatArray, FloatArray]:
        alpha, beta = self.shape_rate(lam)
        dm = np.stack([1.0 / beta, alpha / beta**2], axis=1)
        dvar = np.stack([1.0 / beta**2, 2.0 * alpha / beta**3], axis=1)
        return dm, dvar


_IMPLEMENTATIONS: dict[FamilyKind, type[ExpFamily]] = {
    FamilyKind.GAUSSIAN_DENSE: _GaussianDense,
    FamilyKind.GAUSSIAN_DIAG: _GaussianDiag,
    FamilyKind.CONTINUOUS_BERNOULLI: _ContinuousBernoulli,
    FamilyKind.GAMMA: _Gamma,
}


@functools.lru_cache(maxsize=64)
def family_of(tag: FamilyTag) -> ExpFamily:
    """Return the (cached) implementation for a tag."""
    return _IMPLEMENTATIONS[tag.kind](tag)


def _require_same_tag(p: NaturalParams, q: NaturalParams) -> None:
    if p.tag != q.tag:
        raise FamilyMismatchError(f"Family mismatch: {p.tag} vs {q.tag}")


def log_partition(p: NaturalParams) -> float:
    """Log-partition A(lambda)."""
    return p.family.log_partition(p.lam)


def mean_from_natural(p: NaturalParams) -> MeanParams:
    """Mean parameters mu = grad A(lambda)."""
    return MeanParams(p.tag, p.family.mean(p.lam))


def natural_from_mean(m: MeanParams) -> NaturalParams:
    """Inverse duality map; closed form for Gaussians, safeguarded Newton otherwise."""
    return NaturalParams(m.tag, family_of(m.tag).natural(m.mu))


def sample(p: NaturalParams, n: int, rng: np.random.Generator) -> FloatArray:
    """Draw n i.i.d. samples as an (n, L) matrix."""
    if n < 1:
        raise InvalidParameterError(f"Sample count must be >= 1, got {n}")
    return p.family.sample(p.lam, n, rng)


def entropy(p: NaturalParams) -> float:
    """Differential entropy A(lambda) - lambda^T mu - log h."""
    fam = p.family
    mu = fam.mean(p.lam)
    return float(fam.log_partition(p.lam) - p.lam @ mu - fam.log_base_measure)


def kl(p: NaturalParams, q: NaturalParams) -> float:
    """KL(p || q) = (lambda_p - lambda_q)^T mu_p - A(lambda_p) + A(lambda_q)."""
    _require_same_tag(p, q)
    fam = p.family
    value = (p.lam - q.lam) @ fam.mean(p.lam) - fam.log_partition(p.lam)
    value += fam.log_partition(q.lam)
    return max(float(value), 0.0)


def log_density(p: NaturalParams, z: ArrayLike) -> float | FloatArray:
    """log h + lambda^T t(z) - A(lambda); -inf outside the support.

    A single point (shape (L,)) gives a float, a batch (n, L) gives an array.
    """
    fam = p.family
    pts = np.asarray(z, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != p.tag.dim:
        raise ShapeError(f"Points need {p.tag.dim} columns, got {pts.shape[1]}")
    inside = fam.in_support(pts)
    out = np.full(pts.shape[0], -np.inf)
    if np.any(inside):
        stats = fam.sufficient_stats(pts[inside])
        out[inside] = fam.log_base_measure + stats @ p.lam - fam.log_partition(p.lam)
    if not np.all(inside):
        _LOGGER.warning(
            "%d point(s) outside the %s support scored as -inf", int(np.sum(~inside)), p.tag.kind
        )
    return float(out[0]) if single else out


def is_valid(p: NaturalParams) -> bool:
    """Whether p lies in its family's natural domain."""
    try:
        p.family.validate(p.lam)
    except InvalidParameterError:
        return False
    return True


def moments(p: NaturalParams) -> tuple[FloatArray, FloatArray]:
    """Mean vector and covariance matrix of z under p."""
    return p.family.moments(p.lam)


def from_moments(tag: FamilyTag, mean: ArrayLike, cov: ArrayLike) -> NaturalParams:
    """Moment-matched natural parameters of family ``tag``."""
    fam = family_of(tag)
    return NaturalParams(
        tag, fam.from_moments(np.asarray(mean, dtype=np.float64), np.asarray(cov, np.float64))
    )


def gaussian(mean: ArrayLike, cov: ArrayLike, diagonal: bool = False) -> NaturalParams:
    """Gaussian natural parameters from a mean and a covariance (or variance vector)."""
    m = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return from_moments(FamilyTag.gaussian(m.shape[0], diagonal), m, np.atleast_1d(cov))


def continuous_bernoulli(eta: ArrayLike) -> NaturalParams:
    """Factorized CB with natural parameters eta."""
    e = np.atleast_1d(np.asarray(eta, dtype=np.float64))
    return NaturalParams(FamilyTag.continuous_bernoulli(e.shape[0]), e)


def gamma(shape: ArrayLike, rate: ArrayLike) -> NaturalParams:
    """Factorized Gamma from shape and rate vectors."""
    a = np.atleast_1d(np.asarray(shape, dtype=np.float64))
    b = np.broadcast_to(np.asarray(rate, dtype=np.float64), a.shape)
    return NaturalParams(FamilyTag.gamma(a.shape[0]), np.concatenate([a - 1.0, -b]))


def gamma_shape_rate(p: NaturalParams) -> tuple[FloatArray, FloatArray]:
    """Shape and rate of a Gamma natural parameter vector."""
    fam = p.family
    if not isinstance(fam, _Gamma):
        raise FamilyMismatchError(f"Expected a Gamma family, got {p.tag.kind}")
    return fam.shape_rate(p.lam)


def initial_params(tag: FamilyTag) -> NaturalParams:
    """Default filter initialization q(z_0) for a family."""
    L = tag.dim
    if tag.is_gaussian:
        return from_moments(tag, np.zeros(L), np.eye(L))
    if tag.kind is FamilyKind.CONTINUOUS_BERNOULLI:
        return NaturalParams(tag, np.zeros(L))
    return gamma(np.full(L, 2.0), np.full(L, 2.0))
