"""Small multilayer perceptrons with hand-written backpropagation, plus Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import special

from .const import DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, DEFAULT_STEP_SIZE
from .exceptions import NumericError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)


class Activation(StrEnum):
    """Output activations; hidden layers always use SiLU."""

    IDENTITY = "identity"
    SOFTPLUS = "softplus"
    SIGMOID = "sigmoid"


def silu(a: FloatArray) -> FloatArray:
    """a * sigmoid(a)."""
    return np.asarray(a * special.expit(a))


def silu_grad(a: FloatArray) -> FloatArray:
    """Derivative of SiLU; equals 1/2 at 0."""
    s = special.expit(a)
    return np.asarray(s * (1.0 + a * (1.0 - s)))


def _apply_output(kind: Activation, a: FloatArray) -> FloatArray:
    if kind is Activation.SOFTPLUS:
        return np.asarray(np.logaddexp(0.0, a))
    if kind is Activation.SIGMOID:
        return np.asarray(special.expit(a))
    return a


def _output_grad(kind: Activation, a: FloatArray) -> FloatArray:
    if kind is Activation.SOFTPLUS:
        return np.asarray(special.expit(a))
    if kind is Activation.SIGMOID:
        s = special.expit(a)
        return np.asarray(s * (1.0 - s))
    return np.ones_like(a)


@dataclass(frozen=True)
class MlpGradient:
    """Gradient of upstream^T forward(x) w.r.t. the flat parameters and the input."""

    params: FloatArray
    inputs: FloatArray


@dataclass(frozen=True, eq=False)
class Mlp:
    """Feed-forward network with SiLU hidden layers.

    Weights are stored (out, in); a layer computes W x + b.
    """

    weights: tuple[FloatArray, ...] = field(repr=False)
    biases: tuple[FloatArray, ...] = field(repr=False)
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        """Check that layer shapes chain and parameters are finite."""
        weights = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        if not weights or len(weights) != len(biases):
            raise ShapeError("An MLP needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(weights, biases, strict=True)):
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"Layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
                raise ShapeError(f"Layer {i} input {w.shape[1]} != previous output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"Layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "output_activation", Activation(self.output_activation))

    @classmethod
    def init(
        cls,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        hidden: int | Sequence[int] = 32,
        output_activation: Activation = Activation.IDENTITY,
    ) -> Mlp:
        """Glorot-uniform weights, zero biases."""
        sizes = [in_dim, *([hidden] if isinstance(hidden, int) else hidden), out_dim]
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:], strict=True):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases = [np.zeros(n) for n in sizes[1:]]
        return cls(tuple(weights), tuple(biases), output_activation)

    @property
    def in_dim(self) -> int:
        """Input dimension."""
        return int(self.weights[0].shape[1])

    @property
    def out_dim(self) -> int:
        """Output dimension."""
        return int(self.weights[-1].shape[0])

    @property
    def n_params(self) -> int:
        """Number of scalar parameters."""
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases, strict=True))

    def _check_input(self, x: ArrayLike) -> tuple[FloatArray, bool]:
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if arr.shape[1] != self.in_dim:
            raise ShapeError(f"Expected input dimension {self.in_dim}, got {arr.shape[1]}")
        return arr, single

    def _pass(self, x: FloatArray) -> tuple[list[FloatArray], list[FloatArray]]:
        """Forward pass keeping pre-activations and layer inputs."""
        inputs = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases, strict=True)):
            a = h @ w.T + b
            pre.append(a)
            h = _apply_output(self.output_activation, a) if i == last else silu(a)
            inputs.append(h)
        return pre, inputs

    def forward(self, x: ArrayLike) -> FloatArray:
        """Network output for one input (in,) or a batch (n, in)."""
        arr, single = self._check_input(x)
        _, acts = self._pass(arr)
        return acts[-1][0] if single else acts[-1]

    def backward(self, x: ArrayLike, upstream_grad: ArrayLike) -> MlpGradient:
        """Reverse-mode gradient of upstream^T forward(x), summed over a batch."""
        arr, single = self._check_input(x)
        g = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
        if g.shape != (arr.shape[0], self.out_dim):
            raise ShapeError(f"Upstream gradient shape {g.shape} does not match output")
        pre, acts = self._pass(arr)
        last = len(self.weights) - 1
        delta = g * _output_grad(self.output_activation, pre[-1])
        grads_w: list[FloatArray] = [np.empty(0)] * len(self.weights)
        grads_b: list[FloatArray] = [np.empty(0)] * len(self.weights)
        for i in range(last, -1, -1):
            grads_w[i] = delta.T @ acts[i]
            grads_b[i] = delta.sum(axis=0)
            back = delta @ self.weights[i]
            delta = back * silu_grad(pre[i - 1]) if i > 0 else back
        flat = np.concatenate(
            [np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b, strict=True)]
        )
        return MlpGradient(params=flat, inputs=delta[0] if single else delta)

    def input_jacobian(self, x: ArrayLike) -> FloatArray:
        """d forward / d x at a single input, shape (out, in)."""
        arr, _ = self._check_input(x)
        point = arr[0]
        eye = np.eye(self.out_dim)
        return np.stack([self.backward(point, eye[k]).inputs for k in range(self.out_dim)])

    def parameters(self) -> FloatArray:
        """All parameters as one flat vector (per layer: W row-major, then b)."""
        return np.concatenate(
            [np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases, strict=True)]
        )

    def with_parameters(self, flat: ArrayLike) -> Mlp:
        """A copy of this network holding the given flat parameters."""
        vec = np.asarray(flat, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"Expected {self.n_params} parameters, got {vec.shape}")
        weights, biases = [], []
        offset = 0
        for w, b in zip(self.weights, self.biases, strict=True):
            weights.append(vec[offset : offset + w.size].reshape(w.shape))
            offset += w.size
            biases.append(vec[offset : offset + b.size])
            offset += b.size
        return replace(self, weights=tuple(weights), biases=tuple(biases))

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready snapshot: shape header plus a flat parameter array."""
        return {
            "kind": "mlp",
            "output_activation": str(self.output_activation),
            "shapes": [list(w.shape) for w in self.weights],
            "params": self.parameters().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Mlp:
        """Rebuild a network from ``to_dict`` output."""
        shapes = [tuple(int(n) for n in s) for s in data["shapes"]]
        skeleton = cls(
            tuple(np.zeros(s) for s in shapes),
            tuple(np.zeros(s[0]) for s in shapes),
            Activation(data.get("output_activation", Activation.IDENTITY)),
        )
        return skeleton.with_parameters(np.asarray(data["params"], dtype=np.float64))


@dataclass(frozen=True)
class AdamState:
    """Adam moment estimates and hyperparameters."""

    m: FloatArray = field(repr=False)
    v: FloatArray = field(repr=False)
    step: int = 0
    step_size: float = DEFAULT_STEP_SIZE
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS

    @classmethod
    def zeros(cls, n_params: int, **hyper: float) -> AdamState:
        """Fresh state for a parameter vector of the given length."""
        return cls(np.zeros(n_params), np.zeros(n_params), 0, **hyper)  # type: ignore[arg-type]


def _check_grads(params: FloatArray, grads: FloatArray) -> None:
    if params.shape != grads.shape:
        raise ShapeError(f"Parameter shape {params.shape} != gradient shape {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("Non-finite gradient passed to the optimizer")


def adam_step(
    params: ArrayLike, grads: ArrayLike, state: AdamState
) -> tuple[FloatArray, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    _check_grads(p, g)
    if state.m.shape != p.shape:
        raise ShapeError(f"Optimizer state has {state.m.shape[0]} entries, params {p.shape[0]}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g**2
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = p - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)


def sgd_step(
    params: ArrayLike, grads: ArrayLike, state: AdamState
) -> tuple[FloatArray, AdamState]:
    """Plain gradient step with the state's step size (moments untouched)."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    _check_grads(p, g)
    return p - state.step_size * g, replace(state, step=state.step + 1)
