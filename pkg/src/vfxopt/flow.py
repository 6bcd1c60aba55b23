"""Euler transport along a velocity field, forward and inverted.

Generation moves a noise sample at t = 0 to data at t = T along
dx/dt = v(x, t; condition).  Inversion runs the same explicit Euler
scheme backward from the data endpoint to recover the noise that would
have produced it:

    forward   x_{t+dt} = x_t + dt * v(x_t, t)
    backward  x_{t-dt} = x_t - dt * v(x_t, t)

Both directions take N uniform steps of dt = T / N.  The scheme is
first order, so the forward/backward round-trip error shrinks like 1/N.

Real diffusion backbones are out of scope; the module ships small
closed-form fields so integration behavior is testable at the desk.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .tensors import LatentTensor


class DivergenceError(ArithmeticError):
    """Velocity or state became non-finite at a given integration step."""

    def __init__(self, step: int, message: str) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Condition:
    """Conditioning for the velocity field: a prompt and an optional image ref."""

    prompt: str
    image: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("condition prompt must be non-empty")


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 50
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")


class VelocityField(ABC):
    """Interface the integrators drive.  Implementations must be pure."""

    @abstractmethod
    def evaluate(self, state: LatentTensor, t: float, condition: Condition) -> LatentTensor:
        """Velocity at (state, t) under the given condition; same shape as state."""


class ConstantField(VelocityField):
    """v = value everywhere.  Forward and backward passes cancel exactly."""

    def __init__(self, value: float) -> None:
        self.value = float(value)

    def evaluate(self, state: LatentTensor, t: float, condition: Condition) -> LatentTensor:
        return LatentTensor(np.full(state.data.shape, self.value, dtype=np.float32))


class LinearField(VelocityField):
    """v = coefficient * x, the exponential-growth test field."""

    def __init__(self, coefficient: float) -> None:
        self.coefficient = float(coefficient)

    def evaluate(self, state: LatentTensor, t: float, condition: Condition) -> LatentTensor:
        with np.errstate(over="ignore"):  # overflow surfaces as a divergence error
            return LatentTensor(np.float32(self.coefficient) * state.data)


TargetSpec = Union[float, np.ndarray, Callable[[Condition], Union[float, np.ndarray]]]


class TargetAttractorField(VelocityField):
    """v = (target(condition) - x) / (horizon - t + epsilon).

    The forward flow lands on the target as t approaches the horizon;
    epsilon keeps the final step finite.  Targets may depend on the
    condition, which makes generation condition-sensitive in tests.
    """

    def __init__(self, target: TargetSpec, horizon: float = 1.0, epsilon: float = 1e-3) -> None:
        if horizon <= 0.0:
            raise ValueError(f"horizon must be > 0, got {horizon}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {epsilon}")
        self.target = target
        self.horizon = float(horizon)
        self.epsilon = float(epsilon)

    def _target_array(self, state: LatentTensor, condition: Condition) -> np.ndarray:
        target = self.target
        if callable(target):
            target = target(condition)
        return np.broadcast_to(np.asarray(target, dtype=np.float32), state.data.shape)

    def evaluate(self, state: LatentTensor, t: float, condition: Condition) -> LatentTensor:
        gap = self._target_array(state, condition) - state.data
        return LatentTensor(gap / np.float32(self.horizon - t + self.epsilon))


def make_toy_field(kind: str, **params) -> VelocityField:
    """Build one of the closed-form fields: 'constant', 'linear', 'target-attractor'."""
    if kind == "constant":
        return ConstantField(params.pop("value", 0.0))
    if kind == "linear":
        return LinearField(params.pop("coefficient", 0.5))
    if kind == "target-attractor":
        return TargetAttractorField(
            params.pop("target", 0.0),
            horizon=params.pop("horizon", 1.0),
            epsilon=params.pop("epsilon", 1e-3),
        )
    raise ValueError(f"unknown toy field kind {kind!r}")


def _check_finite(step: int, tensor_data: np.ndarray, what: str) -> None:
    if not np.isfinite(tensor_data).all():
        raise DivergenceError(step, f"{what} is non-finite")


def _evaluate_velocity(
    field: VelocityField, state: LatentTensor, t: float, condition: Condition, step: int
) -> LatentTensor:
    # fields return LatentTensor, whose constructor already rejects NaN/Inf;
    # surface that as a divergence at this step rather than a bare ValueError
    try:
        velocity = field.evaluate(state, t, condition)
    except ValueError as exc:
        if "finite" in str(exc):
            raise DivergenceError(step, "velocity is non-finite") from exc
        raise
    if velocity.data.shape != state.data.shape:
        raise ValueError(
            f"field returned shape {velocity.data.shape}, expected {state.data.shape}"
        )
    _check_finite(step, velocity.data, "velocity")
    return velocity


def integrate_forward(
    field: VelocityField,
    noise: LatentTensor,
    condition: Condition,
    config: IntegratorConfig = IntegratorConfig(),
) -> LatentTensor:
    """Transport a sample from t = 0 to t = horizon in `steps` Euler steps."""
    dt = np.float32(config.horizon / config.steps)
    state = noise
    for step in range(config.steps):
        t = step * float(dt)
        velocity = _evaluate_velocity(field, state, t, condition, step)
        advanced = state.data + dt * velocity.data
        _check_finite(step, advanced, "state")
        state = LatentTensor(advanced)
    return state


def invert(
    field: VelocityField,
    data_sample: LatentTensor,
    condition: Condition,
    config: IntegratorConfig = IntegratorConfig(),
) -> LatentTensor:
    """Run the Euler scheme backward from t = horizon to recover the noise."""
    dt = np.float32(config.horizon / config.steps)
    state = data_sample
    for step in range(config.steps):
        t = config.horizon - step * float(dt)
        velocity = _evaluate_velocity(field, state, t, condition, step)
        receded = state.data - dt * velocity.data
        _check_finite(step, receded, "state")
        state = LatentTensor(receded)
    return state
