"""Transition models and the two-chain belief calculus of a single arm.

An arm has a latent state in {0, 1}. Acting on it reveals the state; after
that the belief that the arm is in state 1 drifts deterministically down one
of two chains, one per observed value, until the next action.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# Slack used when comparing neighbouring chain beliefs.
TREND_TOL = 1e-12

PROB_FIELDS = ("p01p", "p11p", "p01a", "p11a")


class ModelValidationError(ValueError):
    """Raised when transition probabilities violate a model constraint."""


@dataclass(frozen=True)
class TransitionModel:
    """Probabilities of moving to latent state 1 from state 0 or 1 under the
    passive (``p``) or active (``a``) action.

    Build through :func:`validate_model` so the constraints are enforced.
    """

    p01p: float
    p11p: float
    p01a: float
    p11a: float
    strict: bool = True

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.p01p, self.p11p, self.p01a, self.p11a)

    @property
    def passive_gap(self) -> float:
        """p11p - p01p, the per-step contraction factor of passive beliefs."""
        return self.p11p - self.p01p

    @property
    def active_gap(self) -> float:
        return self.p11a - self.p01a


def validate_model(p01p, p11p, p01a, p11a, strict: bool = True) -> TransitionModel:
    """Check the four probabilities and return a :class:`TransitionModel`.

    Every probability must lie strictly inside (0, 1). With ``strict`` the
    natural ordering also has to hold: good states are stickier than bad
    ones under either action, and acting raises the chance of reaching
    state 1 from either state.
    """
    values = dict(zip(PROB_FIELDS, (p01p, p11p, p01a, p11a)))
    for name, v in values.items():
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise ModelValidationError(f"{name}={v!r} is not a number") from None
        if not np.isfinite(v) or not 0.0 < v < 1.0:
            raise ModelValidationError(
                f"{name}={v!r} outside (0, 1): probabilities are assumed to be nonzero and below one"
            )
        values[name] = v

    if strict:
        for lo, hi in (("p01p", "p11p"), ("p01a", "p11a"), ("p01p", "p01a"), ("p11p", "p11a")):
            if not values[lo] < values[hi]:
                raise ModelValidationError(
                    f"{lo} < {hi} violated ({values[lo]!r} >= {values[hi]!r})"
                )
    return TransitionModel(**values, strict=strict)


@dataclass(frozen=True, order=True)
class BeliefStateId:
    """Belief state reached ``u`` rounds after observing ``omega``."""

    omega: int
    u: int

    def __post_init__(self):
        if self.omega not in (0, 1):
            raise ValueError(f"omega must be 0 or 1, got {self.omega!r}")
        if self.u < 1:
            raise ValueError(f"u must be >= 1, got {self.u!r}")


class BeliefTrend(str, enum.Enum):
    NIB = "NIB"  # both chains non-increasing
    SB = "SB"  # chain 0 rises toward the stationary belief


def stationary_belief(model: TransitionModel) -> float:
    """Fixed point of the one-step passive update b -> b*p11p + (1-b)*p01p."""
    return model.p01p / (1.0 + model.p01p - model.p11p)


def tau(model: TransitionModel, u: int, b: float) -> float:
    """Belief after ``u`` passive steps starting from belief ``b``.

    Closed form: b* + (p11p - p01p)**u * (b - b*).
    """
    if u < 0:
        raise ValueError(f"step count must be >= 0, got {u}")
    b_star = stationary_belief(model)
    return b_star + model.passive_gap**u * (b - b_star)


def tau_iterated(model: TransitionModel, u: int, b: float) -> float:
    """Same as :func:`tau` by repeated one-step updates; used as a check."""
    for _ in range(u):
        b = b * model.p11p + (1.0 - b) * model.p01p
    return b


@dataclass(frozen=True)
class BeliefChains:
    """Beliefs ``values[omega, u - 1]`` for u = 1..T on both chains."""

    model: TransitionModel
    values: np.ndarray = field(repr=False)
    b_star: float

    @property
    def horizon(self) -> int:
        return self.values.shape[1]

    def belief(self, omega: int, u: int) -> float:
        if not 1 <= u <= self.horizon:
            raise IndexError(f"u={u} outside 1..{self.horizon}")
        return float(self.values[omega, u - 1])


def build_chains(model: TransitionModel, T: int) -> BeliefChains:
    """Evaluate both belief chains out to horizon ``T``."""
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    b_star = stationary_belief(model)
    decay = model.passive_gap ** np.arange(T)
    heads = np.array([model.p01a, model.p11a])
    values = b_star + decay[None, :] * (heads[:, None] - b_star)
    values[:, 0] = heads
    values.setflags(write=False)
    return BeliefChains(model=model, values=values, b_star=b_star)


def classify_trend(chains: BeliefChains) -> BeliefTrend:
    """NIB when neither chain ever increases, SB otherwise."""
    steps = np.diff(chains.values, axis=1)
    if np.all(steps <= TREND_TOL):
        return BeliefTrend.NIB
    return BeliefTrend.SB


def check_forward_condition(model: TransitionModel, beta: float) -> bool:
    """Sufficient condition for a forward threshold policy to be optimal at
    discount ``beta`` for every subsidy."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {beta}")
    lhs = model.passive_gap * (1.0 + beta * model.active_gap) * (1.0 - beta)
    return bool(lhs >= model.active_gap)


def check_reverse_condition(model: TransitionModel, beta: float) -> bool:
    """Sufficient condition for a reverse threshold policy to be optimal."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {beta}")
    lhs = model.passive_gap * (1.0 + beta * model.active_gap / (1.0 - beta))
    return bool(lhs <= model.active_gap)
