"""Fast Whittle indices for forward-threshold arms.

A forward threshold policy is fixed by the first state on each chain where it
acts, ``(x0, x1)``. Under such a policy the belief process is a small Markov
chain whose occupancy frequencies have a closed form, so the long-run average
reward is linear in the passivity subsidy ``m``:

    J_m(x0, x1) = A(x0, x1) + m * C(x0, x1)

Two policies that differ by one step on one chain have equal value at a
single ``m``; sweeping the thresholds outward and always taking the smaller
of the two candidate crossings yields the index of every belief state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from collapsing_bandits.belief import BeliefChains, BeliefStateId

logger = logging.getLogger(__name__)

# Two candidate subsidies closer than this are treated as a tie, and value
# lines whose slopes differ by less than this are treated as parallel.
TIE_TOL = 1e-12
# 1 - b1(x1) below this makes the occupancy formula blow up.
MIN_EXIT_PROB = 1e-15


class IndeterminateSubsidyError(ArithmeticError):
    """Two policies have parallel value lines, so no unique crossing exists."""


class OccupancyError(ArithmeticError):
    """Occupancy frequencies are undefined (chain 1 never exits)."""


@dataclass(frozen=True, order=True)
class ForwardThresholdPolicy:
    """Act at belief state ``x0`` on chain 0 and ``x1`` on chain 1."""

    x0: int
    x1: int

    def advanced(self, omega: int) -> "ForwardThresholdPolicy":
        if omega == 0:
            return ForwardThresholdPolicy(self.x0 + 1, self.x1)
        return ForwardThresholdPolicy(self.x0, self.x1 + 1)


@dataclass(frozen=True)
class OccupancyProfile:
    """Stationary frequencies of the chain induced by a threshold policy.

    Every visited chain-0 state has frequency ``alpha`` and every visited
    chain-1 state ``beta_freq``; states past a threshold are never reached.
    """

    policy: ForwardThresholdPolicy
    alpha: float
    beta_freq: float

    def frequencies(self, T: int) -> np.ndarray:
        """Expanded (2, T) map of per-state frequencies."""
        f = np.zeros((2, T))
        f[0, : self.policy.x0] = self.alpha
        f[1, : self.policy.x1] = self.beta_freq
        return f

    @property
    def total(self) -> float:
        return self.policy.x0 * self.alpha + self.policy.x1 * self.beta_freq


@dataclass(frozen=True)
class LinearReward:
    """Average reward of a fixed policy as a line in the subsidy."""

    intercept: float
    passive_mass: float

    def at(self, m: float) -> float:
        return self.intercept + m * self.passive_mass


@dataclass(frozen=True)
class WhittleTable:
    """Index of every belief state of one arm, ``w[omega, u - 1]``.

    ``trace`` lists the assignments ``(omega, u, m)`` in the order the sweep
    produced them.
    """

    w: np.ndarray = field(repr=False)
    trace: tuple[tuple[int, int, float], ...] = field(repr=False, default=())

    @property
    def horizon(self) -> int:
        return self.w.shape[1]

    def index(self, omega: int, u: int) -> float:
        return float(self.w[omega, u - 1])

    def csv_rows(self, arm_id) -> list[tuple[str, int, int, str]]:
        return [
            (str(arm_id), omega, u, f"{self.w[omega, u - 1]:.12g}")
            for omega in (0, 1)
            for u in range(1, self.horizon + 1)
        ]

    def monotonicity_violations(self, tol: float = 1e-9) -> list[tuple[int, int]]:
        """States (omega, u) whose index drops below that of (omega, u - 1)."""
        bad = []
        for omega in (0, 1):
            drops = np.nonzero(np.diff(self.w[omega]) < -tol)[0]
            bad.extend((omega, int(i) + 2) for i in drops)
        return bad


def _check_policy(policy: ForwardThresholdPolicy, horizon: int) -> None:
    if not (1 <= policy.x0 <= horizon and 1 <= policy.x1 <= horizon):
        raise ValueError(f"{policy} outside chain horizon 1..{horizon}")


def _occupancy_pair(b0: Sequence[float], b1: Sequence[float], x0: int, x1: int) -> tuple[float, float]:
    exit_prob = 1.0 - b1[x1 - 1]
    if exit_prob < MIN_EXIT_PROB:
        raise OccupancyError(f"b1({x1}) is numerically 1; chain 1 never exits")
    ratio = b0[x0 - 1] / exit_prob
    alpha = 1.0 / (x1 * ratio + x0)
    return alpha, alpha * ratio


def occupancy(chains: BeliefChains, policy: ForwardThresholdPolicy) -> OccupancyProfile:
    """Occupancy frequencies of ``policy`` on ``chains``.

    Flow balance between the chains gives ``alpha * b0(x0) = beta * (1 -
    b1(x1))``, and the frequencies of the ``x0 + x1`` visited states sum to 1.
    """
    _check_policy(policy, chains.horizon)
    alpha, beta_freq = _occupancy_pair(chains.values[0], chains.values[1], policy.x0, policy.x1)
    return OccupancyProfile(policy=policy, alpha=alpha, beta_freq=beta_freq)


def _linear_from_frequencies(values: np.ndarray, profile: OccupancyProfile) -> LinearReward:
    f = profile.frequencies(values.shape[1])
    x0, x1 = profile.policy.x0, profile.policy.x1
    intercept = float(np.sum(values * f))
    passive_mass = 1.0 - f[1, x1 - 1] - f[0, x0 - 1]
    return LinearReward(intercept=intercept, passive_mass=float(passive_mass))


def avg_reward_linear(chains: BeliefChains, policy: ForwardThresholdPolicy) -> LinearReward:
    """Average reward of ``policy`` split into reward and subsidy parts.

    The intercept is the occupancy-weighted belief; the slope is the long-run
    fraction of rounds spent passive (every state except the two thresholds).
    """
    return _linear_from_frequencies(chains.values, occupancy(chains, policy))


def _crossing(a: LinearReward, b: LinearReward) -> float:
    slope = a.passive_mass - b.passive_mass
    if abs(slope) <= TIE_TOL:
        raise IndeterminateSubsidyError(
            f"parallel value lines (passive mass {a.passive_mass!r} vs {b.passive_mass!r})"
        )
    return (b.intercept - a.intercept) / slope


def solve_subsidy(
    chains: BeliefChains, policy_a: ForwardThresholdPolicy, policy_b: ForwardThresholdPolicy
) -> float:
    """Subsidy at which ``policy_a`` and ``policy_b`` earn the same average reward."""
    if policy_a == policy_b:
        raise ValueError("policies must differ")
    return _crossing(avg_reward_linear(chains, policy_a), avg_reward_linear(chains, policy_b))


class _Sweep:
    """Threshold sweep over chains padded with one clamped virtual state.

    The virtual state T+1 repeats the belief of state T so the last real
    state of each chain also gets a crossing to solve against.
    """

    def __init__(self, chains: BeliefChains, naive: bool = False):
        self.T = chains.horizon
        padded = np.concatenate([chains.values, chains.values[:, -1:]], axis=1)
        self.values = padded
        self.b0 = padded[0].tolist()
        self.b1 = padded[1].tolist()
        # prefix[x] = sum of the first x beliefs on that chain
        self.prefix0 = [0.0, *np.cumsum(padded[0]).tolist()]
        self.prefix1 = [0.0, *np.cumsum(padded[1]).tolist()]
        self.naive = naive

    def line(self, x0: int, x1: int) -> LinearReward:
        alpha, beta_freq = _occupancy_pair(self.b0, self.b1, x0, x1)
        if self.naive:
            profile = OccupancyProfile(ForwardThresholdPolicy(x0, x1), alpha, beta_freq)
            return _linear_from_frequencies(self.values, profile)
        return LinearReward(
            intercept=alpha * self.prefix0[x0] + beta_freq * self.prefix1[x1],
            passive_mass=1.0 - alpha - beta_freq,
        )

    def run(self) -> Iterator[tuple[int, int, float]]:
        """Yield ``(omega, u, index)`` in assignment order."""
        x = [1, 1]
        # first the plain sweep over real states, then the two terminal states
        for limit in (self.T, self.T + 1):
            while x[0] < limit or x[1] < limit:
                here = self.line(x[0], x[1])
                cand = {}
                for omega in (0, 1):
                    if x[omega] >= limit:
                        continue
                    nxt = (x[0] + 1, x[1]) if omega == 0 else (x[0], x[1] + 1)
                    try:
                        cand[omega] = _crossing(here, self.line(*nxt))
                    except IndeterminateSubsidyError:
                        logger.warning("indeterminate crossing advancing chain %d at %s", omega, tuple(x))
                if not cand:
                    logger.warning("no determinate crossing at %s; remaining states get +inf", tuple(x))
                    for omega in (0, 1):
                        for u in range(x[omega], self.T + 1):
                            yield omega, u, math.inf
                    return
                m = min(cand.values())
                for omega in (0, 1):
                    if omega in cand and cand[omega] - m <= TIE_TOL:
                        yield omega, x[omega], m
                        x[omega] += 1


def compute_index_table(chains: BeliefChains, naive: bool = False) -> WhittleTable:
    """Whittle index of every belief state by the sequential threshold sweep.

    Exact for non-increasing-belief arms on which a forward threshold policy
    is optimal; other arms get the sweep's answer without complaint. With
    ``naive`` each policy's value is recomputed from its full occupancy map
    instead of running prefix sums.
    """
    w = np.full((2, chains.horizon), np.nan)
    trace = []
    for omega, u, m in _Sweep(chains, naive=naive).run():
        w[omega, u - 1] = m
        trace.append((omega, u, m))
    w.setflags(write=False)
    return WhittleTable(w=w, trace=tuple(trace))


def whittle_on_demand(chains: BeliefChains, state: BeliefStateId) -> float:
    """Index of one belief state, stopping the sweep once it is reached."""
    if state.u > chains.horizon:
        raise ValueError(f"u={state.u} beyond horizon {chains.horizon}")
    for omega, u, m in _Sweep(chains).run():
        if (omega, u) == (state.omega, state.u):
            return m
    raise AssertionError("sweep ended without visiting the requested state")
