"""Slow but general reference computations.

Everything here works from the subsidised discounted Bellman equation over
the truncated belief chains rather than from threshold structure, so it can
check the fast index sweep and serve as the baseline it is compared with.

Belief state ``(omega, u)`` is stored at flat position ``omega * T + u - 1``.
Passive play moves it to ``(omega, min(u + 1, T))``; the last state of each
chain loops on itself with its belief frozen. Active play jumps to the chain
heads with probabilities ``b`` and ``1 - b``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from collapsing_bandits.belief import BeliefChains, BeliefStateId, TransitionModel, build_chains
from collapsing_bandits.whittle import TIE_TOL, ForwardThresholdPolicy, avg_reward_linear

logger = logging.getLogger(__name__)

# Passive must beat active by more than this to count as strictly optimal.
STRICT_MARGIN = 1e-9
BELIEF_TIE_TOL = 1e-12
ENUMERATION_MAX_T = 64
MAX_DOUBLINGS = 10


class ConvergenceError(RuntimeError):
    """The Bellman solver hit its iteration cap."""


class NoSignChangeError(RuntimeError):
    """The optimal action at a state never switched inside the search bracket."""


class PolicyShape(str, enum.Enum):
    FORWARD = "Forward"
    REVERSE = "Reverse"
    DUAL = "Dual"
    OTHER = "Other"
    ALL_PASSIVE = "AllPassive"
    ALL_ACTIVE = "AllActive"


@dataclass(frozen=True)
class ValueTable:
    """Optimal values and action values of every truncated belief state."""

    m: float
    beta: float
    beliefs: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    q_passive: np.ndarray = field(repr=False)
    q_active: np.ndarray = field(repr=False)
    residual: float
    iterations: int

    @property
    def margin(self) -> np.ndarray:
        """Passive minus active value, shape (2, T)."""
        return self.q_passive - self.q_active

    @property
    def actions(self) -> np.ndarray:
        """1 where acting is strictly better, else 0."""
        return (self.margin < 0).astype(int)


@dataclass(frozen=True)
class IndexabilityReport:
    m_grid: list[float]
    passive_counts: list[int]
    monotone: bool
    first_violation: float | None = None

    def to_dict(self) -> dict:
        return {
            "m_grid": self.m_grid,
            "passive_counts": self.passive_counts,
            "monotone": self.monotone,
            "first_violation": self.first_violation,
        }


def _iteration_cap(tol: float, beta: float, scale: float) -> int:
    if beta == 0.0:
        return 2
    # residual after n sweeps from zero is at most beta**n times the reward scale
    return math.ceil(math.log(tol * (1.0 - beta) / scale) / math.log(beta)) + 100


class _Arm:
    """Flat arrays describing one truncated belief MDP."""

    def __init__(self, chains: BeliefChains):
        T = chains.horizon
        self.T = T
        self.beliefs = chains.values
        self.b = chains.values.reshape(-1)
        self.b_list = self.b.tolist()
        nxt = np.minimum(np.arange(T) + 1, T - 1)
        self.passive_next = np.concatenate([nxt, nxt + T])

    def q_values(self, v: np.ndarray, m: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
        T = self.T
        qp = self.b + m + beta * v[self.passive_next]
        qa = self.b + beta * (self.b * v[T] + (1.0 - self.b) * v[0])
        return qp, qa

    def evaluate(self, active: list[bool], m: float, beta: float) -> np.ndarray:
        """Exact discounted value of a fixed policy.

        Every state value is affine in the two head values, found by walking
        each chain backwards; a 2x2 solve then pins the heads.
        """
        T = self.T
        b = self.b_list
        coef = [None] * (2 * T)  # (const, on V(0,1), on V(1,1))
        for omega in (0, 1):
            last = omega * T + T - 1
            for i in range(last, omega * T - 1, -1):
                bi = b[i]
                if active[i]:
                    coef[i] = (bi, beta * (1.0 - bi), beta * bi)
                elif i == last:
                    coef[i] = ((bi + m) / (1.0 - beta), 0.0, 0.0)
                else:
                    c, d0, d1 = coef[i + 1]
                    coef[i] = (bi + m + beta * c, beta * d0, beta * d1)
        c0, a00, a01 = coef[0]
        c1, a10, a11 = coef[T]
        # h0 = c0 + a00 h0 + a01 h1 ; h1 = c1 + a10 h0 + a11 h1
        det = (1.0 - a00) * (1.0 - a11) - a01 * a10
        h0 = (c0 * (1.0 - a11) + a01 * c1) / det
        h1 = (c1 * (1.0 - a00) + a10 * c0) / det
        return np.array([c + d0 * h0 + d1 * h1 for c, d0, d1 in coef])


def _solve(
    arm: _Arm, m: float, beta: float, tol: float, method: str, warm_start: np.ndarray | None
) -> ValueTable:
    T = arm.T
    scale = 1.0 + abs(m)
    if method == "value":
        cap = _iteration_cap(tol, beta, scale)
        v = np.zeros(2 * T)
        for it in range(1, cap + 1):
            qp, qa = arm.q_values(v, m, beta)
            new = np.maximum(qp, qa)
            residual = float(np.max(np.abs(new - v)))
            v = new
            if residual < tol:
                break
        else:
            raise ConvergenceError(f"value iteration did not reach {tol} in {cap} sweeps")
    elif method == "policy":
        active = (
            [bool(a) for a in np.asarray(warm_start).reshape(-1)]
            if warm_start is not None
            else [False] * (2 * T)
        )
        cap = 4 * T + 50
        switch_tol = 1e-12 * scale / (1.0 - beta)
        for it in range(1, cap + 1):
            v = arm.evaluate(active, m, beta)
            qp, qa = arm.q_values(v, m, beta)
            cur = np.where(active, qa, qp)
            gain = np.maximum(qp, qa) - cur
            if np.all(gain <= switch_tol):
                break
            improve = gain > switch_tol
            active = np.where(improve, qa > qp, active).tolist()
        else:
            raise ConvergenceError(f"policy iteration did not stabilise in {cap} rounds")
    else:
        raise ValueError(f"unknown method {method!r}")

    qp, qa = arm.q_values(v, m, beta)
    best = np.maximum(qp, qa)
    residual = float(np.max(np.abs(best - v)))
    # values reach (1 + |m|) / (1 - beta), so rounding alone can exceed an absolute tol
    if residual >= tol * max(1.0, float(np.max(np.abs(best)))):
        raise ConvergenceError(f"Bellman residual {residual:.3g} above tolerance {tol}")
    return ValueTable(
        m=m,
        beta=beta,
        beliefs=arm.beliefs,
        v=best.reshape(2, T),
        q_passive=qp.reshape(2, T),
        q_active=qa.reshape(2, T),
        residual=residual,
        iterations=it,
    )


def truncation_horizon(model: TransitionModel, eps: float = 1e-8, min_T: int = 30, max_T: int = 2000) -> int:
    """Chain length after which passive beliefs sit within ``eps`` of b*."""
    gap = abs(model.passive_gap)
    if gap < 1e-300:
        return min_T
    if gap >= 1.0:
        return max_T
    need = math.ceil(math.log(eps) / math.log(gap))
    return int(min(max(need, min_T), max_T))


def _check_inputs(beta: float, T: int, tol: float) -> None:
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {beta}")
    if T < 2:
        raise ValueError(f"truncation must be >= 2, got {T}")
    if tol <= 0:
        raise ValueError("tolerance must be positive")


def value_iteration(
    model: TransitionModel,
    m: float,
    beta: float,
    T: int,
    tol: float = 1e-9,
    method: str = "policy",
    warm_start: np.ndarray | None = None,
) -> ValueTable:
    """Solve the subsidised discounted Bellman equation on the 2T chain states.

    ``method="value"`` runs plain synchronous value iteration; ``"policy"``
    (default) runs policy iteration with exact policy evaluation, which lands
    on the same fixed point far faster when ``beta`` is close to 1. Either way
    the returned table has Bellman residual below ``tol`` times the largest
    state value (or ``tol`` itself when values stay below 1).
    """
    _check_inputs(beta, T, tol)
    return _solve(_Arm(build_chains(model, T)), m, beta, tol, method, warm_start)


class _MarginProbe:
    """Passive-minus-active value at one state as a function of subsidy,
    reusing the last optimal policy as a warm start."""

    def __init__(self, arm: _Arm, flat: int, beta: float, vi_tol: float, method: str):
        self.arm, self.flat, self.beta = arm, flat, beta
        self.vi_tol, self.method = vi_tol, method
        self.policy = None
        self.calls = 0

    def __call__(self, m: float) -> float:
        self.calls += 1
        table = _solve(self.arm, m, self.beta, self.vi_tol, self.method, self.policy)
        self.policy = table.actions
        return float(table.margin.reshape(-1)[self.flat])


def _bisect_sign_change(probe, tol: float) -> float:
    """Smallest m with probe(m) >= 0, assuming probe is non-decreasing."""
    lo, hi = -2.0, 2.0
    for _ in range(MAX_DOUBLINGS + 1):
        if probe(lo) < 0:
            break
        lo *= 2.0
    else:
        raise NoSignChangeError(f"passive still optimal at subsidy {lo / 2}")
    for _ in range(MAX_DOUBLINGS + 1):
        if probe(hi) >= 0:
            break
        hi *= 2.0
    else:
        raise NoSignChangeError(f"active still optimal at subsidy {hi / 2}")
    while hi - lo >= tol:
        mid = 0.5 * (lo + hi)
        if probe(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def reference_whittle(
    model: TransitionModel,
    state: BeliefStateId,
    beta: float = 0.999,
    T: int = 40,
    tol: float = 1e-5,
    vi_tol: float = 1e-9,
    method: str = "policy",
) -> float:
    """Whittle index of one belief state by bisection on the subsidy.

    Each probe solves the full discounted problem and reads the sign of the
    passive-minus-active value at ``state``.
    """
    _check_inputs(beta, T, tol)
    if state.u > T:
        raise ValueError(f"u={state.u} beyond truncation {T}")
    arm = _Arm(build_chains(model, T))
    probe = _MarginProbe(arm, state.omega * T + state.u - 1, beta, vi_tol, method)
    return _bisect_sign_change(probe, tol)


def reference_index_table(
    model: TransitionModel,
    beta: float = 0.999,
    T: int = 40,
    tol: float = 1e-5,
    max_u: int | None = None,
    vi_tol: float = 1e-9,
) -> np.ndarray:
    """Bisection index for every state with ``u <= max_u`` (NaN beyond)."""
    _check_inputs(beta, T, tol)
    arm = _Arm(build_chains(model, T))
    max_u = T if max_u is None else min(max_u, T)
    w = np.full((2, T), np.nan)
    for omega in (0, 1):
        for u in range(1, max_u + 1):
            probe = _MarginProbe(arm, omega * T + u - 1, beta, vi_tol, "policy")
            w[omega, u - 1] = _bisect_sign_change(probe, tol)
    return w


def enumerate_threshold_policies(
    chains: BeliefChains, m: float
) -> tuple[ForwardThresholdPolicy, float]:
    """Best forward threshold policy for average reward at subsidy ``m``.

    Ties within ``TIE_TOL`` go to the lexicographically smallest ``(x0, x1)``.
    """
    T = chains.horizon
    if T > ENUMERATION_MAX_T:
        raise ValueError(f"enumeration limited to T <= {ENUMERATION_MAX_T}, got {T}")
    best, best_j = None, -math.inf
    for x0 in range(1, T + 1):
        for x1 in range(1, T + 1):
            policy = ForwardThresholdPolicy(x0, x1)
            j = avg_reward_linear(chains, policy).at(m)
            if j > best_j + TIE_TOL:
                best, best_j = policy, j
    return best, best_j


def _shape_from_pattern(pattern: list[str]) -> PolicyShape:
    runs = [a for i, a in enumerate(pattern) if i == 0 or a != pattern[i - 1]]
    if not runs or runs == ["P"]:
        return PolicyShape.ALL_PASSIVE
    if runs == ["A"]:
        return PolicyShape.ALL_ACTIVE
    if runs == ["A", "P"]:
        return PolicyShape.FORWARD
    if runs == ["P", "A"]:
        return PolicyShape.REVERSE
    if runs == ["P", "A", "P"]:
        return PolicyShape.DUAL
    return PolicyShape.OTHER


def shape_of(table: ValueTable, indifference: float = STRICT_MARGIN) -> PolicyShape:
    """Classify optimal actions read along increasing belief.

    States whose two action values agree within ``indifference`` may take
    either action and are left out, as are groups of equal-belief states
    that disagree, so the simplest consistent shape wins.
    """
    b = table.beliefs.reshape(-1)
    margin = table.margin.reshape(-1)
    order = np.argsort(b, kind="stable")
    pattern = []
    group: list[str] = []
    prev = None
    for i in order:
        label = "P" if margin[i] > indifference else "A" if margin[i] < -indifference else "*"
        if prev is not None and b[i] - prev > BELIEF_TIE_TOL:
            pattern.append(_merge(group))
            group = []
        group.append(label)
        prev = b[i]
    pattern.append(_merge(group))
    return _shape_from_pattern([p for p in pattern if p != "*"])


def _merge(group: list[str]) -> str:
    strict = set(group) - {"*"}
    if len(strict) == 1:
        return strict.pop()
    if len(strict) > 1:
        logger.debug("equal-belief states disagree on the optimal action")
    return "*"


def classify_policy_shape(
    model: TransitionModel, m: float, beta: float, T: int = 40, tol: float = 1e-9
) -> PolicyShape:
    """Shape of the optimal policy at subsidy ``m`` along the belief axis."""
    return shape_of(value_iteration(model, m, beta, T, tol))


def check_indexability(
    model: TransitionModel,
    beta: float,
    m_grid=None,
    T: int = 40,
    tol: float = 1e-9,
) -> IndexabilityReport:
    """Check that the strictly-passive set only grows along ``m_grid``."""
    if m_grid is None:
        m_grid = np.round(np.arange(-10.0, 10.0 + 1e-9, 0.01), 10)
    m_grid = [float(m) for m in m_grid]
    if any(b <= a for a, b in zip(m_grid, m_grid[1:])):
        raise ValueError("m_grid must be strictly ascending")
    if m_grid[0] > -2.0 or m_grid[-1] < 2.0:
        raise ValueError("m_grid must span at least [-2, 2]")
    _check_inputs(beta, T, tol)
    arm = _Arm(build_chains(model, T))
    counts, monotone, first_bad = [], True, None
    prev_set = None
    warm = None
    for m in m_grid:
        table = _solve(arm, m, beta, tol, "policy", warm)
        warm = table.actions
        passive = table.margin.reshape(-1) > STRICT_MARGIN
        if prev_set is not None and np.any(prev_set & ~passive):
            if monotone:
                first_bad = m
            monotone = False
        prev_set = passive
        counts.append(int(passive.sum()))
    return IndexabilityReport(m_grid=m_grid, passive_counts=counts, monotone=monotone, first_violation=first_bad)


def _full_observation_q(model: TransitionModel, m: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    reward = np.array([0.0, 1.0])
    Pp = np.array([[1 - model.p01p, model.p01p], [1 - model.p11p, model.p11p]])
    Pa = np.array([[1 - model.p01a, model.p01a], [1 - model.p11a, model.p11a]])
    # optimal values dominate those of every deterministic policy
    v = np.full(2, -np.inf)
    for acts in ((0, 0), (0, 1), (1, 0), (1, 1)):
        P = np.array([Pa[s] if acts[s] else Pp[s] for s in (0, 1)])
        r = reward + np.array([0.0 if acts[s] else m for s in (0, 1)])
        v = np.maximum(v, np.linalg.solve(np.eye(2) - beta * P, r))
    qp = reward + m + beta * Pp @ v
    qa = reward + beta * Pa @ v
    return qp, qa


def full_observation_whittle(
    model: TransitionModel, beta: float = 0.999, tol: float = 1e-7
) -> tuple[float, float]:
    """Whittle indices of latent states 0 and 1 when the state is always seen."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {beta}")
    out = []
    for s in (0, 1):
        def probe(m, s=s):
            qp, qa = _full_observation_q(model, m, beta)
            return qp[s] - qa[s]

        out.append(_bisect_sign_change(probe, tol))
    return out[0], out[1]
