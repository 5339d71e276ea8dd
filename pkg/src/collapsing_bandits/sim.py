"""Cohort simulation: N arms, k actions per round, several planning policies.

Round ``t`` works as follows. The reward is the number of arms whose latent
state is 1. The policy then picks ``k`` arms from the current belief states.
Acting on an arm reveals its current latent state and resets its belief to the
head of the matching chain; passive arms move one step down their chain
(frozen at the horizon). Finally every latent state moves under the active or
passive transition probabilities.

All policies in a trial see the same per-arm, per-round uniform draws, so
differences between policies are not muddied by transition noise.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from collapsing_bandits.belief import TransitionModel, build_chains, stationary_belief
from collapsing_bandits.reference import full_observation_whittle, reference_index_table
from collapsing_bandits.whittle import compute_index_table

logger = logging.getLogger(__name__)

POLICIES = ("threshold_whittle", "reference", "myopic", "random", "oracle", "never_act")


@dataclass(frozen=True)
class SimulationConfig:
    n_arms: int
    budget: int
    horizon: int = 180
    trials: int = 50
    seed: int = 0
    beta: float = 0.999
    policies: tuple[str, ...] = ("threshold_whittle", "myopic", "random")
    threads: int = 1

    def __post_init__(self):
        if self.n_arms < 1:
            raise ValueError("need at least one arm")
        if not 0 <= self.budget <= self.n_arms:
            raise ValueError(f"budget {self.budget} outside 0..{self.n_arms}")
        if self.horizon < 1 or self.trials < 1:
            raise ValueError("horizon and trials must be >= 1")
        unknown = set(self.policies) - set(POLICIES)
        if unknown:
            raise ValueError(f"unknown policies: {sorted(unknown)}")


class CohortPlan:
    """Per-arm arrays shared by every trial: parameters, chains and indices.

    Index tables are built on first use and reused afterwards.
    """

    def __init__(self, models: Sequence[TransitionModel], horizon: int, beta: float = 0.999):
        self.models = list(models)
        self.horizon = horizon
        self.beta = beta
        params = np.array([m.as_tuple() for m in self.models], dtype=float).reshape(-1, 4)
        self.p01p, self.p11p, self.p01a, self.p11a = params.T
        self.b_star = np.array([stationary_belief(m) for m in self.models])
        self.beliefs = np.stack([build_chains(m, horizon).values for m in self.models])
        self._tables: dict[str, np.ndarray] = {}

    @property
    def n_arms(self) -> int:
        return len(self.models)

    def whittle(self) -> np.ndarray:
        if "whittle" not in self._tables:
            self._tables["whittle"] = np.stack(
                [compute_index_table(build_chains(m, self.horizon)).w for m in self.models]
            )
        return self._tables["whittle"]

    def reference(self) -> np.ndarray:
        if "reference" not in self._tables:
            T = max(self.horizon, 2)
            tables = [reference_index_table(m, self.beta, T) for m in self.models]
            self._tables["reference"] = np.stack([t[:, : self.horizon] for t in tables])
        return self._tables["reference"]

    def oracle(self) -> np.ndarray:
        """Fully observed indices, shape (N, 2), one per latent state."""
        if "oracle" not in self._tables:
            self._tables["oracle"] = np.array(
                [full_observation_whittle(m, self.beta) for m in self.models]
            )
        return self._tables["oracle"]

    def prepare(self, policies: Sequence[str]) -> None:
        """Build whatever tables the given policies will read."""
        if "threshold_whittle" in policies:
            self.whittle()
        if "reference" in policies:
            self.reference()
        if "oracle" in policies:
            self.oracle()


@dataclass
class Cohort:
    """Mutable state of one simulated cohort.

    ``latent`` is hidden from every policy except the oracle.
    """

    plan: CohortPlan
    latent: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    t: int = 1

    def current_beliefs(self) -> np.ndarray:
        return self.plan.beliefs[np.arange(self.plan.n_arms), self.omega, self.u - 1]


@dataclass
class TrialDraws:
    """Uniform draws consumed by the latent dynamics of one trial."""

    init: np.ndarray  # (2, N): initial state, then first transition
    transitions: np.ndarray  # (T, N)

    @classmethod
    def sample(cls, rng: np.random.Generator, n_arms: int, horizon: int) -> "TrialDraws":
        return cls(init=rng.random((2, n_arms)), transitions=rng.random((horizon, n_arms)))


def _next_latent(plan: CohortPlan, latent: np.ndarray, active: np.ndarray, draw: np.ndarray) -> np.ndarray:
    p_active = np.where(latent == 1, plan.p11a, plan.p01a)
    p_passive = np.where(latent == 1, plan.p11p, plan.p01p)
    return (draw < np.where(active, p_active, p_passive)).astype(np.int8)


def init_cohort(plan: CohortPlan, draws: TrialDraws) -> Cohort:
    """Start every arm as if it had been acted on just before round 1.

    The state at time 0 is drawn from the stationary belief and treated as
    observed; the move into round 1 uses the active probabilities so that the
    round-1 belief, the head of the observed chain, is exact.
    """
    s0 = (draws.init[0] < plan.b_star).astype(np.int8)
    s1 = _next_latent(plan, s0, np.ones(plan.n_arms, dtype=bool), draws.init[1])
    return Cohort(plan=plan, latent=s1, omega=s0.astype(np.int64), u=np.ones(plan.n_arms, dtype=np.int64))


def step(cohort: Cohort, actions: np.ndarray, draw: np.ndarray, budget: int | None = None):
    """Advance one round.

    Returns ``(observations, reward)`` where ``observations`` maps each
    acted-on arm to the latent state it revealed and ``reward`` is the number
    of arms in state 1 during this round.
    """
    actions = np.asarray(actions).astype(bool)
    if budget is not None and int(actions.sum()) != budget:
        raise ValueError(f"expected exactly {budget} actions, got {int(actions.sum())}")
    reward = int(cohort.latent.sum())
    seen = cohort.latent[actions]
    observations = dict(zip(np.nonzero(actions)[0].tolist(), seen.tolist()))
    T = cohort.plan.horizon
    cohort.omega = np.where(actions, cohort.latent, cohort.omega)
    cohort.u = np.where(actions, 1, np.minimum(cohort.u + 1, T))
    cohort.latent = _next_latent(cohort.plan, cohort.latent, actions, draw)
    cohort.t += 1
    return observations, reward


def _top_k(priority: np.ndarray, k: int) -> np.ndarray:
    """Indicator of the k largest priorities; ties go to the lowest arm id."""
    chosen = np.argsort(-priority, kind="stable")[:k]
    out = np.zeros(priority.shape[0], dtype=bool)
    out[chosen] = True
    return out


def policy_threshold_whittle(cohort: Cohort, k: int, rng=None) -> np.ndarray:
    w = cohort.plan.whittle()
    return _top_k(w[np.arange(cohort.plan.n_arms), cohort.omega, cohort.u - 1], k)


def policy_reference(cohort: Cohort, k: int, rng=None) -> np.ndarray:
    w = cohort.plan.reference()
    return _top_k(w[np.arange(cohort.plan.n_arms), cohort.omega, cohort.u - 1], k)


def myopic_gain(plan: CohortPlan, b: np.ndarray) -> np.ndarray:
    """Expected one-step rise in belief from acting rather than waiting."""
    return b * (plan.p11a - plan.p11p) + (1.0 - b) * (plan.p01a - plan.p01p)


def policy_myopic(cohort: Cohort, k: int, rng=None) -> np.ndarray:
    return _top_k(myopic_gain(cohort.plan, cohort.current_beliefs()), k)


def policy_random(cohort: Cohort, k: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(cohort.plan.n_arms, dtype=bool)
    out[rng.choice(cohort.plan.n_arms, size=k, replace=False)] = True
    return out


def policy_oracle(cohort: Cohort, k: int, rng=None) -> np.ndarray:
    idx = cohort.plan.oracle()
    return _top_k(idx[np.arange(cohort.plan.n_arms), cohort.latent], k)


def policy_never_act(cohort: Cohort, k: int = 0, rng=None) -> np.ndarray:
    return np.zeros(cohort.plan.n_arms, dtype=bool)


POLICY_FUNCS: dict[str, Callable] = {
    "threshold_whittle": policy_threshold_whittle,
    "reference": policy_reference,
    "myopic": policy_myopic,
    "random": policy_random,
    "oracle": policy_oracle,
    "never_act": policy_never_act,
}


@dataclass
class Trajectory:
    """One simulated trial of one policy."""

    rewards: np.ndarray  # (T,)
    actions: np.ndarray  # (T, N) bool

    @property
    def total(self) -> int:
        return int(self.rewards.sum())


def simulate(
    plan: CohortPlan,
    policy: str,
    budget: int,
    draws: TrialDraws,
    rng: np.random.Generator | None = None,
    recorder: Callable[[Cohort], None] | None = None,
) -> Trajectory:
    """Run one trial of ``policy``; ``recorder`` sees the cohort before each round."""
    k = 0 if policy == "never_act" else budget
    choose = POLICY_FUNCS[policy]
    cohort = init_cohort(plan, draws)
    T = draws.transitions.shape[0]
    rewards = np.zeros(T, dtype=np.int64)
    actions = np.zeros((T, plan.n_arms), dtype=bool)
    for t in range(T):
        if recorder is not None:
            recorder(cohort)
        act = choose(cohort, k, rng)
        actions[t] = act
        _, rewards[t] = step(cohort, act, draws.transitions[t], budget=k)
    return Trajectory(rewards=rewards, actions=actions)


def _trial_seeds(seed: int, trials: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(trials)


def _run_one_trial(plan: CohortPlan, config: SimulationConfig, seq: np.random.SeedSequence, policies):
    dyn_seq, pol_seq = seq.spawn(2)
    draws = TrialDraws.sample(np.random.default_rng(dyn_seq), plan.n_arms, config.horizon)
    out = {}
    for name in policies:
        rng = np.random.default_rng(pol_seq)
        out[name] = simulate(plan, name, config.budget, draws, rng).rewards
    return out


@dataclass
class TrajectoryResult:
    """Per-policy aggregate over trials."""

    policy: str
    totals: np.ndarray = field(repr=False)  # (trials,)
    per_round_mean: np.ndarray = field(repr=False)  # (T,)

    @property
    def mean(self) -> float:
        return float(self.totals.mean())

    @property
    def stderr(self) -> float:
        n = self.totals.shape[0]
        if n < 2:
            return 0.0
        return float(self.totals.std(ddof=1) / math.sqrt(n))


def run_trials(
    models: Sequence[TransitionModel] | CohortPlan, config: SimulationConfig
) -> dict[str, TrajectoryResult]:
    """Simulate every configured policy plus the never-act and oracle baselines."""
    plan = models if isinstance(models, CohortPlan) else CohortPlan(models, config.horizon, config.beta)
    if plan.n_arms != config.n_arms:
        raise ValueError(f"config says {config.n_arms} arms, cohort has {plan.n_arms}")
    policies = list(dict.fromkeys([*config.policies, "never_act", "oracle"]))
    plan.prepare(policies)
    seeds = _trial_seeds(config.seed, config.trials)
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            per_trial = list(
                pool.map(_run_one_trial, [plan] * len(seeds), [config] * len(seeds), seeds, [policies] * len(seeds))
            )
    else:
        per_trial = [_run_one_trial(plan, config, s, policies) for s in seeds]
    results = {}
    for name in policies:
        rewards = np.stack([trial[name] for trial in per_trial])
        results[name] = TrajectoryResult(
            policy=name, totals=rewards.sum(axis=1), per_round_mean=rewards.mean(axis=0)
        )
    return results


def intervention_benefit(results: dict[str, TrajectoryResult]) -> dict[str, float | None]:
    """Mean reward rescaled so never-act scores 0 and the oracle 100.

    Every policy maps to ``None`` when the oracle does not beat never-act.
    """
    if "never_act" not in results or "oracle" not in results:
        raise KeyError("intervention benefit needs never_act and oracle runs")
    base = results["never_act"].mean
    span = results["oracle"].mean - base
    if span <= 0:
        logger.warning("oracle does not beat never-act (span %.3g); benefit undefined", span)
        return {name: None for name in results}
    return {name: 100.0 * (res.mean - base) / span for name, res in results.items()}
