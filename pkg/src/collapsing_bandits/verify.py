"""Checks that pit the fast index sweep against the reference solvers.

Each check returns a small report dataclass with a ``passed`` flag and a
``to_dict`` for JSON output; failing cases are kept for inspection.
"""

from __future__ import annotations

import collections
from dataclasses import asdict, dataclass, field

import numpy as np

from collapsing_bandits.belief import (
    BeliefTrend,
    ModelValidationError,
    TransitionModel,
    build_chains,
    check_forward_condition,
    classify_trend,
    validate_model,
)
from collapsing_bandits.reference import (
    PolicyShape,
    check_indexability,
    classify_policy_shape,
    reference_index_table,
    truncation_horizon,
)
from collapsing_bandits.whittle import compute_index_table

SCAN_SUBSIDIES = (-0.5, 0.0, 0.25, 0.5, 1.0)
SCAN_DISCOUNTS = (0.5, 0.9, 0.99)
MAX_DUMPS = 20


def sample_forward_models(
    rng: np.random.Generator, n: int, beta: float = 0.2, T: int = 40, require_nib: bool = True
) -> list[TransitionModel]:
    """Strict-natural models passing the forward condition at ``beta``.

    With ``require_nib`` the belief chains must also be non-increasing.
    """
    out = []
    while len(out) < n:
        try:
            model = validate_model(*rng.uniform(0.0, 1.0, size=4))
        except ModelValidationError:
            continue
        if not check_forward_condition(model, beta):
            continue
        if require_nib and classify_trend(build_chains(model, T)) is not BeliefTrend.NIB:
            continue
        out.append(model)
    return out


@dataclass
class AgreementReport:
    n_models: int
    n_states: int
    max_abs_diff: float
    fraction_within_fine: float
    passed: bool
    worst: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def index_agreement(
    models: list[TransitionModel],
    T: int = 40,
    max_u: int = 20,
    beta: float = 0.999,
    coarse: float = 0.05,
    fine: float = 0.02,
    min_fraction: float = 0.95,
    tol: float = 1e-5,
) -> AgreementReport:
    """Compare sweep indices with binary-search reference indices for ``u <= max_u``."""
    diffs, worst = [], []
    for i, model in enumerate(models):
        fast = compute_index_table(build_chains(model, T)).w[:, :max_u]
        slow = reference_index_table(model, beta, T, tol, max_u=max_u)[:, :max_u]
        d = np.abs(fast - slow)
        diffs.append(d.ravel())
        omega, u = np.unravel_index(np.argmax(d), d.shape)
        worst.append(
            {
                "model_index": i,
                "model": list(model.as_tuple()),
                "omega": int(omega),
                "u": int(u) + 1,
                "threshold_whittle": float(fast[omega, u]),
                "reference": float(slow[omega, u]),
                "abs_diff": float(d[omega, u]),
            }
        )
    d = np.concatenate(diffs) if diffs else np.zeros(0)
    max_diff = float(d.max()) if d.size else 0.0
    within = float((d <= fine).mean()) if d.size else 1.0
    worst.sort(key=lambda w: -w["abs_diff"])
    return AgreementReport(
        n_models=len(models),
        n_states=int(d.size),
        max_abs_diff=max_diff,
        fraction_within_fine=within,
        passed=max_diff <= coarse and within >= min_fraction,
        worst=worst[:5],
    )


@dataclass
class IndexabilitySuiteReport:
    n_models: int
    beta: float
    n_monotone: int
    passed: bool
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def indexability_suite(models: list[TransitionModel], beta: float, T: int = 40, m_grid=None) -> IndexabilitySuiteReport:
    failures = []
    for i, model in enumerate(models):
        report = check_indexability(model, beta, m_grid=m_grid, T=T)
        if not report.monotone:
            failures.append({"model_index": i, "model": list(model.as_tuple()), "first_violation": report.first_violation})
    return IndexabilitySuiteReport(
        n_models=len(models),
        beta=beta,
        n_monotone=len(models) - len(failures),
        passed=not failures,
        failures=failures[:MAX_DUMPS],
    )


@dataclass
class ShapeScanReport:
    n_models: int
    subsidies: list
    discounts: list
    counts: dict
    dual_hits: int
    passed: bool
    counterexamples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def shape_scan(
    n_models: int,
    seed: int = 0,
    subsidies=SCAN_SUBSIDIES,
    discounts=SCAN_DISCOUNTS,
    low: float = 0.001,
    high: float = 0.999,
) -> ShapeScanReport:
    """Classify the optimal policy shape over random relaxed models.

    Passes when no setting yields a dual policy (act only inside a belief
    interval). Truncation depth is chosen per model so that the last chain
    state sits on the stationary belief.
    """
    rng = np.random.default_rng(seed)
    counts = collections.Counter({shape.value: 0 for shape in PolicyShape})
    hits = []
    for i in range(n_models):
        model = validate_model(*rng.uniform(low, high, size=4), strict=False)
        T = truncation_horizon(model)
        for beta in discounts:
            for m in subsidies:
                shape = classify_policy_shape(model, m, beta, T)
                counts[shape.value] += 1
                if shape is PolicyShape.DUAL:
                    hits.append({"model_index": i, "model": list(model.as_tuple()), "m": m, "beta": beta, "T": T})
    return ShapeScanReport(
        n_models=n_models,
        subsidies=list(subsidies),
        discounts=list(discounts),
        counts=dict(counts),
        dual_hits=len(hits),
        passed=not hits,
        counterexamples=hits[:MAX_DUMPS],
    )
