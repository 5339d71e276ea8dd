"""Cohort files, synthetic cohort generators and matrix perturbation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from collapsing_bandits.belief import (
    ModelValidationError,
    TransitionModel,
    check_forward_condition,
    validate_model,
)

COHORT_HEADER = ["arm_id", "p01p", "p11p", "p01a", "p11a"]
BASE_HEADER = ["arm_id", "q01", "q11"]
MAX_ATTEMPTS = 1_000_000
CLAMP_EPS = 1e-3

# (p01p, p11p, p01a, p11a); see GeneratorSpec.templates to override
SELF_CORRECTING = (0.60, 0.75, 0.75, 0.90)
NON_RECOVERABLE = (0.03, 0.90, 0.12, 0.97)
TEMPLATE_JITTER = 0.02


class CohortFormatError(ValueError):
    """A cohort file could not be parsed or failed validation."""


class GenerationError(RuntimeError):
    """Rejection sampling could not satisfy the requested cohort."""


def fmt(x: float) -> str:
    return f"{x:.12g}"


def _read_rows(path, header):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise CohortFormatError(f"{path}: empty file") from None
        if [c.strip() for c in first] != header:
            raise CohortFormatError(f"{path}: line 1: header must be {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortFormatError(
                    f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            yield reader.line_num, [c.strip() for c in row]


def read_cohort(path, strict: bool = True) -> list[tuple[str, TransitionModel]]:
    """Parse a cohort CSV into ``(arm_id, model)`` pairs in file order."""
    out, seen = [], set()
    for line, (arm_id, *probs) in _read_rows(path, COHORT_HEADER):
        if arm_id in seen:
            raise CohortFormatError(f"{path}: line {line}: duplicate arm_id {arm_id!r}")
        seen.add(arm_id)
        try:
            values = [float(p) for p in probs]
        except ValueError:
            raise CohortFormatError(f"{path}: line {line}: non-numeric probability in {probs}") from None
        try:
            out.append((arm_id, validate_model(*values, strict=strict)))
        except ModelValidationError as exc:
            raise CohortFormatError(f"{path}: line {line}: arm {arm_id!r}: {exc}") from None
    return out


def ingest_cohort(path, strict: bool = True) -> list[TransitionModel]:
    return [model for _, model in read_cohort(path, strict)]


def format_cohort(models: Sequence[TransitionModel], arm_ids: Sequence[str] | None = None) -> str:
    """Cohort CSV text with probabilities at 12 significant digits."""
    if arm_ids is None:
        arm_ids = [str(i) for i in range(len(models))]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COHORT_HEADER)
    for arm_id, model in zip(arm_ids, models):
        writer.writerow([arm_id, *(fmt(p) for p in model.as_tuple())])
    return buf.getvalue()


def write_cohort(path, models: Sequence[TransitionModel], arm_ids: Sequence[str] | None = None) -> None:
    Path(path).write_text(format_cohort(models, arm_ids))


def read_base_matrices(path) -> list[tuple[str, float, float]]:
    """Rows ``arm_id, q01, q11`` of observed (action-agnostic) transition rates."""
    out = []
    for line, (arm_id, q01, q11) in _read_rows(path, BASE_HEADER):
        try:
            out.append((arm_id, float(q01), float(q11)))
        except ValueError:
            raise CohortFormatError(f"{path}: line {line}: non-numeric rate") from None
    return out


def perturb_matrix(base: tuple[float, float], deltas: Sequence[float], eps: float = CLAMP_EPS) -> TransitionModel:
    """Split one observed transition matrix into passive and active versions.

    Passive rates are lowered by ``deltas[0:2]`` and active rates raised by
    ``deltas[2:4]``, then each is clamped to ``[eps, 1 - eps]``.
    """
    q01, q11 = base
    if not (0.0 < q01 < 1.0 and 0.0 < q11 < 1.0):
        raise ModelValidationError(f"base rates {base} outside (0, 1)")
    if len(deltas) != 4 or any(d < 0 for d in deltas):
        raise ValueError("need four non-negative deltas")
    d1, d2, d3, d4 = deltas
    raw = (q01 - d1, q11 - d2, q01 + d3, q11 + d4)
    return validate_model(*(min(max(p, eps), 1.0 - eps) for p in raw), strict=True)


def _uniform_natural(rng: np.random.Generator, low=0.0, high=1.0) -> TransitionModel:
    for _ in range(MAX_ATTEMPTS):
        p = rng.uniform(low, high, size=4)
        try:
            return validate_model(*p)
        except ModelValidationError:
            continue
    raise GenerationError(f"no strict-natural model in [{low}, {high}] after {MAX_ATTEMPTS} draws")


def _jittered(rng: np.random.Generator, template, jitter: float) -> TransitionModel:
    for _ in range(MAX_ATTEMPTS):
        p = np.clip(np.asarray(template) + rng.uniform(-jitter, jitter, size=4), CLAMP_EPS, 1 - CLAMP_EPS)
        try:
            return validate_model(*p)
        except ModelValidationError:
            continue
    raise GenerationError(f"template {template} cannot be jittered into a valid model")


def _state_one_responsive(rng: np.random.Generator) -> TransitionModel:
    low = np.sort(rng.uniform(0.30, 0.32, size=3))
    # the smallest draw must be p01p; the other two may go either way
    p11p, p01a = (low[1], low[2]) if rng.random() < 0.5 else (low[2], low[1])
    return validate_model(low[0], p11p, p01a, rng.uniform(0.70, 0.72))


def _mix(rng, n: int, fraction: float, draw_in, draw_out) -> list[TransitionModel]:
    n_in = int(round(fraction * n))
    models = [draw_in() for _ in range(n_in)] + [draw_out() for _ in range(n - n_in)]
    order = rng.permutation(n)
    return [models[i] for i in order]


GENERATORS = (
    "self_correcting_mix",
    "entropy_sweep",
    "state_one_responsive",
    "threshold_optimal_mix",
    "uniform_natural",
)


@dataclass(frozen=True)
class GeneratorSpec:
    """Which synthetic cohort to draw, with its parameters.

    Parse from text like ``self_correcting_mix:fraction=0.6`` or
    ``threshold_optimal_mix:fraction=0.5,beta=0.2``.
    """

    kind: str
    n: int
    seed: int = 0
    params: dict = field(default_factory=dict)
    templates: tuple = (SELF_CORRECTING, NON_RECOVERABLE)

    @classmethod
    def parse(cls, text: str, n: int, seed: int = 0) -> "GeneratorSpec":
        kind, _, rest = text.partition(":")
        kind = kind.strip().replace("-", "_")
        params = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"generator parameter {item!r} is not key=value")
            params[key.strip()] = float(value)
        return cls(kind=kind, n=n, seed=seed, params=params)

    def describe(self) -> str:
        args = ",".join(f"{k}={fmt(v)}" for k, v in sorted(self.params.items()))
        return f"{self.kind}:{args}" if args else self.kind


def generate_cohort(spec: GeneratorSpec) -> list[TransitionModel]:
    """Draw ``spec.n`` strict-natural models from the requested family."""
    if spec.kind not in GENERATORS:
        raise ValueError(f"unknown generator {spec.kind!r}; choose from {', '.join(GENERATORS)}")
    if spec.n < 1:
        raise ValueError("sample count must be >= 1")
    fraction = spec.params.get("fraction", 0.0)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "uniform_natural":
        return [_uniform_natural(rng) for _ in range(spec.n)]
    if spec.kind == "entropy_sweep":
        x = spec.params["x"]
        if not 0.0 <= x <= 0.9:
            raise ValueError(f"x={x} outside [0, 0.9]")
        return [_uniform_natural(rng, x, x + 0.1) for _ in range(spec.n)]
    if spec.kind == "self_correcting_mix":
        good, bad = spec.templates
        return _mix(
            rng,
            spec.n,
            fraction,
            lambda: _jittered(rng, good, TEMPLATE_JITTER),
            lambda: _jittered(rng, bad, TEMPLATE_JITTER),
        )
    if spec.kind == "state_one_responsive":
        return _mix(rng, spec.n, fraction, lambda: _state_one_responsive(rng), lambda: _uniform_natural(rng))

    beta = spec.params.get("beta", 0.999)

    def draw(want: bool) -> TransitionModel:
        for _ in range(MAX_ATTEMPTS):
            model = _uniform_natural(rng)
            if check_forward_condition(model, beta) == want:
                return model
        raise GenerationError(f"no model with forward condition {want} at beta={beta}")

    return _mix(rng, spec.n, fraction, lambda: draw(True), lambda: draw(False))
