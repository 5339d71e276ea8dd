import numpy as np
import pytest

from collapsing_bandits.belief import (
    BeliefStateId,
    BeliefTrend,
    build_chains,
    check_forward_condition,
    check_reverse_condition,
    classify_trend,
    validate_model,
)
from collapsing_bandits.reference import (
    NoSignChangeError,
    PolicyShape,
    _Arm,
    _bisect_sign_change,
    check_indexability,
    classify_policy_shape,
    enumerate_threshold_policies,
    full_observation_whittle,
    reference_index_table,
    reference_whittle,
    truncation_horizon,
    value_iteration,
)
from collapsing_bandits.whittle import compute_index_table

from conftest import random_natural_models


def dense_policy_value(model, active, m, beta, T):
    """Solve (I - beta P) v = r for a fixed policy with a dense matrix."""
    chains = build_chains(model, T)
    b = chains.values.reshape(-1)
    n = 2 * T
    P = np.zeros((n, n))
    r = b.copy()
    for i in range(n):
        omega, u = divmod(i, T)
        if active[i]:
            P[i, T] += b[i]
            P[i, 0] += 1 - b[i]
        else:
            P[i, omega * T + min(u + 1, T - 1)] = 1.0
            r[i] += m
    return np.linalg.solve(np.eye(n) - beta * P, r)


def forward_models_at(beta, rng, count):
    """Strict-natural NIB models with a tiny active gap so the forward condition holds at beta."""
    out = []
    while len(out) < count:
        p01p, p11p = np.sort(rng.uniform(0.02, 0.98, size=2))
        gap = (p11p - p01p) * (1 - beta) * rng.uniform(0.1, 0.9)
        lo = max(p01p, p11p - gap)
        if lo >= 1 - gap:
            continue
        p01a = rng.uniform(lo, 1 - gap)
        model = validate_model(p01p, p11p, p01a, p01a + gap)
        if check_forward_condition(model, beta) and classify_trend(build_chains(model, 40)) is BeliefTrend.NIB:
            out.append(model)
    return out


class TestValueIteration:
    def test_large_subsidy_all_passive(self, m1):
        table = value_iteration(m1, 10.0, 0.9, 20)
        assert table.actions.sum() == 0

    def test_negative_subsidy_all_active(self, m1):
        table = value_iteration(m1, -10.0, 0.9, 20)
        assert table.actions.sum() == 40

    def test_m1_between_indices(self, m1):
        table = value_iteration(m1, 0.35, 0.999, 40)
        assert table.actions[1, 0] == 0
        assert table.actions[0, 0] == 1

    @pytest.mark.parametrize("beta", [0.0, 0.5, 0.9, 0.99])
    def test_methods_agree(self, beta):
        rng = np.random.default_rng(61)
        for model in random_natural_models(rng, 10):
            m = rng.uniform(-0.5, 1.0)
            a = value_iteration(model, m, beta, 15, tol=1e-10, method="value")
            b = value_iteration(model, m, beta, 15, tol=1e-10, method="policy")
            np.testing.assert_allclose(a.v, b.v, atol=1e-7 / (1 - beta))
            clear = np.abs(b.margin) > 1e-6
            assert np.array_equal(a.actions[clear], b.actions[clear])

    def test_structured_evaluation_matches_dense_solve(self):
        rng = np.random.default_rng(67)
        for model in random_natural_models(rng, 30):
            T = int(rng.integers(2, 25))
            active = rng.random(2 * T) < 0.5
            m, beta = rng.uniform(-1, 1), rng.uniform(0.1, 0.999)
            arm = _Arm(build_chains(model, T))
            got = arm.evaluate(active.tolist(), m, beta)
            want = dense_policy_value(model, active, m, beta, T)
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    def test_bellman_operator_contracts(self):
        rng = np.random.default_rng(71)
        for model in random_natural_models(rng, 20):
            arm = _Arm(build_chains(model, 12))
            beta = rng.uniform(0.1, 0.99)
            v, w = rng.normal(size=24) * 5, rng.normal(size=24) * 5
            tv = np.maximum(*arm.q_values(v, 0.3, beta))
            tw = np.maximum(*arm.q_values(w, 0.3, beta))
            assert np.max(np.abs(tv - tw)) <= beta * np.max(np.abs(v - w)) + 1e-12

    def test_residual_below_tolerance(self, m1):
        for method in ("value", "policy"):
            table = value_iteration(m1, 0.2, 0.95, 10, tol=1e-9, method=method)
            assert table.residual < 1e-9 * max(1, np.abs(table.v).max())

    def test_bad_inputs(self, m1):
        with pytest.raises(ValueError):
            value_iteration(m1, 0.0, 1.0, 10)
        with pytest.raises(ValueError):
            value_iteration(m1, 0.0, 0.5, 1)
        with pytest.raises(ValueError):
            value_iteration(m1, 0.0, 0.5, 10, method="simplex")


class TestReferenceWhittle:
    def test_m1_heads(self, m1):
        assert reference_whittle(m1, BeliefStateId(1, 1)) == pytest.approx(11 / 35, abs=0.02)
        assert reference_whittle(m1, BeliefStateId(0, 1)) == pytest.approx(17 / 44, abs=0.02)

    def test_margin_monotone_in_subsidy(self):
        rng = np.random.default_rng(73)
        for model in random_natural_models(rng, 10):
            margins = [value_iteration(model, m, 0.99, 20).margin for m in np.linspace(-1, 2, 61)]
            steps = np.diff(np.stack(margins), axis=0)
            assert np.all(steps >= -1e-7)

    def test_no_sign_change(self):
        with pytest.raises(NoSignChangeError):
            _bisect_sign_change(lambda m: -1.0, 1e-5)
        with pytest.raises(NoSignChangeError):
            _bisect_sign_change(lambda m: 1.0, 1e-5)

    def test_bisection_finds_root(self):
        assert _bisect_sign_change(lambda m: m - 0.123, 1e-9) == pytest.approx(0.123, abs=1e-8)
        # roots outside the starting bracket need the doubling phase
        assert _bisect_sign_change(lambda m: m - 50.0, 1e-6) == pytest.approx(50.0, abs=1e-5)

    def test_truncation_insensitive(self):
        rng = np.random.default_rng(79)
        beta = 0.9
        for model in random_natural_models(rng, 5):
            short = reference_index_table(model, beta, 40, max_u=10)
            long = reference_index_table(model, beta, 80, max_u=10)
            bound = model.passive_gap**40 / (1 - beta)
            assert np.nanmax(np.abs(short[:, :10] - long[:, :10])) < bound + 2e-5


class TestEnumeration:
    def test_guard(self, m1):
        with pytest.raises(ValueError):
            enumerate_threshold_policies(build_chains(m1, 65), 0.0)

    def test_ties_go_to_smallest(self):
        from collapsing_bandits.belief import BeliefChains

        model = validate_model(0.2, 0.6, 0.5, 0.8)
        flat = BeliefChains(model, np.full((2, 3), 0.5), 0.5)
        # with no subsidy every policy earns 0.5
        policy, j = enumerate_threshold_policies(flat, 0.0)
        assert (policy.x0, policy.x1) == (1, 1)
        assert j == pytest.approx(0.5)

    def test_agrees_with_value_iteration(self):
        rng = np.random.default_rng(83)
        T = 20
        agree = total = 0
        for model in forward_models_at(0.999, rng, 20):
            chains = build_chains(model, T)
            w = compute_index_table(chains).w[:, : T - 1]
            for m in rng.uniform(w.min() - 0.05, w.max() + 0.05, size=5):
                best, _ = enumerate_threshold_policies(chains, m)
                u = np.arange(1, T + 1)
                expected = np.stack([u >= best.x0, u >= best.x1]).astype(int)
                got = value_iteration(model, m, 0.999, T).actions
                if (best.x0, best.x1) == (T, T):
                    # the truncated family cannot express never acting
                    expected[:, T - 1] = got[:, T - 1]
                agree += np.array_equal(expected, got)
                total += 1
        assert agree / total >= 0.95, (agree, total)


class TestPolicyShape:
    def test_forward_condition_gives_forward(self):
        rng = np.random.default_rng(89)
        for beta in (0.2, 0.5):
            models = [m for m in random_natural_models(rng, 400) if check_forward_condition(m, beta)][:15]
            assert models
            for model in models:
                for m in np.linspace(-0.5, 1.5, 9):
                    shape = classify_policy_shape(model, m, beta, truncation_horizon(model))
                    assert shape in (PolicyShape.FORWARD, PolicyShape.ALL_ACTIVE, PolicyShape.ALL_PASSIVE)

    def test_reverse_condition_gives_reverse(self):
        rng = np.random.default_rng(97)
        found = 0
        while found < 15:
            model = validate_model(*rng.uniform(0.01, 0.99, size=4), strict=False)
            beta = 0.5
            if not check_reverse_condition(model, beta):
                continue
            found += 1
            for m in np.linspace(-0.5, 1.5, 9):
                shape = classify_policy_shape(model, m, beta, truncation_horizon(model))
                assert shape in (PolicyShape.REVERSE, PolicyShape.ALL_ACTIVE, PolicyShape.ALL_PASSIVE)

    def test_reverse_example(self):
        model = validate_model(0.30, 0.35, 0.40, 0.95)
        shapes = {classify_policy_shape(model, m, 0.5, 30) for m in np.linspace(-0.5, 1.0, 31)}
        assert PolicyShape.REVERSE in shapes
        assert shapes <= {PolicyShape.REVERSE, PolicyShape.ALL_ACTIVE, PolicyShape.ALL_PASSIVE}

    def test_no_dual_small_scan(self):
        rng = np.random.default_rng(101)
        hits = []
        for _ in range(300):
            model = validate_model(*rng.uniform(0.001, 0.999, size=4), strict=False)
            T = truncation_horizon(model)
            for beta in (0.5, 0.9, 0.99):
                for m in (-0.5, 0.0, 0.25, 0.5, 1.0):
                    shape = classify_policy_shape(model, m, beta, T)
                    if shape in (PolicyShape.DUAL, PolicyShape.OTHER):
                        hits.append((model, m, beta, shape))
        assert hits == []

    def test_pattern_reading(self):
        from collapsing_bandits.reference import _shape_from_pattern as shape

        assert shape(list("AAPP")) is PolicyShape.FORWARD
        assert shape(list("PPA")) is PolicyShape.REVERSE
        assert shape(list("PAP")) is PolicyShape.DUAL
        assert shape(list("APA")) is PolicyShape.OTHER
        assert shape([]) is PolicyShape.ALL_PASSIVE
        assert shape(list("AAA")) is PolicyShape.ALL_ACTIVE


class TestIndexability:
    def test_m1_monotone(self, m1):
        report = check_indexability(m1, 0.2, T=20)
        assert report.monotone
        assert report.passive_counts[0] == 0
        assert report.passive_counts[-1] == 40
        assert report.m_grid[0] == -10.0 and report.m_grid[-1] == 10.0

    def test_detects_non_monotone(self, m1, monkeypatch):
        import collapsing_bandits.reference as ref

        real = ref._solve
        calls = {"n": 0}

        def flaky(arm, m, beta, tol, method, warm):
            table = real(arm, m, beta, tol, method, warm)
            calls["n"] += 1
            if calls["n"] == 4:
                # pretend passive stopped being optimal everywhere
                return ref.ValueTable(table.m, beta, table.beliefs, table.v, table.q_passive - 100, table.q_active, 0.0, 1)
            return table

        monkeypatch.setattr(ref, "_solve", flaky)
        report = check_indexability(m1, 0.2, m_grid=[-2.0, 0.5, 2.0, 3.0], T=5)
        assert not report.monotone
        assert report.first_violation == 3.0

    def test_grid_validation(self, m1):
        with pytest.raises(ValueError):
            check_indexability(m1, 0.2, m_grid=[0.0, 1.0])
        with pytest.raises(ValueError):
            check_indexability(m1, 0.2, m_grid=[2.0, -2.0])


class TestFullObservation:
    def test_equal_matrices_index_zero(self):
        model = validate_model(0.2, 0.6, 0.2, 0.6, strict=False)
        i0, i1 = full_observation_whittle(model, 0.9)
        assert i0 == pytest.approx(0.0, abs=1e-6)
        assert i1 == pytest.approx(0.0, abs=1e-6)

    def test_m1_regression(self, m1):
        i0, i1 = full_observation_whittle(m1, 0.999)
        assert i0 > i1
        assert i0 == pytest.approx(0.499167, abs=1e-5)
        assert i1 == pytest.approx(0.285306, abs=1e-5)

    def test_against_value_iteration(self):
        """Independent check: plain value iteration on the 2-state MDP plus bisection."""
        rng = np.random.default_rng(103)
        beta = 0.8

        def margin(model, m, s):
            Pp = np.array([[1 - model.p01p, model.p01p], [1 - model.p11p, model.p11p]])
            Pa = np.array([[1 - model.p01a, model.p01a], [1 - model.p11a, model.p11a]])
            r = np.array([0.0, 1.0])
            v = np.zeros(2)
            for _ in range(400):
                v = np.maximum(r + m + beta * Pp @ v, r + beta * Pa @ v)
            return (r + m + beta * Pp @ v - (r + beta * Pa @ v))[s]

        for model in random_natural_models(rng, 5):
            got = full_observation_whittle(model, beta, tol=1e-8)
            for s in (0, 1):
                lo, hi = -4.0, 4.0
                while hi - lo > 1e-8:
                    mid = (lo + hi) / 2
                    lo, hi = (lo, mid) if margin(model, mid, s) >= 0 else (mid, hi)
                assert got[s] == pytest.approx(lo, abs=1e-6)
