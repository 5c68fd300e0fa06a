import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import random_batch
from streamcausal.engine import (
    ConvergenceError,
    OnlineState,
    SingularityError,
    SolverOptions,
    _renew_reference,
    ate_estimate,
    init_state,
    renew,
    run_stream,
    sandwich,
    sandwich_variance,
    solve_offline,
)
from streamcausal.model import DataBatch, Family, ModelSpec, concat_batches
from streamcausal.persist import dumps_state, loads_state
from streamcausal.scores import evaluate
from streamcausal.simulation import SimConfig, draw_params, make_stream, replication_rng

GCOMP1 = ModelSpec("gcomp", "continuous", 1)


def split(batch, cuts):
    edges = [0, *cuts, batch.n]
    return [
        DataBatch(k + 1, batch.y[lo:hi], batch.a[lo:hi], batch.x[lo:hi])
        for k, (lo, hi) in enumerate(zip(edges, edges[1:]))
    ]


class TestInit:
    def test_gcomp_difference_of_means(self, four_obs):
        state = init_state(four_obs, GCOMP1)
        assert state.delta == pytest.approx(1.0, abs=1e-12)
        assert state.n_total == 4 and state.batch_count == 1

    def test_iptw_intercept_only(self, four_obs):
        state = init_state(four_obs, ModelSpec("iptw", "continuous", 1))
        np.testing.assert_allclose(state.theta, [0.0, 1.0], atol=1e-12)

    def test_all_treated_is_singular(self):
        batch = DataBatch(1, [1.0, 2.0, 3.0], [1, 1, 1], np.ones((3, 1)))
        for fam in Family:
            with pytest.raises(SingularityError):
                init_state(batch, ModelSpec(fam, "continuous", 1))

    def test_small_first_batch_warns(self, four_obs):
        with pytest.warns(UserWarning, match="n=4"):
            init_state(four_obs, ModelSpec("aiptw", "continuous", 1))

    def test_non_convergence_carries_diagnostics(self, rng):
        batch = random_batch(rng, 200, 3)
        with pytest.raises(ConvergenceError) as err:
            init_state(batch, ModelSpec("iptw", "continuous", 3), SolverOptions(max_iter=1, restarts=0))
        assert err.value.last_iterate.shape == (4,)
        assert err.value.residual_norm > 0

    def test_single_batch_equals_offline(self, rng):
        batch = random_batch(rng, 300, 2)
        for fam in Family:
            spec = ModelSpec(fam, "continuous", 2)
            state = init_state(batch, spec)
            fit = solve_offline([batch], spec)
            np.testing.assert_array_equal(state.theta, fit.theta.theta)
            np.testing.assert_allclose(sandwich_variance(state), fit.variance, rtol=1e-12)

    def test_ate_estimate(self, four_obs):
        delta, se = ate_estimate(init_state(four_obs, GCOMP1))
        assert delta == pytest.approx(1.0)
        assert se > 0


class TestRenew:
    def test_two_pairs_recover_pooled(self, four_obs):
        b1 = DataBatch(1, [1.0, 0.0], [1, 0], np.ones((2, 1)))
        b2 = DataBatch(2, [3.0, 2.0], [1, 0], np.ones((2, 1)))
        state = renew(init_state(b1, GCOMP1), b2)
        assert state.delta == pytest.approx(1.0, abs=1e-8)
        assert state.delta == pytest.approx(init_state(four_obs, GCOMP1).delta, abs=1e-8)
        assert state.n_total == 4 and state.batch_count == 2

    def test_batch_of_one(self, rng):
        spec = ModelSpec("aiptw", "continuous", 2)
        state = init_state(random_batch(rng, 200, 2), spec)
        one = DataBatch(2, [0.3], [1], [[1.0, -0.2]])
        new = renew(state, one)
        assert new.n_total == 201 and new.batch_count == 2
        assert np.all(np.isfinite(new.theta))

    def test_input_state_untouched(self, rng):
        spec = ModelSpec("iptw", "continuous", 2)
        state = init_state(random_batch(rng, 200, 2), spec)
        before = state.theta.copy(), state.s_cum.copy()
        renew(state, random_batch(rng, 50, 2, batch_index=2))
        np.testing.assert_array_equal(state.theta, before[0])
        np.testing.assert_array_equal(state.s_cum, before[1])

    def test_dimension_mismatch(self, rng):
        state = init_state(random_batch(rng, 50, 2), ModelSpec("gcomp", "continuous", 2))
        with pytest.raises(ValueError):
            renew(state, random_batch(rng, 50, 3))

    @pytest.mark.parametrize("family", list(Family))
    @pytest.mark.parametrize("outcome", ["continuous", "binary"])
    def test_kernel_matches_reference(self, rng, family, outcome):
        spec = ModelSpec(family, outcome, 2)
        alpha = np.array([0.2, 0.5])
        binary = outcome == "binary"
        state = ref = init_state(random_batch(rng, 150, 2, binary=binary, alpha=alpha), spec)
        for b in range(2, 12):
            batch = random_batch(rng, int(rng.integers(1, 80)), 2, binary=binary, batch_index=b, alpha=alpha)
            state = renew(state, batch)
            ref = _renew_reference(ref, batch)
            np.testing.assert_allclose(state.theta, ref.theta, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(state.s_cum, ref.s_cum, rtol=1e-10, atol=1e-10)
            np.testing.assert_allclose(state.m_cum, ref.m_cum, rtol=1e-10, atol=1e-10)

    def test_state_invariants(self, rng):
        spec = ModelSpec("aiptw", "binary", 2)
        state = init_state(random_batch(rng, 200, 2, binary=True), spec)
        total = 200
        for b in range(2, 8):
            n = int(rng.integers(5, 60))
            state = renew(state, random_batch(rng, n, 2, binary=True, batch_index=b))
            total += n
            assert state.batch_count == b and state.n_total == total
            np.testing.assert_array_equal(state.m_cum, state.m_cum.T)
            assert np.linalg.eigvalsh(state.m_cum).min() > -1e-9 * np.trace(state.m_cum)
            assert np.isfinite(state.condition_number())

    def test_state_is_immutable(self, four_obs, rng):
        state = init_state(four_obs, GCOMP1)
        with pytest.raises(ValueError):
            state.theta[0] = 5.0
        renewed = renew(state, DataBatch(2, [0.5, 1.5], [1, 0], np.ones((2, 1))))
        for arr in (renewed.theta, renewed.s_cum, renewed.m_cum):
            with pytest.raises(ValueError):
                arr[0] = 1.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(20, 300), p=st.integers(1, 3), data=st.data())
def test_linear_online_equals_offline_any_partition(seed, n, p, data):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, n, p)
    first = data.draw(st.integers(2 * p + 2, n))
    rest = sorted(set(data.draw(st.lists(st.integers(first + 1, n - 1), max_size=8)))) if first < n - 1 else []
    cuts = [first, *rest] if first < n else []
    parts = split(batch, cuts)
    treated = int(parts[0].a.sum())
    # each arm of the first batch must identify its own regression
    assume(min(treated, parts[0].n - treated) >= p + 1)
    spec = ModelSpec("gcomp", "continuous", p)
    online = run_stream(parts, spec)
    offline = solve_offline(batch, spec)
    assert abs(online.delta - offline.delta) <= 1e-6
    assert abs(online.delta - offline.delta) <= 10 * SolverOptions().tol


class TestSandwich:
    def test_duplication_halves_variance(self, rng):
        for fam in Family:
            spec = ModelSpec(fam, "continuous", 2)
            batches = [random_batch(rng, 100, 2, batch_index=k) for k in (1, 2, 3)]
            doubled = [concat_batches([b, b], b.batch_index) for b in batches]
            v1 = sandwich_variance(run_stream(batches, spec))
            v2 = sandwich_variance(run_stream(doubled, spec))
            np.testing.assert_allclose(v2, v1 / 2, rtol=1e-8)

    def test_symmetric_psd(self, rng):
        state = run_stream([random_batch(rng, 80, 3, batch_index=k) for k in range(1, 6)], ModelSpec("aiptw", "continuous", 3))
        v = sandwich_variance(state)
        np.testing.assert_array_equal(v, v.T)
        assert np.linalg.eigvalsh(v).min() >= -1e-12

    def test_singular_sensitivity(self):
        with pytest.raises(SingularityError):
            sandwich(np.zeros((2, 2)), np.eye(2))

    def test_difference_of_means_variance(self):
        rng = np.random.default_rng(5)
        n = 200_000
        a = rng.integers(0, 2, n)
        y = np.where(a == 1, rng.normal(2.0, 3.0, n), rng.normal(0.0, 1.5, n))
        state = init_state(DataBatch(1, y, a, np.ones((n, 1))), GCOMP1)
        n1, n0 = a.sum(), n - a.sum()
        oracle = y[a == 1].var() / n1 + y[a == 0].var() / n0
        assert sandwich_variance(state)[-1, -1] == pytest.approx(oracle, rel=1e-9)
        assert sandwich_variance(state)[-1, -1] == pytest.approx(9 / n1 + 2.25 / n0, rel=0.02)


def test_offline_permutation_invariant(rng):
    batches = [random_batch(rng, 60, 2, batch_index=k) for k in range(1, 6)]
    for fam in Family:
        spec = ModelSpec(fam, "continuous", 2)
        a = solve_offline(batches, spec)
        b = solve_offline(batches[::-1], spec)
        np.testing.assert_allclose(a.theta.theta, b.theta.theta, atol=1e-8)
        theta, variance = a
        assert variance.shape == (spec.dim, spec.dim)


@pytest.mark.parametrize("family", list(Family))
def test_state_sufficiency_after_destroying_raw_data(family):
    cfg = SimConfig(n_batches=12, batch_size=100)
    batches = make_stream(cfg, draw_params(cfg), replication_rng(8, 0))
    spec = ModelSpec(family, "continuous", cfg.p)
    reference = run_stream(batches, spec)

    state = init_state(batches[0], spec)
    text = dumps_state(state)
    del state
    for b in range(1, len(batches)):
        batches[b - 1] = None  # the raw past is gone
        state = renew(loads_state(text).state, batches[b])
        text = dumps_state(state)
    final = loads_state(text).state
    np.testing.assert_array_equal(final.theta, reference.theta)
    np.testing.assert_array_equal(final.s_cum, reference.s_cum)
    np.testing.assert_array_equal(final.m_cum, reference.m_cum)
    assert ate_estimate(final) == ate_estimate(reference)


def _pooled_score_norm(family, n_batches, reps):
    out = []
    for rep in range(reps):
        cfg = SimConfig(n_batches=n_batches, batch_size=100)
        batches = make_stream(cfg, draw_params(cfg), replication_rng(31, rep))
        spec = ModelSpec(family, "continuous", cfg.p)
        state = run_stream(batches, spec)
        pooled = concat_batches(batches)
        out.append(np.max(np.abs(evaluate(pooled, state.theta, spec, with_m=False).u)) / pooled.n)
    return float(np.mean(out))


@pytest.mark.slow
@pytest.mark.parametrize("family", [Family.IPTW, Family.AIPTW])
def test_pooled_score_at_online_estimate_shrinks(family):
    sizes = np.array([1e3, 1e4, 1e5])
    norms = [_pooled_score_norm(family, int(n // 100), reps=10) for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(norms), 1)[0]
    assert slope <= -0.4
