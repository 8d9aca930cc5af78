from collections import Counter

import numpy as np
import pytest

from editflow.oracle import EnumeratedSpace, MarginalStructure, MatrixRates, total_variation
from editflow.paths import Scheduler
from editflow.rate_model import RatePrediction, init_params, predict, rate_fn
from editflow.schemas.config_schemas import SamplerConfig
from editflow.sampler import (
    apply_cfg,
    corrector_step,
    euler_step,
    gillespie_simulate,
    guided_rate_fn,
    population_step,
    sharpen,
    simulate,
    simulate_many,
    simulate_population,
)
from editflow.structures import EditKind, GuidanceError, SamplerError, delete
from editflow.suites import toy_couplings


def test_zero_rates_make_no_edits(constant_rates):
    trace = simulate(constant_rates(), (2, 0, 1), SamplerConfig(steps=20))
    assert trace.final == (2, 0, 1)
    assert trace.num_edits == 0
    assert len(trace.steps) == 20


def test_forced_insertion_fires_at_every_anchor(constant_rates):
    trace = simulate(constant_rates(lam_ins=5.0), (2, 0, 1), SamplerConfig(steps=1))
    edits = trace.steps[0].edits
    assert [op.kind for op in edits] == [EditKind.INSERT] * 3
    assert [op.pos for op in edits] == [0, 1, 2]
    assert len(trace.final) == 6
    assert trace.overflow_drops == 0


def test_insertions_beyond_max_length_are_dropped_from_the_right(constant_rates):
    trace = simulate(constant_rates(lam_ins=5.0), (2, 0, 1), SamplerConfig(steps=1, max_length=4))
    assert [op.pos for op in trace.steps[0].edits] == [0, 1]
    assert trace.overflow_drops == 1
    assert len(trace.final) - 1 == 4


def test_delete_or_substitute_split(constant_rates, rng):
    states = [(2, 0)] * 100_000
    out, counts = population_step(constant_rates(lam_del=1.0, lam_sub=3.0), states, 0.0, 0.25, SamplerConfig(), rng)
    tally = Counter(out)
    assert set(tally) == {(2,), (2, 1)}
    assert tally[(2,)] / len(states) == pytest.approx(0.25, abs=0.005)
    assert (counts == 1).all()


def test_step_bounds(constant_rates, rng):
    cfg = SamplerConfig()
    with pytest.raises(SamplerError):
        euler_step(constant_rates(), (2,), 0.9, 0.2, cfg, rng)
    with pytest.raises(SamplerError):
        euler_step(constant_rates(), (2,), 0.5, 0.0, cfg, rng)
    with pytest.raises(SamplerError):
        euler_step(constant_rates(), (2,), 0.1, 0.2, cfg, rng, reverse=True)


def _sequences(trace):
    xs = [trace.x0] + [s.x for s in trace.steps]
    return list(zip(xs[:-1], trace.steps))


@pytest.fixture
def lively(featurized_spec):
    return init_params(featurized_spec, np.random.default_rng(5))


def test_substitution_only_keeps_length(lively, rng):
    trace = simulate(rate_fn(lively.restricted("substitution_only")), (3, 0, 1, 2), SamplerConfig(steps=50), rng)
    assert trace.num_edits > 0
    for before, step in _sequences(trace):
        assert all(op.kind is EditKind.SUBSTITUTE for op in step.edits)
        assert len(step.x) == len(before)


def test_insert_only_grows(lively, rng):
    trace = simulate(rate_fn(lively.restricted("insert_only")), (3, 0), SamplerConfig(steps=50), rng)
    assert trace.num_edits > 0
    for before, step in _sequences(trace):
        assert all(op.kind is EditKind.INSERT for op in step.edits)
        assert len(step.x) == len(before) + len(step.edits)


def test_append_only_extends_the_end(lively, rng):
    trace = simulate(rate_fn(lively.restricted("append_only")), (3, 1), SamplerConfig(steps=50), rng)
    assert trace.num_edits > 0
    for before, step in _sequences(trace):
        assert all(op.kind is EditKind.INSERT and op.pos == len(before) - 1 for op in step.edits)
        assert step.x[: len(before)] == before


def test_mask_restriction_only_rewrites_mask_tokens(lively, rng):
    x0 = (3, 2, 0, 2, 2, 1)
    trace = simulate(rate_fn(lively.restricted("mask", mask_token=2)), x0, SamplerConfig(steps=50), rng)
    assert trace.num_edits > 0
    for before, step in _sequences(trace):
        assert all(op.kind is EditKind.SUBSTITUTE and before[op.pos] == 2 for op in step.edits)
    assert trace.final[2] == 0 and trace.final[5] == 1


def test_trace_replays_to_final(lively, rng):
    trace = simulate(rate_fn(lively), (3, 0, 1), SamplerConfig(steps=40), rng)
    assert trace.replay() == trace.final
    record = trace.to_record(7)
    assert record.trace == 7 and tuple(record.final) == trace.final
    assert len(record.steps) == 40


def test_corrector_steps_are_recorded(lively, rng):
    cfg = SamplerConfig(steps=30, alpha="1")
    reverse = guided_rate_fn(lively, None, cfg, reverse=True)
    trace = simulate(rate_fn(lively), (3, 0, 1), cfg, rng, reverse_rates=reverse)
    assert all(len(s.corrector_edits) == 1 for s in trace.steps)
    assert trace.steps[-1].corrector_edits == [[]]
    assert trace.replay() == trace.final


def test_corrector_step_goes_forward_then_back(constant_rates, rng):
    cfg = SamplerConfig()
    x, fwd, back = corrector_step(constant_rates(lam_ins=10.0), constant_rates(), (2, 0), 0.3, 0.2, cfg, rng)
    assert len(fwd.edits) == 2 and back.edits == []
    assert x == fwd.x and len(x) == 4
    x, fwd, back = corrector_step(constant_rates(), constant_rates(lam_del=10.0), (2, 0, 1), 0.3, 0.2, cfg, rng)
    assert fwd.edits == [] and x == (2,)


def test_corrector_needs_reverse_rate(lively):
    with pytest.raises(SamplerError):
        simulate(rate_fn(lively), (3,), SamplerConfig(steps=5, alpha="2t^1"))


def test_simulate_many_is_reproducible(lively):
    cfg = SamplerConfig(steps=20, seed=9)
    first = simulate_many(rate_fn(lively), [(3,), (3, 1)], cfg)
    second = simulate_many(rate_fn(lively), [(3,), (3, 1)], cfg)
    assert [t.final for t in first] == [t.final for t in second]


def test_population_snapshots(constant_rates):
    cfg = SamplerConfig(steps=10, seed=1)
    result = simulate_population(constant_rates(lam_ins=1.0), [(2,)] * 50, cfg, snapshot_times=(0.0, 0.5, 1.0))
    assert set(result.snapshots) == {0.0, 0.5, 1.0}
    assert result.snapshots[0.0] == Counter({(2,): 50})
    assert sum(result.distribution().values()) == 50
    assert (result.edit_counts >= 0).all()


def test_reverse_population_runs_back_to_zero(constant_rates):
    cfg = SamplerConfig(steps=10, seed=1)
    result = simulate_population(constant_rates(lam_del=20.0), [(2, 0, 1)] * 5, cfg,
                                 snapshot_times=(1.0, 0.5, 0.0), reverse=True)
    assert result.snapshots[1.0] == Counter({(2, 0, 1): 5})
    assert result.snapshots[0.5] == Counter({(2,): 5})
    assert result.final == [(2,)] * 5
    assert list(result.edit_counts) == [2] * 5


# --- Exact simulation ---

def _delete_only(rate):
    return lambda x, t: [(delete(1), rate)] if len(x) > 1 else []


def test_gillespie_without_rates_stays_put(rng):
    trace = gillespie_simulate(lambda x, t: [], (2, 0), rng)
    assert trace.final == (2, 0) and not trace.steps


@pytest.mark.parametrize("slice_width", [None, 0.05])
def test_gillespie_holding_time(slice_width):
    rng = np.random.default_rng(3)
    times = []
    for _ in range(2000):
        trace = gillespie_simulate(_delete_only(2.0), (2, 0), rng, slice_width=slice_width, t_end=20.0)
        assert trace.final == (2,)
        times.append(trace.steps[0].t)
    assert np.mean(times) == pytest.approx(0.5, abs=0.04)


def test_gillespie_rejects_bad_slices(rng):
    with pytest.raises(SamplerError):
        gillespie_simulate(_delete_only(1.0), (2, 0), rng, slice_width=0.0)


@pytest.mark.slow
def test_gillespie_and_euler_agree_on_the_toy_space():
    atoms = toy_couplings()["upto1->upto1 worst_case"]
    space = EnumeratedSpace.covering(atoms, 2)
    assert len(space) == 7
    frozen = MarginalStructure(space, atoms, Scheduler("cubic")).rate_matrix(0.5)
    rates = MatrixRates(space, lambda t: frozen)
    x0 = (2, 0)
    count = 30000
    rng = np.random.default_rng(11)
    exact = Counter(gillespie_simulate(rates.events, x0, rng, slice_width=None).final for _ in range(count))
    euler = simulate_population(rates, [x0] * count, SamplerConfig(steps=1000, seed=12, max_length=2)).distribution()
    p = np.array([exact[x] / count for x in space.states])
    q = np.array([euler[x] / count for x in space.states])
    assert p.sum() == pytest.approx(1.0) and q.sum() == pytest.approx(1.0)
    assert total_variation(p, q) <= 0.02


# --- Guidance ---

def _pair(featurized_spec, rng):
    params = init_params(featurized_spec, rng)
    x = (3, 0, 2)
    return predict(params, x, 0.4, cond=(1, 1)), predict(params, x, 0.4)


def test_guidance_identities(featurized_spec, rng):
    pc, pu = _pair(featurized_spec, rng)
    for variant in ("weighted", "fixed"):
        out = apply_cfg(pc, pu, 1.0, variant)
        np.testing.assert_array_equal(out.lam_ins, pc.lam_ins)
        np.testing.assert_array_equal(out.q_sub, pc.q_sub)
    np.testing.assert_array_equal(apply_cfg(pc, pu, 0.0, "naive").lam_del, pc.lam_del)
    assert apply_cfg(pc, pu, 3.0, "off") is pc
    for w in (0.0, 2.0):
        np.testing.assert_array_equal(apply_cfg(pc, pu, w, "fixed").lam_sub, pc.lam_sub)


def test_weighted_guidance_at_zero_is_unconditional(featurized_spec, rng):
    pc, pu = _pair(featurized_spec, rng)
    out = apply_cfg(pc, pu, 0.0, "weighted")
    np.testing.assert_allclose(out.lam_ins, pu.lam_ins)
    np.testing.assert_allclose(out.lam_sub, pu.lam_sub)
    np.testing.assert_allclose(out.q_ins, pu.q_ins)


def test_naive_guidance_extrapolates(featurized_spec, rng):
    pc, pu = _pair(featurized_spec, rng)
    out = apply_cfg(pc, pu, 1.0, "naive")
    np.testing.assert_allclose(out.lam_del[1:], pc.lam_del[1:] ** 2 / pu.lam_del[1:])
    assert not np.allclose(out.lam_del[1:], pc.lam_del[1:])


def test_guided_token_rows_are_distributions(featurized_spec, rng):
    pc, pu = _pair(featurized_spec, rng)
    for variant in ("weighted", "fixed", "naive"):
        out = apply_cfg(pc, pu, 2.5, variant)
        np.testing.assert_allclose(out.q_ins.sum(axis=1), 1.0)
        np.testing.assert_allclose(out.q_sub.sum(axis=1), 1.0)


def test_guidance_errors(featurized_spec, rng):
    pc, pu = _pair(featurized_spec, rng)
    other = predict(init_params(featurized_spec, rng), (3, 1), 0.4)
    with pytest.raises(GuidanceError):
        apply_cfg(pc, other, 2.0, "weighted")
    with pytest.raises(GuidanceError):
        apply_cfg(pc, pu, 2.0, "sideways")

    n, m = 1, 2
    cond = RatePrediction((2,), np.ones(n), np.zeros(n), np.zeros(n), np.array([[1.0, 0.0]]), np.full((n, m), 0.5))
    uncond = RatePrediction((2,), np.ones(n), np.zeros(n), np.zeros(n), np.array([[0.0, 1.0]]), np.full((n, m), 0.5))
    with pytest.raises(GuidanceError):
        apply_cfg(cond, uncond, 0.5, "weighted")


def test_guided_rate_fn_without_condition_is_plain(lively):
    cfg = SamplerConfig(cfg_variant="weighted", guidance_weight=3.0)
    x = (3, 1, 1)
    np.testing.assert_array_equal(guided_rate_fn(lively, None, cfg)(x, 0.3).lam_ins, predict(lively, x, 0.3).lam_ins)
    guided = guided_rate_fn(lively, (0, 2), cfg)(x, 0.3)
    assert not np.allclose(guided.lam_ins, predict(lively, x, 0.3, (0, 2)).lam_ins)


# --- Sharpening ---

def test_sharpen():
    q = np.array([0.2, 0.8])
    np.testing.assert_allclose(sharpen(q), q)
    np.testing.assert_allclose(sharpen(q, temperature=0.5), np.array([0.04, 0.64]) / 0.68)
    np.testing.assert_allclose(sharpen(q, top_k=1), [0.0, 1.0])
    r = np.array([0.5, 0.3, 0.2])
    np.testing.assert_allclose(sharpen(r, top_p=0.5), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(sharpen(r, top_p=0.7), [0.625, 0.375, 0.0])
    np.testing.assert_allclose(sharpen(np.array([0.0, 1.0]), temperature=2.0), [0.0, 1.0])


@pytest.mark.parametrize("kwargs", [{"temperature": 0.0}, {"top_k": 0}])
def test_sharpen_rejects_bad_knobs(kwargs):
    with pytest.raises(SamplerError):
        sharpen(np.array([0.5, 0.5]), **kwargs)


def test_sharpen_rejects_non_distributions():
    with pytest.raises(SamplerError):
        sharpen(np.array([0.5, 0.6]))
