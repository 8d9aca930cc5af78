"""Verifier suites. Each is a plain function returning a SuiteReport; the pipeline fans them out."""
import logging
from collections import Counter
from typing import Dict, List, Optional

import numpy as np

from editflow.alignment import align_optimal, align_worst_case, rm_blanks
from editflow.oracle import (
    EnumeratedSpace,
    MarginalStructure,
    MatrixRates,
    coupling_atoms,
    event_driven_masks,
    exact_mask_distribution,
    geometric_grid,
    integrate_kfe,
    mask_histogram,
    max_flux_violation,
    point_coupling,
    reverse_rate_matrix,
    switch_time_ks,
    total_variation,
    uniform_grid,
    verify_deterministic_rate_lemma,
    verify_theorem1,
    x_changing_entries,
    ZChain,
)
from editflow.paths import Scheduler, draw_propagation, propagation_masks
from editflow.rate_model import init_params, predict
from editflow.sampler import apply_cfg, population_step, simulate_population
from editflow.schemas.config_schemas import ModelSpec, SamplerConfig
from editflow.schemas.record_schemas import CheckResult, SuiteReport
from editflow.structures import Vocab
from editflow.utils.datasets import ToyDataset

logger = logging.getLogger(__name__)

T_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
TOY_VOCAB = Vocab(size=2)
SNAPSHOT_TIMES = (0.25, 0.5, 0.75)


def toy_couplings() -> Dict[str, list]:
    """Couplings over short {A, B} strings whose paths stay in tiny spaces."""
    empty = ToyDataset("empty", TOY_VOCAB).atoms()
    upto2 = ToyDataset("uniform_upto", TOY_VOCAB, 2).atoms()
    upto1 = ToyDataset("uniform_upto", TOY_VOCAB, 1).atoms()
    return {
        "empty->upto2 optimal": coupling_atoms("optimal", empty, upto2, TOY_VOCAB),
        "upto1->upto1 optimal": coupling_atoms("optimal", upto1, upto1, TOY_VOCAB),
        "upto1->upto1 worst_case": coupling_atoms("worst_case", upto1, upto1, TOY_VOCAB),
        "upto1 uniform_x0": coupling_atoms("uniform_x0", [], upto1, TOY_VOCAB, num_delete=1, num_substitute=1),
    }


def _check(name: str, value: float, threshold: float, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(value < threshold), value=float(value), threshold=threshold, detail=detail)


def kfe_suite(seed: int = 0, samples: Optional[int] = None, cache=None) -> SuiteReport:
    checks = []
    grid = uniform_grid(0.0, 1.0, 1000)

    p0 = np.array([0.2, 0.3, 0.5])
    traj = integrate_kfe(lambda t: np.zeros((3, 3)), p0, grid)
    checks.append(_check("kfe: zero rates keep p0", np.abs(traj - p0).max(), 1e-12))

    r = 1.5
    two_state = np.array([[-r, r], [r, -r]])
    traj = integrate_kfe(lambda t: two_state, [1.0, 0.0], grid)
    closed = (1.0 - np.exp(-2 * r * grid)) / 2
    checks.append(_check("kfe: two-state closed form", np.abs(traj[:, 1] - closed).max(), 1e-9))

    sched = Scheduler("cubic")
    vocab = Vocab(size=2)
    pair = align_optimal(vocab.make([0, 1]), vocab.make([1, 1, 0]))
    atoms = point_coupling(pair)
    space = EnumeratedSpace.covering(atoms, vocab.size)
    structure = MarginalStructure(space, atoms, sched)
    p0 = np.zeros(len(space))
    p0[space.index[pair.x0]] = 1.0
    t_end = 1.0 - 1e-5
    try:
        traj = integrate_kfe(structure.rate_matrix, p0, geometric_grid(t_end, 4000))
        target = np.zeros(len(space))
        target[space.index[pair.x1]] = 1.0
        checks.append(_check("kfe: conditional path reaches x1", total_variation(traj[-1], target), 1e-3))
        checks.append(_check("kfe: matches enumerated p_t", np.abs(traj[-1] - structure.p_t(t_end)).max(), 1e-6))
    except Exception as e:
        checks.append(CheckResult(name="kfe: conditional path reaches x1", passed=False, detail=str(e)))
    return SuiteReport(suite="kfe", checks=checks)


def theorem1_suite(seed: int = 0, samples: Optional[int] = None, cache=None) -> SuiteReport:
    sched = Scheduler("cubic")
    checks: List[CheckResult] = []
    for label, atoms in toy_couplings().items():
        space = EnumeratedSpace.covering(atoms, TOY_VOCAB.size)
        report = verify_theorem1(space, atoms, sched, T_GRID, name=f"theorem1 [{label}]", cache=cache)
        checks.extend(report.checks)
    same = TOY_VOCAB.make([0])
    atoms = point_coupling(align_optimal(same, same))
    space = EnumeratedSpace.covering(atoms, TOY_VOCAB.size)
    structure = MarginalStructure(space, atoms, sched)
    worst = max(np.abs(structure.rate_matrix(t)).max() for t in T_GRID)
    checks.append(CheckResult(name="theorem1: x0 = x1 gives zero rate", passed=worst == 0.0, value=worst, threshold=0.0))
    return SuiteReport(suite="theorem1", checks=checks)


def lemmas_suite(seed: int = 0, samples: Optional[int] = None, cache=None) -> SuiteReport:
    sched = Scheduler("cubic")
    rng = np.random.default_rng(seed)
    one = Vocab(size=1)
    chains = {
        "two cells, M=1": [(align_worst_case(one.make([0]), one.make([0])), 1.0)],
        "empty->upto2": toy_couplings()["empty->upto2 optimal"],
    }
    checks: List[CheckResult] = []
    for label, atoms in chains.items():
        vocab_size = one.size if "M=1" in label else TOY_VOCAB.size
        report = verify_deterministic_rate_lemma(atoms, sched, T_GRID, vocab_size, rng=rng)
        for check in report.checks:
            checks.append(check.model_copy(update={"name": f"{check.name} [{label}]"}))
        chain = ZChain(atoms, sched)
        z_rates = chain.rate_matrix(0.5)
        switches = int(np.count_nonzero(z_rates - np.diag(np.diag(z_rates))))
        moves = x_changing_entries(z_rates, chain.states, rm_blanks)
        checks.append(CheckResult(
            name=f"lemmas: every cell switch changes rm_blanks(z) [{label}]",
            passed=moves == switches, value=abs(moves - switches), threshold=0,
        ))
    return SuiteReport(suite="lemmas", checks=checks)


def propagation_suite(seed: int = 0, samples: Optional[int] = None, cache=None) -> SuiteReport:
    samples = samples or 200_000
    sched = Scheduler("cubic")
    rng = np.random.default_rng(seed)
    size = 8
    checks = []
    for lam_prop in (1.0, 4.0):
        for t in (0.3, 0.7):
            label = f"lambda_prop={lam_prop:g}, t={t:g}"
            switch_times, n_left, n_right = draw_propagation(samples, size, t, sched, lam_prop, rng)
            two_step = mask_histogram(propagation_masks(switch_times, n_left, n_right, t))
            events = mask_histogram(event_driven_masks(samples, size, t, sched, lam_prop, rng))
            exact = exact_mask_distribution(size, t, sched, lam_prop)
            logger.debug("propagation [%s]: %d samples", label, samples)
            checks.append(_check(f"propagation: TV(two-step, event-driven) [{label}]", total_variation(two_step, events), 0.02))
            checks.append(_check(f"propagation: TV(two-step, exact) [{label}]", total_variation(two_step, exact), 0.02))
            checks.append(_check(f"propagation: KS(t*, kappa) [{label}]", switch_time_ks(switch_times.reshape(-1), sched), 0.01))
    return SuiteReport(suite="propagation", checks=checks)


def corrector_suite(seed: int = 0, samples: Optional[int] = None, cache=None) -> SuiteReport:
    samples = samples or 100_000
    sched = Scheduler("cubic")
    rng = np.random.default_rng(seed)
    atoms = toy_couplings()["empty->upto2 optimal"]
    space = EnumeratedSpace.covering(atoms, TOY_VOCAB.size)
    structure = MarginalStructure(space, atoms, sched)

    def reverse_at(t):
        return reverse_rate_matrix(structure.rate_matrix(t), structure.p_t(t))

    flux = max(max_flux_violation(structure.rate_matrix(t), reverse_at(t), structure.p_t(t)) for t in T_GRID)
    checks = [_check("corrector: flux identity", flux, 1e-12)]

    t, h = 0.5, 0.01
    cfg = SamplerConfig(steps=100, seed=seed)
    p = structure.p_t(t)
    states = [space.states[k] for k in rng.choice(len(space), size=samples, p=p / p.sum())]
    forward = MatrixRates(space, structure.rate_matrix)
    backward = MatrixRates(space, reverse_at)
    states, _ = population_step(forward, states, t, h, cfg, rng)
    states, _ = population_step(backward, states, t + h, h, cfg, rng, reverse=True)
    empirical = np.bincount([space.index[x] for x in states], minlength=len(space)) / samples
    checks.append(_check("corrector: composite step preserves p_t", total_variation(empirical, p), 0.02))
    return SuiteReport(suite="corrector", checks=checks)


def cfg_identities_suite(seed: int = 0, samples: Optional[int] = None, cache=None) -> SuiteReport:
    rng = np.random.default_rng(seed)
    spec = ModelSpec(kind="featurized", vocab_size=3, max_length=8, init_scale=1.0)
    params = init_params(spec, rng)
    failures = {"w=1 weighted": 0, "w=1 fixed": 0, "w=0 naive": 0, "fixed w-independent": 0, "Q rows": 0}
    trials = samples or 50
    for _ in range(trials):
        x = (3, *(int(a) for a in rng.integers(3, size=int(rng.integers(0, 6)))))
        cond = tuple(int(a) for a in rng.integers(3, size=3))
        t = float(rng.uniform(0, 1))
        pc, pu = predict(params, x, t, cond), predict(params, x, t, None)
        for variant in ("weighted", "fixed"):
            out = apply_cfg(pc, pu, 1.0, variant)
            if not all(np.array_equal(getattr(out, f), getattr(pc, f)) for f in ("lam_ins", "lam_del", "lam_sub", "q_ins", "q_sub")):
                failures[f"w=1 {variant}"] += 1
        naive = apply_cfg(pc, pu, 0.0, "naive")
        if not all(np.array_equal(getattr(naive, f), getattr(pc, f)) for f in ("lam_ins", "lam_del", "lam_sub")):
            failures["w=0 naive"] += 1
        fixed = [apply_cfg(pc, pu, w, "fixed") for w in (0.0, 0.5, 2.0, 3.0)]
        for out in fixed:
            if not all(np.array_equal(getattr(out, f), getattr(pc, f)) for f in ("lam_ins", "lam_del", "lam_sub")):
                failures["fixed w-independent"] += 1
            if np.abs(out.q_ins.sum(axis=1) - 1).max() > 1e-9 or np.abs(out.q_sub.sum(axis=1) - 1).max() > 1e-9:
                failures["Q rows"] += 1
    return SuiteReport(suite="cfg-identities", checks=[
        CheckResult(name=f"cfg-identities: {key}", passed=count == 0, value=count, threshold=0, detail=f"{trials} random inputs")
        for key, count in failures.items()
    ])


def _empirical(space: EnumeratedSpace, counts: Counter, total: int) -> np.ndarray:
    out = np.zeros(len(space))
    for x, c in counts.items():
        out[space.index[x]] += c
    return out / total


def transport_suite(seed: int = 0, samples: Optional[int] = None, cache=None) -> SuiteReport:
    """Euler simulation of the exact marginal rate follows p_t and lands on q."""
    samples = samples or 100_000
    sched = Scheduler("cubic")
    checks = []
    for label, atoms in toy_couplings().items():
        space = EnumeratedSpace.covering(atoms, TOY_VOCAB.size)
        structure = MarginalStructure(space, atoms, sched)
        sources: Dict = {}
        for pair, p in atoms:
            sources[pair.x0] = sources.get(pair.x0, 0.0) + p
        targets: Dict = {}
        for pair, p in atoms:
            targets[pair.x1] = targets.get(pair.x1, 0.0) + p
        rng = np.random.default_rng(seed)
        keys = list(sources)
        x0s = [keys[k] for k in rng.choice(len(keys), size=samples, p=np.array([sources[k] for k in keys]))]
        cfg = SamplerConfig(steps=2000, seed=seed, max_length=space.max_length)
        result = simulate_population(MatrixRates(space, structure.rate_matrix), x0s, cfg, rng,
                                     snapshot_times=SNAPSHOT_TIMES)
        for t in SNAPSHOT_TIMES:
            tv = total_variation(_empirical(space, result.snapshots[t], samples), structure.p_t(t))
            checks.append(_check(f"transport: TV(simulated, p_t) [t={t:g}, {label}]", tv, 0.03))
        q = np.zeros(len(space))
        for x, p in targets.items():
            q[space.index[x]] = p
        empirical = _empirical(space, Counter(result.final), samples)
        checks.append(_check(f"transport: TV(simulated, q) [{label}]", total_variation(empirical, q), 0.03))
    return SuiteReport(suite="transport", checks=checks)

