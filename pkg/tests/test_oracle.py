import numpy as np
import pytest
from diskcache import Cache

from editflow.alignment import AlignedPair, align_optimal, rm_blanks
from editflow.oracle import (
    EnumeratedSpace,
    MarginalStructure,
    MatrixRates,
    ZChain,
    coupling_atoms,
    deterministic_augmented_rate,
    deterministic_labels,
    edit_distance,
    enumerate_marginal_rate,
    event_driven_masks,
    exact_mask_distribution,
    geometric_grid,
    integrate_kfe,
    kfe_residual,
    mask_histogram,
    max_flux_violation,
    point_coupling,
    rate_condition_violation,
    reverse_rate_matrix,
    switch_time_ks,
    theorem1_gradients,
    total_variation,
    uniform_grid,
    verify_deterministic_rate_lemma,
    verify_theorem1,
    x_changing_entries,
)
from editflow.paths import ReversedScheduler, Scheduler, draw_propagation, propagation_masks
from editflow.rate_model import init_params
from editflow.schemas.config_schemas import ModelSpec
from editflow.structures import OracleError, Vocab
from editflow.suites import T_GRID, toy_couplings
from editflow.utils.datasets import ToyDataset

CUBIC = Scheduler("cubic")
LINEAR = Scheduler("linear")
AB = Vocab(size=2)


def test_enumerated_space():
    space = EnumeratedSpace(2, 2)
    assert len(space) == 7
    assert space.states[0] == (2,)
    assert space.index[(2, 1, 0)] == 5
    with pytest.raises(OracleError):
        EnumeratedSpace(2, 12)


def test_covering_space_holds_every_cell():
    pair = AlignedPair((2, 0, -1), (2, -1, 1), "worst_case")
    assert EnumeratedSpace.covering(point_coupling(pair), 2).max_length == 2


@pytest.mark.parametrize("label", list(toy_couplings()))
def test_marginal_rates_are_valid(label):
    atoms = toy_couplings()[label]
    space = EnumeratedSpace.covering(atoms, 2)
    structure = MarginalStructure(space, atoms, CUBIC)
    for t in (0.1, 0.5, 0.9):
        assert structure.p_t(t).sum() == pytest.approx(1.0)
        assert rate_condition_violation(structure.rate_matrix(t)) < 1e-12


def test_two_state_kfe():
    space = EnumeratedSpace(2, 1)
    structure = MarginalStructure(space, point_coupling(AlignedPair((2, 0), (2, 1), "optimal")), LINEAR)
    rates = structure.rate_matrix(0.25)
    assert rates[1, 2] == pytest.approx(1.0 / 0.75)
    grid = uniform_grid(0.0, 0.9, 400)
    path = integrate_kfe(structure.rate_matrix, structure.p_t(0.0), grid)
    expected = np.stack([np.zeros_like(grid), 1.0 - grid, grid], axis=1)
    np.testing.assert_allclose(path, expected, atol=1e-7)


def test_identical_endpoints_have_zero_rates():
    x = AB.make([0, 1])
    atoms = point_coupling(align_optimal(x, x))
    space = EnumeratedSpace.covering(atoms, 2)
    structure = MarginalStructure(space, atoms, CUBIC)
    assert not structure.rate_matrix(0.5).any()
    report = verify_theorem1(space, atoms, CUBIC, T_GRID)
    assert report.passed


def test_enumerated_marginal_rate_at_the_start():
    space = EnumeratedSpace(2, 1)
    rates = enumerate_marginal_rate(space, point_coupling(AlignedPair((2, 0), (2, 1), "optimal")), LINEAR, 0.0)
    a, b = space.index[(2, 0)], space.index[(2, 1)]
    assert rates[a, b] == pytest.approx(1.0)
    assert rates[a, a] == pytest.approx(-1.0)
    assert not rates[b].any()


def test_marginal_rates_are_memoized(tmp_path):
    atoms = toy_couplings()["upto1->upto1 optimal"]
    space = EnumeratedSpace.covering(atoms, 2)
    with Cache(str(tmp_path / "cache")) as cache:
        first = enumerate_marginal_rate(space, atoms, CUBIC, 0.4, cache)
        assert len(cache) == 1
        again = enumerate_marginal_rate(space, atoms, CUBIC, 0.4, cache)
        assert len(cache) == 1
    np.testing.assert_array_equal(first, again)
    np.testing.assert_array_equal(first, enumerate_marginal_rate(space, atoms, CUBIC, 0.4))


def test_integrate_kfe_rejects_unnormalized_start():
    with pytest.raises(OracleError):
        integrate_kfe(lambda t: np.zeros((2, 2)), [0.5, 0.6], [0.0, 0.1])


def test_geometric_grid():
    grid = geometric_grid(1 - 1e-5, 100)
    assert grid[0] == 0.0 and grid[-1] == pytest.approx(1 - 1e-5)
    assert np.all(np.diff(grid) > 0)
    with pytest.raises(OracleError):
        geometric_grid(1.0, 10)


@pytest.mark.parametrize("label", list(toy_couplings()))
def test_marginal_rate_satisfies_kfe(label):
    atoms = toy_couplings()[label]
    space = EnumeratedSpace.covering(atoms, 2)
    assert verify_theorem1(space, atoms, CUBIC, T_GRID).passed


def test_couplings_differ_but_both_generate_the_path():
    upto1 = ToyDataset("uniform_upto", AB, 1).atoms()
    optimal = coupling_atoms("optimal", upto1, upto1, AB)
    worst = coupling_atoms("worst_case", upto1, upto1, AB)
    space = EnumeratedSpace(2, 2)
    r_opt = MarginalStructure(space, optimal, CUBIC).rate_matrix(0.5)
    r_worst = MarginalStructure(space, worst, CUBIC).rate_matrix(0.5)
    assert not np.allclose(r_opt, r_worst)
    assert verify_theorem1(space, optimal, CUBIC, T_GRID).passed
    assert verify_theorem1(space, worst, CUBIC, T_GRID).passed


def test_kfe_residual_detects_wrong_rates():
    space = EnumeratedSpace(2, 1)
    structure = MarginalStructure(space, point_coupling(AlignedPair((2, 0), (2, 1), "optimal")), LINEAR)
    wrong = 2.0 * structure.rate_matrix(0.5)
    assert kfe_residual(wrong, structure.p_t, 0.5) > 0.1


def test_matrix_rates_match_exit_rates():
    atoms = toy_couplings()["upto1->upto1 optimal"]
    space = EnumeratedSpace.covering(atoms, 2)
    structure = MarginalStructure(space, atoms, CUBIC)
    rates = MatrixRates(space, structure.rate_matrix)
    matrix = structure.rate_matrix(0.5)
    for k, x in enumerate(space.states):
        pred = rates(x, 0.5)
        assert pred.exit_rate() == pytest.approx(-matrix[k, k])
        assert sum(r for _, r in rates.events(x, 0.5)) == pytest.approx(-matrix[k, k])
        np.testing.assert_allclose(pred.q_ins.sum(axis=1), 1.0)


@pytest.mark.parametrize("label", list(toy_couplings()))
def test_augmented_space_lemmas(label):
    report = verify_deterministic_rate_lemma(toy_couplings()[label], CUBIC, T_GRID, 2)
    assert report.passed, [c for c in report.checks if not c.passed]


def test_augmented_lemmas_with_one_token():
    one = Vocab(size=1)
    atoms = coupling_atoms("worst_case", ToyDataset("uniform_upto", one, 1).atoms(),
                           ToyDataset("uniform_upto", one, 2).atoms(), one)
    assert verify_deterministic_rate_lemma(atoms, CUBIC, T_GRID, 1).passed


def test_every_cell_switch_changes_x():
    atoms = toy_couplings()["upto1->upto1 optimal"]
    chain = ZChain(atoms, CUBIC)
    z_rates = chain.rate_matrix(0.5)
    off_diagonal = int(np.count_nonzero(z_rates - np.diag(np.diag(z_rates))))
    assert x_changing_entries(z_rates, chain.states, rm_blanks) == off_diagonal

    def length(z):
        return (len(rm_blanks(z)),)

    resizing = sum(
        1
        for a, za in enumerate(chain.states)
        for b, zb in enumerate(chain.states)
        if a != b and z_rates[a, b] != 0 and length(za) != length(zb)
    )
    assert 0 < resizing < off_diagonal
    assert x_changing_entries(z_rates, chain.states, length) == resizing


def test_deterministic_augmented_chain_stays_on_consistent_pairs():
    atoms = toy_couplings()["empty->upto2 optimal"]
    chain = ZChain(atoms, CUBIC)
    space = EnumeratedSpace.covering(atoms, 2)
    states, _ = deterministic_augmented_rate(chain.rate_matrix(0.5), chain.states, rm_blanks, space.states)
    assert len(states) == len(space) * len(chain.states)
    _, onehot = deterministic_labels(chain.states, rm_blanks, space.states)
    np.testing.assert_array_equal(onehot.sum(axis=0), 1.0)

    def rates_at(t):
        return deterministic_augmented_rate(chain.rate_matrix(t), chain.states, rm_blanks, space.states)[1]

    p0 = (onehot * chain.p_t(0.0)[None, :]).reshape(-1)
    traj = integrate_kfe(rates_at, p0, uniform_grid(0.0, 0.9, 300))
    inconsistent = np.array([x != rm_blanks(z) for x, z in states])
    assert traj[:, inconsistent].max() < 1e-12
    np.testing.assert_allclose(traj[-1], (onehot * chain.p_t(0.9)[None, :]).reshape(-1), atol=1e-6)


def test_lemma_report_covers_the_x_level_rate():
    report = verify_deterministic_rate_lemma(toy_couplings()["upto1->upto1 optimal"], CUBIC, (0.3, 0.7), 2)
    names = {c.name for c in report.checks}
    assert {"lemmas: deterministic x rate", "lemmas: deterministic jumps off f"} <= names
    assert report.passed


@pytest.mark.parametrize("label", list(toy_couplings()))
def test_reverse_rate_is_the_swapped_path(label):
    atoms = toy_couplings()[label]
    space = EnumeratedSpace.covering(atoms, 2)
    forward = MarginalStructure(space, atoms, CUBIC)
    backward = MarginalStructure(space, [(pair.swapped(), p) for pair, p in atoms], ReversedScheduler(CUBIC))
    for t in (0.2, 0.5, 0.8):
        p = forward.p_t(t)
        rev = reverse_rate_matrix(forward.rate_matrix(t), p)
        assert max_flux_violation(forward.rate_matrix(t), rev, p) < 1e-12
        np.testing.assert_allclose(backward.p_t(1 - t), p, atol=1e-12)
        np.testing.assert_allclose(backward.rate_matrix(1 - t), rev, atol=1e-9)


def test_theorem1_gradients_agree():
    atoms = toy_couplings()["empty->upto2 optimal"]
    space = EnumeratedSpace.covering(atoms, 2)
    spec = ModelSpec(kind="tabular", vocab_size=2, max_length=2, num_buckets=4)
    params = init_params(spec, np.random.default_rng(0))
    params.values = np.random.default_rng(1).normal(0.0, 0.5, size=params.values.size)
    aux, marginal = theorem1_gradients(params, space, atoms, CUBIC, (0.3, 0.6))
    assert np.abs(aux).max() > 1e-3
    np.testing.assert_allclose(aux, marginal, rtol=1e-8, atol=1e-10)


def test_edit_distance():
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance((), (1, 2)) == 2
    assert edit_distance((0, 1), (0, 1)) == 0


# --- Propagation references ---

def test_exact_mask_distribution_without_spread_is_a_product():
    t, size = 0.7, 3
    dist = exact_mask_distribution(size, t, CUBIC, 0.0)
    k = CUBIC.kappa(t)
    expected = [np.prod([k if code >> j & 1 else 1 - k for j in range(size)]) for code in range(2 ** size)]
    np.testing.assert_allclose(dist, expected, atol=1e-12)


def test_exact_mask_distribution_is_normalized():
    dist = exact_mask_distribution(4, 0.6, CUBIC, 3.0)
    assert dist.sum() == pytest.approx(1.0, abs=1e-9)
    assert (dist >= -1e-15).all()


def test_mask_samplers_match_exact_distribution():
    rng = np.random.default_rng(2)
    t, size, lam = 0.6, 3, 2.0
    exact = exact_mask_distribution(size, t, CUBIC, lam)
    events = mask_histogram(event_driven_masks(20_000, size, t, CUBIC, lam, rng))
    switch_times, n_left, n_right = draw_propagation(20_000, size, t, CUBIC, lam, rng)
    batched = mask_histogram(propagation_masks(switch_times, n_left, n_right, t))
    assert total_variation(events, exact) < 0.03
    assert total_variation(batched, exact) < 0.03


def test_switch_times_follow_kappa():
    rng = np.random.default_rng(4)
    samples = CUBIC.kappa_inv(rng.random(5000))
    assert switch_time_ks(samples, CUBIC) < 0.03
    assert switch_time_ks(rng.random(5000), CUBIC) > 0.2
