import numpy as np
import pytest

from src.compression.density import DensityLedger
from src.compression.thresholds import assign_ratio, band_sizes, density_ranks, solve_thresholds
from src.service.errors import ConsistencyError, PlanningError

RATIOS = (1.0, 0.5, 0.25)


def _brute_force(densities, ratios, ratio_global):
    """Best (deviation, objective) over every split of the density-sorted chunks into bands."""
    n = len(densities)
    ordered = np.sort(np.asarray(densities, np.float64))[::-1]
    prefix = np.concatenate([[0.0], np.cumsum(ordered)])
    best = None
    for a in range(n + 1):
        for b in range(n - a + 1):
            c = n - a - b
            deviation = abs(ratios[0] * a + ratios[1] * b + ratios[2] * c - ratio_global * n)
            objective = (prefix[a] / ratios[0] + (prefix[a + b] - prefix[a]) / ratios[1]
                         + (prefix[n] - prefix[a + b]) / ratios[2])
            key = (-round(deviation, 9), objective)
            if best is None or key > best:
                best = key
    return -best[0], best[1]


def test_density_of_a_column():
    ledger = DensityLedger(layers=1, heads=1)
    rows = np.array([[0.3, 0.0, 0.0],
                     [0.5, 0.5, 0.0],
                     [0.1, 0.4, 0.5]], dtype=np.float32)[None, None]
    ledger.update(rows)
    assert ledger.token_densities()[0] == pytest.approx(0.3)
    assert ledger.density_of(0, 1) == pytest.approx(0.3)
    # column b is defined on two rows, column c on one
    assert ledger.token_densities().tolist() == pytest.approx([0.3, 0.45, 0.5])


def test_density_updates_incrementally():
    ledger = DensityLedger(layers=1, heads=1)
    ledger.update(np.array([[[[1.0]]]]))
    ledger.update(np.array([[[[0.4, 0.6]]]]))
    assert ledger.token_densities().tolist() == pytest.approx([0.7, 0.6])
    with pytest.raises(ConsistencyError):
        ledger.update(np.ones((1, 1, 1, 5)))


def test_density_window_drop_keeps_positions():
    ledger = DensityLedger(layers=1, heads=1)
    rows = np.tril(np.full((4, 4), 0.25))[None, None]
    ledger.update(rows)
    ledger.drop_front(2)
    assert ledger.first_position == 2 and len(ledger) == 2
    assert ledger.density_of(2, 4) == pytest.approx(np.mean([0.25, 0.25]))
    with pytest.raises(ConsistencyError):
        ledger.density_of(0, 2)


def test_ranks_put_the_densest_chunk_at_100():
    ranks = density_ranks([0.1, 0.9, 0.5, 0.5])
    assert ranks[1] == 100.0
    # ties rank the older chunk lower
    assert ranks[2] < ranks[3]


@pytest.mark.parametrize("n", [16, 64, 200])
def test_thresholds_hit_the_target_and_match_brute_force(n):
    rng = np.random.default_rng(n)
    for trial in range(5):
        densities = rng.lognormal(0.0, 1.0, n)
        plan = solve_thresholds(densities, RATIOS, 0.5)
        assert abs(plan.realized_ratio - 0.5) <= 1.0 / n + 1e-12
        deviation, objective = _brute_force(densities, RATIOS, 0.5)
        assert plan.objective == pytest.approx(objective, rel=1e-9)


def test_densest_chunks_are_compressed_least():
    densities = [0.05, 0.9, 0.1, 0.8, 0.2, 0.01, 0.3, 0.7]
    plan = solve_thresholds(densities, RATIOS, 0.5)
    assignment = np.asarray(plan.assignment)
    order = np.argsort(densities)
    assert all(np.diff(assignment[order]) >= 0)
    assert plan.thresholds[0] == 100.0 and plan.thresholds[-1] == 0.0


def test_assign_ratio_agrees_with_the_plan():
    rng = np.random.default_rng(3)
    densities = rng.random(40)
    plan = solve_thresholds(densities, RATIOS, 0.5)
    ranks = density_ranks(densities)
    assert band_sizes(plan, ranks) == list(plan.counts)
    assert [assign_ratio(plan, r) for r in ranks] == list(plan.assignment)


def test_single_level_and_extreme_targets():
    assert solve_thresholds([1.0, 2.0], (1.0,), 1.0).assignment == (1.0, 1.0)
    assert set(solve_thresholds([1.0, 2.0, 3.0], RATIOS, 1.0).assignment) == {1.0}
    assert set(solve_thresholds([1.0, 2.0, 3.0], RATIOS, 0.25).assignment) == {0.25}


def test_unattainable_targets_are_rejected():
    with pytest.raises(PlanningError):
        solve_thresholds([1.0], RATIOS, 0.1)
    with pytest.raises(PlanningError):
        solve_thresholds([], RATIOS, 0.5)
    with pytest.raises(PlanningError):
        solve_thresholds([1.0], (1.0, 1.0), 1.0)


def test_four_chunk_worked_example():
    result = solve_thresholds([4.0, 3.0, 2.0, 1.0], ratio_global=0.5)
    assert result.counts == (1, 1, 2)
    assert result.objective == pytest.approx(22.0)
    assert result.assignment == (1.0, 0.5, 0.25, 0.25)
    assert result.realized_ratio == pytest.approx(0.5)


def test_ranks_ignore_a_constant_shift():
    densities = np.array([0.3, 0.1, 0.7, 0.1, 0.2])
    np.testing.assert_array_equal(density_ranks(densities), density_ranks(densities + 5.0))
