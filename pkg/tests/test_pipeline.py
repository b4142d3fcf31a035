import threading
import time
from types import SimpleNamespace

import numpy as np
import pytest

from src.pipeline.cost_model import CostModel
from src.pipeline.executor import execute_overlapped
from src.pipeline.planner import lp_relaxation, pick_recompute_set, plan, round_relaxation
from src.pipeline.profiler import SyntheticTimer, fit_linear, profile
from src.service.errors import ProfilingError


@pytest.fixture
def cost():
    return CostModel(a_re=0.0, b_re=0.1, a_io=0.0, b_io=0.01)


def test_plan_worked_example(cost):
    result = plan(cost, {1.0: 8, 0.5: 8, 0.25: 16}, chunk_bytes=1.0)
    assert result.bytes_total == 16.0
    assert result.recompute == (1, 0, 0)
    assert result.predicted_delay == pytest.approx(0.15)
    assert result.method == "exhaustive"


def test_nothing_to_load_is_trivial(cost):
    result = plan(cost, {1.0: 0})
    assert result.method == "trivial" and result.predicted_delay == 0.0


def test_pure_io_when_recompute_is_expensive():
    slow = CostModel(a_re=1.0, b_re=10.0, a_io=0.0, b_io=1e-6)
    result = plan(slow, {1.0: 4, 0.5: 4}, chunk_bytes=1024.0)
    assert result.recompute_count == 0
    assert result.io_seconds == pytest.approx(1e-6 * 1024 * 6)


@pytest.mark.parametrize("seed", range(20))
def test_greedy_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    cost = CostModel(a_re=float(rng.uniform(0, 0.05)), b_re=float(rng.uniform(0.01, 0.2)),
                     a_io=float(rng.uniform(0, 0.01)), b_io=float(rng.uniform(1e-4, 1e-2)))
    totals = {1.0: int(rng.integers(0, 12)), 0.5: int(rng.integers(0, 12)), 0.25: int(rng.integers(1, 12))}
    exact = plan(cost, totals, chunk_bytes=16.0)
    greedy = plan(cost, totals, chunk_bytes=16.0, exhaustive_limit=0)
    assert greedy.method == "greedy"
    assert greedy.predicted_delay == pytest.approx(exact.predicted_delay, abs=1e-9)
    bound, _ = lp_relaxation(cost, totals, chunk_bytes=16.0)
    assert bound <= exact.predicted_delay + 1e-9
    assert round_relaxation(cost, totals, chunk_bytes=16.0).predicted_delay >= exact.predicted_delay - 1e-9


def test_large_grids_fall_back_to_greedy(cost):
    result = plan(cost, {1.0: 100, 0.5: 100, 0.25: 100}, chunk_bytes=1.0)
    assert result.method == "greedy"


def test_recompute_set_takes_the_oldest_chunks_per_class():
    chunks = {1.0: [SimpleNamespace(chunk_index=i) for i in (5, 2, 9)],
              0.5: [SimpleNamespace(chunk_index=i) for i in (3, 1)]}
    cheap = CostModel(a_re=0.0, b_re=0.012, a_io=0.0, b_io=0.1)
    result = plan(cheap, {1.0: 3, 0.5: 2}, chunk_bytes=1.0)
    assert result.recompute == (3, 1)
    picked = pick_recompute_set(chunks, result)
    assert sorted(c.chunk_index for c in picked) == [1, 2, 5, 9]


def test_executor_reads_each_layer_before_recomputing_it():
    done = []
    lock = threading.Lock()

    def io_reader(layer):
        with lock:
            done.append(("io", layer))
        return 100

    def recomputer(layer):
        with lock:
            assert ("io", layer) in done
            done.append(("re", layer))

    report = execute_overlapped(None, io_reader, recomputer, layers=4)
    assert report.bytes_read == 400
    assert [e for e in done if e[0] == "re"] == [("re", i) for i in range(4)]


def test_executor_surfaces_io_errors():
    def io_reader(layer):
        if layer == 2:
            raise OSError("disk gone")
        return 1

    with pytest.raises(OSError, match="disk gone"):
        execute_overlapped(None, io_reader, lambda layer: None, layers=4)


def test_profile_recovers_a_linear_timer():
    timer = SyntheticTimer(a_re=0.01, b_re=0.2, a_io=0.001, b_io=2e-9)
    model = profile(timer)
    assert model.b_re == pytest.approx(0.2) and model.a_re == pytest.approx(0.01, abs=1e-9)
    assert model.b_io == pytest.approx(2e-9) and model.r2_io == pytest.approx(1.0)
    assert len(model.re_points) == 4 and len(model.io_points) == 4


def test_noisy_profile_is_still_close():
    model = profile(SyntheticTimer(b_re=0.1, b_io=1e-8, noise=1e-4, seed=3), repeats=3)
    assert model.b_re == pytest.approx(0.1, rel=0.05)
    assert model.r2_re > 0.99


def test_fit_linear_needs_enough_distinct_points():
    with pytest.raises(ProfilingError):
        fit_linear([(1, 1), (2, 2), (3, 3)])
    with pytest.raises(ProfilingError):
        fit_linear([(1, 1)] * 4)


def test_cost_model_rejects_flat_slopes():
    with pytest.raises(ProfilingError):
        CostModel(a_re=0.0, b_re=0.0, a_io=0.0, b_io=1.0)


def test_cost_model_persists_and_rescales(tmp_path):
    model = CostModel.calibrated(16)
    assert model.b_re == pytest.approx(22.92 / 4096 * 16)
    model.save(tmp_path / "cost.json")
    assert CostModel.load(tmp_path / "cost.json") == model
    assert model.with_chunk_tokens(64).b_re == pytest.approx(model.b_re * 4)
    assert model.io_seconds(0) == 0.0 and model.recompute_seconds(0) == 0.0
    assert model.io_seconds(1000, ops=0) == pytest.approx(model.a_io + model.b_io * 1000)


def test_executor_overlaps_the_two_lanes():
    step = 0.03

    def io_reader(layer):
        time.sleep(step)
        return 1

    report = execute_overlapped(None, io_reader, lambda layer: time.sleep(step), layers=4)
    assert report.wall_seconds < 2 * 4 * step


def test_predicted_delay_grows_with_bytes_and_io_slope():
    totals = {1.0: 6, 0.5: 6, 0.25: 6}
    cost = CostModel(a_re=0.01, b_re=0.05, a_io=0.001, b_io=1e-3)
    by_bytes = [plan(cost, totals, bytes_total=m, chunk_bytes=16.0).predicted_delay for m in range(8, 400, 24)]
    assert all(b >= a - 1e-9 for a, b in zip(by_bytes, by_bytes[1:]))
    slopes = [1e-4 * 1.5 ** k for k in range(12)]
    by_slope = [plan(CostModel(a_re=0.01, b_re=0.05, a_io=0.001, b_io=s), totals, chunk_bytes=16.0).predicted_delay
                for s in slopes]
    assert all(b >= a - 1e-9 for a, b in zip(by_slope, by_slope[1:]))


def test_fixed_io_cost_once_per_load():
    per_op = CostModel(a_re=0.0, b_re=0.1, a_io=0.002, b_io=1e-6)
    per_load = CostModel(a_re=0.0, b_re=0.1, a_io=0.002, b_io=1e-6, io_per_op=False)
    assert per_op.io_seconds(1000, ops=5) == pytest.approx(5 * 0.002 + 1e-6 * 1000)
    assert per_load.io_seconds(1000, ops=5) == pytest.approx(0.002 + 1e-6 * 1000)
    assert CostModel.from_dict(per_load.to_dict()).io_per_op is False
