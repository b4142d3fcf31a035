import numpy as np
import pytest

from src.trace.trace_gen import (TraceConfig, describe, gaussian_weights, generate, read_trace, synthetic_text,
                                 trace_frame, write_trace)


def test_poisson_mean_interarrival():
    events = generate(TraceConfig(rate=1 / 300, max_events=10_000, seed=1))
    stats = describe(events)
    assert stats["events"] == 10_000
    assert 285 <= stats["mean_interarrival"] <= 315
    times = [e.time for e in events]
    assert times == sorted(times)


def test_random_pattern_is_uniform():
    events = generate(TraceConfig(pattern="random", contexts=4, max_events=10_000, seed=2))
    for freq in describe(events, 4)["frequencies"]:
        assert 0.22 <= freq <= 0.28


def test_markov_pattern_boosts_the_last_context():
    config = TraceConfig(pattern="markov", contexts=4, markov_boost=0.5, max_events=10_000, seed=3)
    stay = describe(generate(config))["stay_probability"]
    assert stay == pytest.approx(0.5 + 0.5 / 4, abs=0.03)
    uniform = describe(generate(TraceConfig(pattern="random", contexts=4, max_events=10_000, seed=3)))
    assert stay > uniform["stay_probability"] + 0.2


def test_gaussian_pattern_follows_the_weights():
    config = TraceConfig(pattern="gaussian", contexts=6, max_events=20_000, seed=4)
    weights = gaussian_weights(config)
    assert weights.sum() == pytest.approx(1.0)
    # the 500-1000 range sits closest to the middle of all ranges
    assert int(np.argmax(weights)) == 3
    freq = np.asarray(describe(generate(config), 6)["frequencies"])
    np.testing.assert_allclose(freq, weights, atol=0.02)


def test_hours_bound_the_trace():
    events = generate(TraceConfig(rate=1 / 60, hours=1.0, seed=5))
    assert 40 <= len(events) <= 85
    assert all(e.time <= 3600.0 for e in events)


def test_delta_lengths_follow_the_context_range():
    config = TraceConfig(contexts=6, max_events=300, seed=6)
    for event in generate(config):
        lo, hi = config.context_range(event.ctx_id)
        assert lo <= event.delta_tokens <= hi
        assert event.ground_truth


def test_same_seed_same_trace():
    config = TraceConfig(pattern="markov", max_events=50, seed=7)
    assert generate(config) == generate(config)
    assert generate(config) != generate(TraceConfig(pattern="markov", max_events=50, seed=8))


def test_synthetic_text_has_exact_length():
    rng = np.random.default_rng(0)
    for length in (0, 1, 7, 300):
        assert len(synthetic_text(rng, length).encode("utf-8")) == length


def test_trace_file_round_trip(tmp_path):
    events = generate(TraceConfig(max_events=20, seed=9))
    path = write_trace(events, tmp_path / "traces" / "t.jsonl")
    assert read_trace(path) == events
    assert list(trace_frame(events).columns) == ["time", "ctx_id", "prompt", "ground_truth"]
    (tmp_path / "empty.jsonl").write_text("")
    assert read_trace(tmp_path / "empty.jsonl") == []


@pytest.mark.parametrize("kwargs", [
    {"pattern": "zipf"},
    {"rate": 0.0},
    {"contexts": 0},
    {"delta_ranges": ((5, 1),)},
    {"markov_boost": 1.0},
])
def test_bad_configs_are_rejected(kwargs):
    with pytest.raises(ValueError):
        TraceConfig(**kwargs)
