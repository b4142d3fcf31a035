"""
Context-switching trace synthesis.

Calls arrive as a Poisson process; the called context is picked by one of
three patterns:

    random    every active context with the same probability
    markov    first-order chain that favours the previously called context
    gaussian  probability proportional to a normal pdf of the context's mean
              delta length

Each context is bound (round-robin) to a delta-length range, the number of
tokens its history grows by per call. The prompt carries most of the delta,
the ground truth (the expected answer) the rest.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

PATTERNS = ("random", "markov", "gaussian")

# news classification, document summary, chat summary, comprehension, translation, sentiment
DEFAULT_DELTA_RANGES: Tuple[Tuple[int, int], ...] = (
    (200, 500),
    (1000, 2000),
    (100, 300),
    (500, 1000),
    (100, 500),
    (10, 100),
)

_WORDS = (
    "the a of to and in is for on that with as by it this from be at are was or an "
    "model context memory chunk token cache service app user request answer news summary "
    "chat history translate sentence review story report weather market photo call message"
).split()


@dataclass(frozen=True)
class TraceConfig:
    pattern: str = "random"
    rate: float = 1 / 300                  # calls per second
    hours: float = 1.0
    contexts: int = 8
    max_events: Optional[int] = None       # overrides hours when set
    delta_ranges: Tuple[Tuple[int, int], ...] = DEFAULT_DELTA_RANGES
    markov_boost: float = 0.5
    gaussian_mu: Optional[float] = None
    gaussian_sigma: Optional[float] = None
    ground_truth_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.rate <= 0:
            raise ValueError("calling rate must be positive")
        if self.contexts < 1:
            raise ValueError("at least one active context is required")
        if not self.delta_ranges or any(lo < 1 or hi < lo for lo, hi in self.delta_ranges):
            raise ValueError(f"delta ranges must be positive, got {self.delta_ranges}")
        if not 0.0 <= self.markov_boost < 1.0:
            raise ValueError("markov_boost must lie in [0, 1)")
        if not 0.0 <= self.ground_truth_fraction < 1.0:
            raise ValueError("ground_truth_fraction must lie in [0, 1)")

    def context_range(self, ctx_id: int) -> Tuple[int, int]:
        return self.delta_ranges[ctx_id % len(self.delta_ranges)]

    def gaussian_params(self) -> Tuple[float, float]:
        lo = min(r[0] for r in self.delta_ranges)
        hi = max(r[1] for r in self.delta_ranges)
        mu = self.gaussian_mu if self.gaussian_mu is not None else (lo + hi) / 2
        sigma = self.gaussian_sigma if self.gaussian_sigma is not None else (hi - lo) / 4
        return mu, max(sigma, 1e-9)


@dataclass
class TraceEvent:
    time: float
    ctx_id: int
    prompt: str
    ground_truth: str

    @property
    def delta_tokens(self) -> int:
        return len(self.prompt.encode("utf-8")) + len(self.ground_truth.encode("utf-8"))


def synthetic_text(rng: np.random.Generator, length: int) -> str:
    """ASCII filler of exactly `length` bytes (= tokens under the byte tokenizer)."""
    if length <= 0:
        return ""
    words = rng.choice(_WORDS, size=length // 2 + 1)
    return " ".join(words)[:length].ljust(length, ".")


def arrival_times(rng: np.random.Generator, config: TraceConfig) -> np.ndarray:
    if config.max_events is not None:
        return np.cumsum(rng.exponential(1.0 / config.rate, size=config.max_events))
    horizon = config.hours * 3600.0
    times, now = [], 0.0
    while True:
        now += rng.exponential(1.0 / config.rate)
        if now > horizon:
            break
        times.append(now)
    return np.asarray(times, dtype=np.float64)


def gaussian_weights(config: TraceConfig) -> np.ndarray:
    mu, sigma = config.gaussian_params()
    means = np.array([sum(config.context_range(c)) / 2 for c in range(config.contexts)], dtype=np.float64)
    pdf = np.exp(-0.5 * ((means - mu) / sigma) ** 2)
    if pdf.sum() == 0:
        return np.full(config.contexts, 1.0 / config.contexts)
    return pdf / pdf.sum()


def context_sequence(rng: np.random.Generator, config: TraceConfig, count: int) -> np.ndarray:
    n = config.contexts
    if config.pattern == "random":
        return rng.integers(0, n, size=count)
    if config.pattern == "gaussian":
        # weights are fixed, the draw is repeated per event
        return rng.choice(n, size=count, p=gaussian_weights(config))

    # markov: stay with probability boost + (1 - boost) / n
    out = np.empty(count, dtype=np.int64)
    previous = int(rng.integers(0, n))
    for i in range(count):
        if rng.random() < config.markov_boost:
            current = previous
        else:
            current = int(rng.integers(0, n))
        out[i] = current
        previous = current
    return out


def generate(config: TraceConfig, progress: bool = False) -> List[TraceEvent]:
    rng = np.random.default_rng(config.seed)
    times = arrival_times(rng, config)
    contexts = context_sequence(rng, config, len(times))
    events = []
    for t, ctx_id in tqdm(zip(times, contexts), total=len(times), desc="trace", disable=not progress):
        lo, hi = config.context_range(int(ctx_id))
        delta = int(rng.integers(lo, hi + 1))
        answer = int(round(delta * config.ground_truth_fraction))
        answer = min(max(answer, 1), delta - 1) if delta > 1 else 0
        events.append(TraceEvent(float(t), int(ctx_id), synthetic_text(rng, delta - answer),
                                 synthetic_text(rng, answer)))
    return events


def trace_frame(events: Sequence[TraceEvent]) -> pd.DataFrame:
    return pd.DataFrame([asdict(e) for e in events], columns=["time", "ctx_id", "prompt", "ground_truth"])


def write_trace(events: Sequence[TraceEvent], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(asdict(event), ensure_ascii=False) + "\n")
    return path


def read_trace(path) -> List[TraceEvent]:
    if Path(path).stat().st_size == 0:
        return []
    frame = pd.read_json(path, lines=True, precise_float=True, convert_dates=False,
                         dtype={"time": float, "ctx_id": int, "prompt": str, "ground_truth": str})
    if frame.empty:
        return []
    frame = frame.fillna({"prompt": "", "ground_truth": ""})
    return [TraceEvent(float(r.time), int(r.ctx_id), str(r.prompt), str(r.ground_truth))
            for r in frame.itertuples(index=False)]


def describe(events: Sequence[TraceEvent], contexts: Optional[int] = None) -> dict:
    """Summary statistics used by the CLI and the trace checks."""
    if not events:
        return {"events": 0}
    frame = trace_frame(events)
    gaps = np.diff(np.concatenate([[0.0], frame["time"].to_numpy()]))
    ids = frame["ctx_id"].to_numpy()
    n = contexts or int(ids.max()) + 1
    freq = np.bincount(ids, minlength=n) / len(ids)
    stay = float(np.mean(ids[1:] == ids[:-1])) if len(ids) > 1 else 0.0
    return {
        "events": len(events),
        "mean_interarrival": float(gaps.mean()),
        "frequencies": freq.tolist(),
        "stay_probability": stay,
        "mean_delta": float(np.mean([e.delta_tokens for e in events])),
    }
