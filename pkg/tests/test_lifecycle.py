import pytest
from hypothesis import given, settings, strategies as st

from src.lifecycle.lctru import LctruQueue
from src.lifecycle.lifecycle import aot_swapout, lock, unlock
from src.memory.chunk import Residency
from src.memory.swap_file import CONTEXT_METADATA, context_dir
from src.service.errors import BusyError, OutOfMemoryError

RATIOS = (1.0, 0.5, 0.25)
KEYS = st.integers(0, 9)

_ops = st.lists(st.one_of(
    st.tuples(st.just("add"), KEYS, st.sampled_from(RATIOS), st.integers(0, 50)),
    st.tuples(st.just("touch"), KEYS),
    st.tuples(st.just("remove"), KEYS),
    st.tuples(st.just("reclassify"), KEYS, st.sampled_from(RATIOS)),
), max_size=60)


class _ReferenceOrder:
    """Sorts on (-ratio, last_access, when it last moved)."""

    def __init__(self, class_ordered):
        self.class_ordered = class_ordered
        self.entries = {}
        self.clock = 0

    def _stamp(self):
        self.clock += 1
        return self.clock

    def apply(self, op, now):
        kind, key = op[0], op[1]
        if kind == "add":
            self.entries[key] = [op[2], op[3], self._stamp()]
        elif kind == "touch" and key in self.entries:
            self.entries[key][1] = now
            self.entries[key][2] = self._stamp()
        elif kind == "remove":
            self.entries.pop(key, None)
        elif kind == "reclassify" and key in self.entries:
            self.entries[key][0] = op[2]
            self.entries[key][2] = self._stamp()

    def order(self):
        def rank(key):
            ratio, last_access, moved = self.entries[key]
            return (-ratio if self.class_ordered else 0.0, last_access, moved)
        return sorted(self.entries, key=rank)


@pytest.mark.parametrize("class_ordered", [True, False])
@settings(max_examples=150, deadline=None)
@given(ops=_ops)
def test_queue_matches_the_reference_order(class_ordered, ops):
    queue = LctruQueue(class_ordered=class_ordered)
    reference = _ReferenceOrder(class_ordered)
    for step, op in enumerate(ops):
        # touches always happen after every initial stamp
        now = 100 + step
        kind, key = op[0], op[1]
        if kind == "add":
            queue.add(key, op[2], 10, op[3])
        elif kind == "touch":
            queue.touch([key], now)
        elif kind == "remove":
            queue.remove(key)
        else:
            queue.reclassify(key, op[2], 10)
        reference.apply(op, now)
    assert [e.key for e in queue] == reference.order()
    assert len(queue) == len(reference.entries)


def test_heaviest_class_goes_first_then_oldest():
    queue = LctruQueue()
    queue.add("old-light", 0.25, 10, last_access=1)
    queue.add("new-heavy", 1.0, 40, last_access=9)
    queue.add("old-heavy", 1.0, 40, last_access=2)
    queue.add("mid", 0.5, 20, last_access=5)
    assert [e.key for e in queue] == ["old-heavy", "new-heavy", "mid", "old-light"]
    popped = queue.pop_for(50)
    assert [e.key for e in popped] == ["old-heavy", "new-heavy"]
    assert "mid" in queue and "old-heavy" not in queue


def test_pop_for_skips_and_leaves_the_queue_alone_on_failure():
    queue = LctruQueue()
    queue.add("a", 1.0, 10)
    queue.add("b", 0.5, 10)
    with pytest.raises(OutOfMemoryError):
        queue.pop_for(15, skip=lambda key: key == "a")
    assert len(queue) == 2
    assert [e.key for e in queue.pop_for(5, skip=lambda key: key == "a")] == ["b"]
    assert queue.evictable_bytes() == 10


def test_lock_checks_the_working_set(store, rng, prefill):
    ctx = store.create_context()
    prefill(store, ctx, rng.integers(0, 256, 32).tolist())
    lock(store, ctx, reserve_bytes=1024)
    assert ctx.locked
    unlock(store, ctx)
    assert not ctx.locked
    with pytest.raises(BusyError):
        lock(store, ctx, reserve_bytes=store.ledger.budget)
    assert not ctx.locked


def test_lock_counts_other_pinned_contexts(store, rng, prefill):
    first = store.create_context()
    prefill(store, first, rng.integers(0, 256, 32).tolist())
    second = store.create_context()
    prefill(store, second, rng.integers(0, 256, 32).tolist())
    lock(store, first)
    room = store.ledger.budget - first.nbytes()
    with pytest.raises(BusyError):
        lock(store, second, reserve_bytes=room - second.nbytes() + 1)
    lock(store, second, reserve_bytes=room - second.nbytes())
    assert second.locked


def test_aot_swapout_leaves_every_chunk_clean(store, rng, prefill):
    ctx = store.create_context()
    prefill(store, ctx, rng.integers(0, 256, 40).tolist())
    report = aot_swapout(store, ctx)
    assert report.files_written == 3 and not report.degraded
    assert report.bytes_written == store.stats.bytes_written
    assert all(not c.dirty and c.residency is Residency.BOTH for c in ctx.chunk_list())
    assert (context_dir(store.config.swap_dir, ctx.ctx_id) / CONTEXT_METADATA).exists()
    # nothing dirty left: a second pass writes no chunk
    assert aot_swapout(store, ctx).files_written == 0


def test_aot_swapout_survives_a_full_disk(store, rng, prefill, monkeypatch):
    ctx = store.create_context()
    prefill(store, ctx, rng.integers(0, 256, 32).tolist())

    def disk_full(chunk):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(store, "write_back", disk_full)
    report = aot_swapout(store, ctx)
    assert report.degraded and "No space left" in report.error
    assert report.files_written == 0
    assert all(c.dirty and c.in_memory for c in ctx.chunk_list())
