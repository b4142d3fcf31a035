"""
Least-compressed-then-recently-used eviction order.

Sub-queues are kept per ratio class, heaviest (least compressed) class first;
inside a class the least recently used chunk is popped first. With
class_ordered=False the queue degenerates to a single plain LRU list.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, Iterable, Iterator, List, Optional

from src.service.errors import OutOfMemoryError

_LRU_CLASS = 0.0


@dataclass
class QueueEntry:
    key: Hashable
    ratio: float
    nbytes: int
    last_access: int = 0


class LctruQueue:

    def __init__(self, class_ordered: bool = True):
        self.class_ordered = class_ordered
        self._classes: Dict[float, "OrderedDict[Hashable, QueueEntry]"] = {}
        self._where: Dict[Hashable, float] = {}

    def _class_of(self, ratio: float) -> float:
        return float(ratio) if self.class_ordered else _LRU_CLASS

    def __len__(self):
        return len(self._where)

    def __contains__(self, key):
        return key in self._where

    def __iter__(self) -> Iterator[QueueEntry]:
        """Entries in eviction order."""
        for cls in sorted(self._classes, reverse=True):
            yield from self._classes[cls].values()

    def get(self, key) -> QueueEntry:
        return self._classes[self._where[key]][key]

    def _insert(self, entry: QueueEntry):
        cls = self._class_of(entry.ratio)
        sub = self._classes.setdefault(cls, OrderedDict())
        sub[entry.key] = entry
        self._where[entry.key] = cls
        # keep each sub-queue sorted by last_access, stable for equal stamps
        later = []
        for key in reversed(sub):
            if key == entry.key:
                continue
            if sub[key].last_access <= entry.last_access:
                break
            later.append(key)
        for key in reversed(later):
            sub.move_to_end(key)

    def add(self, key, ratio: float, nbytes: int, last_access: int = 0) -> QueueEntry:
        if key in self._where:
            self.remove(key)
        entry = QueueEntry(key, float(ratio), int(nbytes), last_access)
        self._insert(entry)
        return entry

    def remove(self, key) -> Optional[QueueEntry]:
        cls = self._where.pop(key, None)
        if cls is None:
            return None
        sub = self._classes[cls]
        entry = sub.pop(key)
        if not sub:
            del self._classes[cls]
        return entry

    def touch(self, keys: Iterable, now: int) -> None:
        """Mark keys as used at `now`, in the given order."""
        for key in keys:
            if key not in self._where:
                continue
            entry = self.get(key)
            entry.last_access = now
            self._classes[self._where[key]].move_to_end(key)

    def reclassify(self, key, ratio: float, nbytes: int) -> None:
        entry = self.remove(key)
        if entry is None:
            return
        entry.ratio = float(ratio)
        entry.nbytes = int(nbytes)
        self._insert(entry)

    def evictable_bytes(self, skip: Optional[Callable[[Hashable], bool]] = None) -> int:
        return sum(e.nbytes for e in self if skip is None or not skip(e.key))

    def pop_for(self, needed_bytes: int, skip: Optional[Callable[[Hashable], bool]] = None) -> List[QueueEntry]:
        """
        Remove and return the shortest prefix of the eviction order (skipping
        entries for which `skip` is true) whose bytes cover `needed_bytes`.
        The queue is left untouched when that is impossible.
        """
        if needed_bytes <= 0:
            return []
        chosen, freed = [], 0
        for entry in self:
            if skip is not None and skip(entry.key):
                continue
            chosen.append(entry)
            freed += entry.nbytes
            if freed >= needed_bytes:
                break
        if freed < needed_bytes:
            raise OutOfMemoryError(f"only {freed} evictable bytes, {needed_bytes} needed")
        for entry in chosen:
            self.remove(entry.key)
        return chosen
