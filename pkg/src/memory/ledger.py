import threading
from typing import Dict, Hashable, Tuple

from src.service.errors import ConsistencyError, InsufficientMemoryError


class MemoryLedger:
    """
    Byte accounting of in-memory chunk payloads against a fixed budget.

    Channel scales/zero points are tracked as overhead next to, not inside,
    the budgeted bytes.
    """

    def __init__(self, budget_bytes: int):
        if budget_bytes < 0:
            raise ValueError("budget must be non-negative")
        self.budget = int(budget_bytes)
        self.used = 0
        self.metadata_bytes = 0
        self._entries: Dict[Hashable, Tuple[int, int]] = {}
        self.lock = threading.RLock()

    @property
    def free(self) -> int:
        return self.budget - self.used

    def __contains__(self, key):
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    def nbytes(self, key) -> int:
        return self._entries[key][0]

    def claim(self, key, nbytes: int, metadata: int = 0) -> None:
        with self.lock:
            if key in self._entries:
                raise ConsistencyError(f"{key} already holds memory")
            if nbytes > self.free:
                raise InsufficientMemoryError(f"need {nbytes} bytes, {self.free} free")
            self._entries[key] = (nbytes, metadata)
            self.used += nbytes
            self.metadata_bytes += metadata

    def release(self, key) -> int:
        with self.lock:
            nbytes, metadata = self._entries.pop(key)
            self.used -= nbytes
            self.metadata_bytes -= metadata
            return nbytes

    def resize(self, key, nbytes: int) -> None:
        with self.lock:
            old, metadata = self._entries[key]
            if nbytes - old > self.free:
                raise InsufficientMemoryError(f"growing {key} by {nbytes - old} bytes, {self.free} free")
            self._entries[key] = (nbytes, metadata)
            self.used += nbytes - old
