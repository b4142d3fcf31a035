import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

from src.pipeline.planner import PipelinePlan
from src.service.logger import logger

_DONE = object()


@dataclass
class LoadReport:
    wall_seconds: float = 0.0
    bytes_read: int = 0
    chunks_loaded: int = 0
    chunks_recomputed: int = 0
    degraded: bool = False
    failed: List[int] = field(default_factory=list)    # chunk indices that fell back to recompute
    predicted_seconds: float = 0.0


def execute_overlapped(
    pipeline_plan: Optional[PipelinePlan],
    io_reader: Callable[[int], int],
    recomputer: Callable[[int], None],
    layers: int,
) -> LoadReport:
    """
    Run the per-layer load schedule on two lanes.

    An I/O thread calls io_reader(layer) for every layer in order, handing each
    finished layer to the compute lane through a queue; recomputer(layer) only
    starts once that layer's I/O has arrived, so layer l+1 is read while layer
    l is recomputed. io_reader returns the bytes it read.
    """
    handoff: "queue.Queue" = queue.Queue()
    report = LoadReport(predicted_seconds=pipeline_plan.predicted_delay if pipeline_plan else 0.0,
                        chunks_recomputed=pipeline_plan.recompute_count if pipeline_plan else 0)

    def io_lane():
        try:
            for layer in range(layers):
                handoff.put((layer, io_reader(layer)))
        except BaseException as e:      # surfaced on the compute lane
            handoff.put((_DONE, e))

    start = time.perf_counter()
    reader = threading.Thread(target=io_lane, name="llms-io", daemon=True)
    reader.start()
    try:
        for expected in range(layers):
            layer, payload = handoff.get()
            if layer is _DONE:
                raise payload
            report.bytes_read += int(payload)
            recomputer(expected)
    finally:
        reader.join()
    report.wall_seconds = time.perf_counter() - start
    logger.debug("overlapped load of %d layers: %d bytes, %d recomputed, %.4fs",
                 layers, report.bytes_read, report.chunks_recomputed, report.wall_seconds)
    return report
