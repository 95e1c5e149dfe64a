"""Per-stage wall-clock timers for the performance harness."""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager


class StageTimer:
    """Accumulates seconds per (key, stage); a key is usually one request."""

    def __init__(self) -> None:
        self.samples: dict = defaultdict(lambda: defaultdict(float))

    @contextmanager
    def stage(self, key, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.samples[key][name] += time.perf_counter() - start

    def add(self, key, name: str, seconds: float) -> None:
        self.samples[key][name] += seconds

    def totals(self) -> dict:
        out: dict = defaultdict(float)
        for stages in self.samples.values():
            for name, v in stages.items():
                out[name] += v
        return dict(out)


@contextmanager
def maybe_stage(timer: StageTimer | None, key, name: str):
    if timer is None:
        yield
    else:
        with timer.stage(key, name):
            yield
