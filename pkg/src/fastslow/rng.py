"""Counter-based random streams.

Every draw is addressed by ``(seed, purpose, lane)``: a Philox generator is
keyed by the master seed and its counter's high words hold the purpose and
the lane number.  A lane serves ``LANE_WIDTH`` consecutive ensemble members
and lays its draws out time-major (one row of ``LANE_WIDTH`` values per
step), so member ``i`` sees the same numbers no matter how many members are
requested, how time is chunked, or how lanes are scheduled on threads.
"""

from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum

import numpy as np

LANE_WIDTH = 64
_SEED_MASK = (1 << 64) - 1


class Purpose(IntEnum):
    FAST = 1
    BROWNIAN = 2
    TIEBREAK = 3
    SDE = 4
    BOOTSTRAP = 5
    AUXILIARY = 6


def generator(seed, purpose, index=0):
    """Independent generator for one ``(seed, purpose, index)`` address."""
    counter = [0, 0, int(purpose), int(index)]
    return np.random.Generator(np.random.Philox(key=int(seed) & _SEED_MASK, counter=counter))


def parallel_map(fn, items, threads=1):
    """Ordered map; uses a thread pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class LaneStreams:
    """Time-major random rows for ensemble members ``[first, first + count)``."""

    def __init__(self, seed, purpose, first, count, threads=1):
        if count < 1:
            raise ValueError("count must be positive")
        self.count = int(count)
        self.first = int(first)
        self.threads = threads
        lo = self.first // LANE_WIDTH
        hi = (self.first + self.count - 1) // LANE_WIDTH
        self.offset = self.first - lo * LANE_WIDTH
        self.generators = [generator(seed, purpose, lane) for lane in range(lo, hi + 1)]

    def _gather(self, draw):
        blocks = parallel_map(draw, self.generators, self.threads)
        rows = np.concatenate(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        return rows[self.offset:self.offset + self.count]

    def uniform(self, steps, width=1):
        """Uniforms on [0, 1) with shape ``(count, steps, width)``."""
        def draw(g):
            return g.random((steps, LANE_WIDTH, width)).transpose(1, 0, 2)
        return self._gather(draw)

    def normal(self, steps, width=1):
        """Standard normals with shape ``(count, steps, width)``."""
        def draw(g):
            return g.standard_normal((steps, LANE_WIDTH, width)).transpose(1, 0, 2)
        return self._gather(draw)
