"""Counter-based random streams.

Words come from numpy's Philox4x64 keyed by ``(root_seed, stream_id)`` and
positioned at ``counter`` blocks (4 words each), so a stream state fully
determines its output on every platform.
"""
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    root_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("root_seed", "stream_id", "counter"):
            value = int(getattr(self, name))
            if not 0 <= value <= _MASK64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")
            setattr(self, name, value)

    def spawn(self, stream_id):
        """Independent stream sharing this root seed."""
        return RngStream(self.root_seed, stream_id, 0)

    def words(self, n):
        """Draw ``n`` raw 64-bit words and advance the counter (whole blocks only)."""
        blocks = -(-int(n) // 4)
        if blocks == 0:
            return np.empty(0, dtype=np.uint64)
        gen = np.random.Philox(key=[self.root_seed, self.stream_id],
                               counter=[self.counter, 0, 0, 0])
        out = gen.random_raw(4 * blocks)
        self.counter = (self.counter + blocks) & _MASK64
        return out[:n]

    def uniform(self, n):
        """``n`` doubles in the open interval (0, 1): ``((w >> 11) + 0.5) / 2**53``."""
        w = self.words(n)
        return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def integers(self, low, high, n):
        """``n`` integers uniform on ``[low, high)`` via floor(u * span)."""
        if high <= low:
            raise ValueError("empty integer range")
        span = high - low
        return low + np.minimum(np.floor(self.uniform(n) * span).astype(np.int64), span - 1)


def gaussian(stream, dims):
    """Standard normal tensor of shape ``dims`` (Box-Muller on paired uniforms)."""
    dims = tuple(int(d) for d in np.atleast_1d(dims)) if not isinstance(dims, tuple) else dims
    n = int(np.prod(dims, dtype=np.int64))
    pairs = -(-n // 2)
    u = stream.uniform(2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(dims)
