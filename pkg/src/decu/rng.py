"""Counter-based seeded random streams.

Every draw is a pure function of a 64-bit key and a 64-bit position counter,
so results do not depend on call order, thread count or platform. Raw bits
come from numpy's Philox4x64 bit generator (a counter-based generator); normal
variates are produced by Box-Muller on pairs of uniforms.
"""

import hashlib
import math

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_key(seed, tag, *index):
    """64-bit stream key for ``(seed, tag, index...)``.

    Distinct purpose tags or indices give unrelated keys, which is what keeps
    streams inside one run from overlapping.
    """
    text = "|".join([str(int(seed)), str(tag)] + [str(int(i)) for i in index])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def raw_bits(key, start, n):
    """``n`` raw 64-bit words at positions ``start, start+1, ...`` of stream ``key``."""
    if n < 0 or start < 0:
        raise ValueError("positions must be non-negative")
    block, offset = divmod(int(start), 4)
    gen = np.random.Philox(key=int(key) & _MASK64, counter=block)
    return gen.random_raw(n + offset)[offset:]


def bits_to_uniform(bits):
    """Map 64-bit words to doubles strictly inside (0, 1)."""
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


class SeededStream:
    """Sequential view over a counter-based stream.

    ``key`` selects the stream and ``counter`` is the position of the next raw
    word. Each uniform consumes one word, each normal consumes two.
    """

    def __init__(self, key, counter=0):
        self.key = int(key) & _MASK64
        self.counter = int(counter)

    @classmethod
    def for_purpose(cls, seed, tag, *index):
        return cls(derive_key(seed, tag, *index))

    def __repr__(self):
        return f"SeededStream(key={self.key:#018x}, counter={self.counter})"

    def _take(self, n):
        bits = raw_bits(self.key, self.counter, n)
        self.counter += n
        return bits

    def uniform(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = bits_to_uniform(self._take(n))
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = bits_to_uniform(self._take(2 * n))
        z = box_muller(u[0::2], u[1::2])
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high, size=None):
        """Integers uniform on ``[0, high)``."""
        if high < 1:
            raise ValueError("high must be >= 1")
        u = self.uniform(1 if size is None else size)
        k = np.minimum((np.asarray(u) * high).astype(np.int64), high - 1)
        return int(k.reshape(-1)[0]) if size is None else k

    def choice_without_replacement(self, n, k):
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        order = np.argsort(self.uniform(n), kind="stable")
        return order[:k]


def box_muller(u1, u2):
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

