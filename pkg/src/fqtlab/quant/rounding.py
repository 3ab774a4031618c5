"""Bit widths and the two rounding rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_BITS = 2
MAX_BITS = 8


@dataclass(frozen=True)
class QuantBits:
    """A b-bit code covers the integer bins 0..B with B = 2**b - 1."""

    b: int

    def __post_init__(self):
        if not isinstance(self.b, (int, np.integer)) or not MIN_BITS <= self.b <= MAX_BITS:
            raise ValueError(f"bit count must be an integer in [{MIN_BITS}, {MAX_BITS}], got {self.b!r}")

    @property
    def B(self) -> int:
        return 2 ** int(self.b) - 1


def as_bits(bits) -> QuantBits:
    return bits if isinstance(bits, QuantBits) else QuantBits(int(bits))


def stochastic_round(m, rng) -> np.ndarray:
    """Round each entry up with probability equal to its fractional part.

    ``rng`` is anything with a ``random(shape)`` method returning uniforms in
    [0, 1): a :class:`fqtlab.rng.Substream` or a ``numpy.random.Generator``.
    """
    x = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("stochastic_round needs finite input")
    lo = np.floor(x)
    u = rng.random(x.shape)
    return (lo + (u < x - lo)).astype(np.int64)


def round_fraction(m) -> np.ndarray:
    """Fractional part x - floor(x), i.e. the probability of rounding up."""
    x = np.asarray(m, dtype=np.float64)
    return x - np.floor(x)


def stochastic_round_variance(m) -> np.ndarray:
    p = round_fraction(m)
    return p * (1.0 - p)


def deterministic_round(m) -> np.ndarray:
    """Round to nearest, ties away from zero."""
    x = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("deterministic_round needs finite input")
    whole = np.trunc(x)
    frac = x - whole
    return (whole + np.sign(frac) * (np.abs(frac) >= 0.5)).astype(np.int64)
