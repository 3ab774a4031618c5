"""Counter-based random substreams.

Every uniform is a pure function of (master seed, trial, layer, slot, entry),
computed with Philox4x32-10.  A substream therefore produces the same numbers
whether it is drawn alone or as one row of a vectorised batch of trials, and
trials can be evaluated in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fqtlab import kernels

# slot ids for the two independent gradient quantizers of a linear layer
SLOT_WEIGHT_GRAD = 0
SLOT_ACT_GRAD = 1


def split_seed(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _check_u32(name, value):
    if not 0 <= int(value) < 2**32:
        raise ValueError(f"{name} must be in [0, 2**32), got {value}")


@dataclass(frozen=True)
class Substream:
    """Uniform stream for one (trial, layer, slot) under a master seed."""

    seed: int
    trial: int = 0
    layer: int = 0
    slot: int = 0

    def __post_init__(self):
        split_seed(self.seed)
        _check_u32("trial", self.trial)
        _check_u32("layer", self.layer)
        _check_u32("slot", self.slot)

    def random(self, shape) -> np.ndarray:
        """Uniforms in [0, 1) laid out in C order over ``shape``."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape))
        k0, k1 = split_seed(self.seed)
        trials = np.array([self.trial], dtype=np.uint64)
        return kernels.uniforms(k0, k1, trials, self.layer, self.slot, n).reshape(shape)

    def child(self, layer: int, slot: int) -> "Substream":
        return Substream(self.seed, self.trial, layer, slot)


def batch_uniforms(seed: int, trials, layer: int, slot: int, n: int) -> np.ndarray:
    """Uniforms for many trials at once; row ``i`` equals ``Substream(seed, trials[i], layer, slot).random(n)``."""
    k0, k1 = split_seed(seed)
    return kernels.uniforms(k0, k1, np.asarray(trials, dtype=np.uint64), layer, slot, n)
