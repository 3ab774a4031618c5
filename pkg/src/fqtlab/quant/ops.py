"""Quantize / dequantize with a fitted transform, plus exact variance oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fqtlab.quant.rounding import deterministic_round, stochastic_round, stochastic_round_variance
from fqtlab.quant.transforms import ScaleTransform

RANGE_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class QuantizedGrad:
    codes: np.ndarray
    transform: ScaleTransform

    def dequantize(self) -> np.ndarray:
        return self.transform.from_unit(self.codes.astype(np.float64))


def unit_values(m, t: ScaleTransform) -> np.ndarray:
    """S(m - z) clipped to [0, B]; raises if m lies outside the transform's range."""
    y = t.to_unit(m)
    big = t.bits.B
    lo, hi = float(y.min()), float(y.max())
    if lo < -RANGE_SLACK or hi > big + RANGE_SLACK:
        raise ValueError(f"transformed values span [{lo:.6g}, {hi:.6g}], outside [0, {big}]; transform was not fitted on this matrix")
    return np.clip(y, 0.0, big)


def quantize_stochastic(m, t: ScaleTransform, rng, rounding: str = "stochastic") -> QuantizedGrad:
    """Integer codes SR(S(m - z)).

    ``rounding="nearest"`` swaps in deterministic rounding; that quantizer is
    biased and exists only as a negative control for the bias harness.
    """
    y = unit_values(m, t)
    if rounding == "stochastic":
        codes = stochastic_round(y, rng)
    elif rounding == "nearest":
        codes = deterministic_round(y)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    return QuantizedGrad(codes.astype(np.uint8), t)


def dequantize(q: QuantizedGrad) -> np.ndarray:
    return q.dequantize()


def exact_conditional_variance(m, t: ScaleTransform):
    """Exact Var[Q(m) | m]: per-entry matrix and its total."""
    v = stochastic_round_variance(unit_values(m, t))
    per_entry = t.entry_variance(v)
    return per_entry, float(np.sum(per_entry))


def expected_dequantized(m, t: ScaleTransform) -> np.ndarray:
    """E[dequantize(quantize_stochastic(m, t))] computed without sampling."""
    return t.from_unit(unit_values(m, t))


def variance_bound(t: ScaleTransform, d: int) -> float:
    """Closed-form upper bound on the quantizer variance for ``d`` columns."""
    return t.bound(d)
