"""FQT backward passes for many trials at once.

Arrays carry a leading trial axis.  Trial ``t`` consumes exactly the uniforms
that ``Substream(seed, t, layer, slot)`` would, so a batched run reproduces the
single-trial :func:`fqtlab.net.backward_fqt` draw for draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fqtlab import kernels
from fqtlab.net import Linear, Network, QuantScheme, Tape
from fqtlab.quant import QuantBits, deterministic_round, fit_transform, stochastic_round_variance, unit_values
from fqtlab.quant.transforms import MAX_SCALE
from fqtlab.rng import SLOT_ACT_GRAD, SLOT_WEIGHT_GRAD, split_seed


@dataclass
class BatchDraw:
    """One quantizer applied to a stack of gradients.

    ``unit_var`` holds the exact SR variances p(1-p) in unit space.  For the
    per-tensor and per-sample families ``inv_scale_sq`` (T, N) gives 1/s_i^2;
    block Householder draws keep their fitted ``transforms`` instead.
    """

    values: np.ndarray
    unit_var: np.ndarray
    inv_scale_sq: np.ndarray | None = None
    transforms: list | None = None

    def exact_variance(self) -> np.ndarray:
        """Per-trial Var[Q(g) | g] summed over entries."""
        if self.transforms is None:
            return np.sum(self.unit_var * self.inv_scale_sq[:, :, None], axis=(1, 2))
        return np.array([float(np.sum(t.entry_variance(v))) for t, v in zip(self.transforms, self.unit_var)])


def _round(unit, seed, trials, layer, slot, rounding):
    t, n, d = unit.shape
    if rounding == "nearest":
        return deterministic_round(unit).astype(np.float64)
    k0, k1 = split_seed(seed)
    flat = np.ascontiguousarray(unit.reshape(t, n * d))
    return kernels.stochastic_round_codes(flat, k0, k1, trials, layer, slot).reshape(t, n, d)


def quantize_batch(g, variant, bits, seed, trials, layer, slot, rounding="stochastic") -> BatchDraw:
    g = np.asarray(g, dtype=np.float64)
    trials = np.asarray(trials, dtype=np.uint64)
    if bits is None:
        return BatchDraw(g, np.zeros_like(g), np.zeros(g.shape[:2]))
    big = QuantBits(bits).B
    if variant in ("ptq", "psq"):
        axis = (1, 2) if variant == "ptq" else 2
        lo = g.min(axis=axis, keepdims=True)
        r = g.max(axis=axis, keepdims=True) - lo
        degenerate = r == 0.0
        with np.errstate(over="ignore"):
            scale = np.where(degenerate, 1.0, np.minimum(big / np.where(degenerate, 1.0, r), MAX_SCALE))
        unit = (g - lo) * scale
        if unit.min() < -1e-9 or unit.max() > big + 1e-9:
            raise ValueError("transformed values outside [0, B]")
        unit = np.clip(unit, 0.0, big)
        codes = _round(unit, seed, trials, layer, slot, rounding)
        values = codes / scale + lo
        inv = np.broadcast_to((1.0 / scale) ** 2, (g.shape[0], g.shape[1], 1))[:, :, 0]
        return BatchDraw(values, stochastic_round_variance(unit), np.ascontiguousarray(inv))
    if variant == "bhq":
        values = np.empty_like(g)
        unit_var = np.empty_like(g)
        transforms = []
        for i in range(g.shape[0]):
            t = fit_transform(g[i], "bhq", bits)
            unit = unit_values(g[i], t)
            codes = _round(unit[None], seed, trials[i : i + 1], layer, slot, rounding)[0]
            values[i] = t.from_unit(codes)
            unit_var[i] = stochastic_round_variance(unit)
            transforms.append(t)
        return BatchDraw(values, unit_var, None, transforms)
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class LayerTrace:
    grad_in: np.ndarray  # gradient reaching the layer's quantizers, (T, N, D)
    weight_draw: BatchDraw
    act_draw: BatchDraw


def backward_fqt_batch(net: Network, tape: Tape, top_grad, scheme: QuantScheme, seed: int, trials, keep_trace=False):
    """Per-trial parameter gradients (list, (T, in, out) or None) and optional traces."""
    trials = np.asarray(trials, dtype=np.uint64)
    g = np.broadcast_to(np.asarray(top_grad, dtype=np.float64), (trials.shape[0],) + np.shape(top_grad)).copy()
    n = len(net.layers)
    params = [None] * n
    traces = {}
    for i in range(n - 1, -1, -1):
        if isinstance(net.layers[i], Linear):
            q1 = quantize_batch(g, "ptq", scheme.grad_weight_bits, seed, trials, i, SLOT_WEIGHT_GRAD, scheme.rounding)
            q2 = quantize_batch(g, scheme.variant, scheme.grad_act_bits, seed, trials, i, SLOT_ACT_GRAD, scheme.rounding)
            params[i] = np.matmul(tape.inputs[i].T, q1.values)
            if keep_trace:
                traces[i] = LayerTrace(g, q1, q2)
            g = np.matmul(q2.values, tape.weights[i].T)
        else:
            g = g * (tape.h[i] > 0.0)
    return params, traces


def flatten_params(params) -> np.ndarray:
    """(T, P) with linear-layer gradients concatenated in layer order."""
    parts = [p.reshape(p.shape[0], -1) for p in params if p is not None]
    return np.concatenate(parts, axis=1)
