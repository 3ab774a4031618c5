"""Monte Carlo checks of FQT gradient statistics against exact oracles.

All checks condition on one fixed batch unless stated otherwise, so the QAT
gradient is deterministic and every bit of variance comes from the gradient
quantizers.  Standard errors use batch means over 100 equal blocks of trials.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from fqtlab.batched import BatchDraw, backward_fqt_batch, flatten_params, quantize_batch
from fqtlab.net import Network, QuantScheme, backward_qat, forward_quantized, gamma, loss_and_grad
from fqtlab.quant import QuantBits, exact_conditional_variance, fit_transform, variance_bound
from fqtlab.rng import SLOT_ACT_GRAD
from fqtlab.tensor import operator_norm_sq

N_BLOCKS = 100
MIN_TRIALS = 100


@dataclass(frozen=True)
class MCConfig:
    trials: int = 10_000
    master_seed: int = 0

    def __post_init__(self):
        if self.trials < MIN_TRIALS:
            raise ValueError(f"need at least {MIN_TRIALS} trials for batch-means errors, got {self.trials}")

    def blocks(self):
        """Trial index arrays for the 100 batch-means blocks."""
        return np.array_split(np.arange(self.trials, dtype=np.uint64), N_BLOCKS)


class _Moments:
    """Mean and centred sum of squares, merged block by block (Chan et al.)."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def add(self, x):
        nb = x.shape[0]
        mb = x.mean(axis=0)
        m2b = np.sum((x - mb) ** 2, axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.n * nb / n)
        self.n = n

    def variance(self):
        return self.m2 / (self.n - 1)


def _variance_blocks(mc: MCConfig):
    """Blocks for variance estimates, which need two trials per block."""
    if mc.trials < 2 * N_BLOCKS:
        raise ValueError(f"variance estimates need at least {2 * N_BLOCKS} trials, got {mc.trials}")
    return mc.blocks()


def _batch_se(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.std(v, ddof=1) / math.sqrt(v.shape[0]))


def _fsum(values) -> float:
    return math.fsum(float(v) for v in np.ravel(values))


def _prepare(net, x, y, scheme, top_grad):
    _, tape = forward_quantized(net, x, scheme)
    if top_grad is None:
        _, top_grad = loss_and_grad(tape.h[-1], y)
    return tape, np.asarray(top_grad, dtype=np.float64)


# -- bias -----------------------------------------------------------------------


@dataclass
class BiasReport:
    trials: int
    k_se: float
    fqt_mean: np.ndarray
    qat: np.ndarray
    se: np.ndarray
    within_fraction: float
    max_abs_z: float
    passed: bool
    required_fraction: float = 0.99

    def to_dict(self):
        return {
            "trials": self.trials,
            "k_se": self.k_se,
            "n_coordinates": int(self.qat.size),
            "within_fraction": self.within_fraction,
            "required_fraction": self.required_fraction,
            "max_abs_z": self.max_abs_z,
            "max_abs_deviation": float(np.max(np.abs(self.fqt_mean - self.qat))),
            "passed": self.passed,
        }

    def rows(self):
        return [
            {"coordinate": i, "qat": float(q), "fqt_mean": float(m), "se": float(s)}
            for i, (q, m, s) in enumerate(zip(self.qat, self.fqt_mean, self.se))
        ]


def bias_check(net: Network, x, y, scheme: QuantScheme, mc: MCConfig, top_grad=None, k_se: float = 4.0, required_fraction: float = 0.99) -> BiasReport:
    """Compare the Monte Carlo mean of the FQT gradient with the QAT gradient."""
    tape, top = _prepare(net, x, y, scheme, top_grad)
    qat = np.concatenate([p.ravel() for p in backward_qat(net, tape, top).params if p is not None])
    mom = _Moments()
    for trials in mc.blocks():
        params, _ = backward_fqt_batch(net, tape, top, scheme, mc.master_seed, trials)
        mom.add(flatten_params(params))
    se = np.sqrt(mom.variance() / mom.n)
    dev = np.abs(mom.mean - qat)
    # zero-variance coordinates must match up to rounding noise of the matmuls
    tol = k_se * se + 1e-12 * (1.0 + np.abs(qat))
    within = dev <= tol
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, dev / se, np.where(dev > 1e-12 * (1.0 + np.abs(qat)), np.inf, 0.0))
    frac = float(np.mean(within))
    return BiasReport(mc.trials, k_se, mom.mean, qat, se, frac, float(np.max(z)), frac >= required_fraction, required_fraction)


# -- variance decomposition ---------------------------------------------------


@dataclass
class SourceTerm:
    """Average exact conditional variance that one quantizer sends to one parameter."""

    k: int  # layer whose parameter gradient receives the noise
    l: int  # layer whose gradient quantizer injects it
    slot: str  # "weight" (Q_b1, only k == l) or "act" (Q_b2, k < l)
    mean: float
    se: float


@dataclass
class VarianceReport:
    trials: int
    total_mc: float
    total_mc_se: float
    terms: list
    terms_sum: float
    terms_sum_se: float
    difference_se: float
    qat_variance: float
    bound_eq8: float
    bound_eq8_se: float
    bound_eq10: float | None
    bound_eq10_se: float | None
    quantizer_variances: dict = field(default_factory=dict)

    @property
    def difference(self) -> float:
        return self.total_mc - self.terms_sum

    def decomposition_holds(self, k_se: float = 3.0) -> bool:
        if self.total_mc_se == 0.0:
            return abs(self.difference) <= 1e-12 * (1.0 + abs(self.total_mc))
        return abs(self.difference) <= k_se * self.total_mc_se

    def to_dict(self):
        d = asdict(self)
        d["difference"] = self.difference
        d["decomposition_holds"] = self.decomposition_holds()
        return d


def _gamma_tables(net, tape):
    """For each (k, l) pair: squared row norms of gamma (N, D_l), its Gram per
    column (D_l, N, N) and its squared operator norm."""
    tables = {}
    n = tape.batch_size
    lin = net.linear_indices
    for l in lin:
        d = net.layers[l].out_dim
        for k in lin:
            if k > l:
                continue
            gm = gamma(net, tape, k, l).reshape(n, d, -1)
            tables[(k, l)] = {
                "row_sq": np.sum(gm**2, axis=2),
                "gram": np.einsum("ajp,bjp->jab", gm, gm),
                "op_sq": operator_norm_sq(gm.reshape(n * d, -1)),
            }
    return tables


def _propagated_variance(draw: BatchDraw, table) -> np.ndarray:
    """Per trial Var[vec(Q(g)) gamma | g], exact."""
    if draw.transforms is None:
        return np.einsum("tnd,tn,nd->t", draw.unit_var, draw.inv_scale_sq, table["row_sq"])
    out = np.empty(len(draw.transforms))
    for i, (t, v) in enumerate(zip(draw.transforms, draw.unit_var)):
        a = t.inverse_matrix()
        # weight of noise entry (r, j): a[:, r]^T gram_j a[:, r]
        w = np.einsum("ar,jab,br->rj", a, table["gram"], a)
        out[i] = float(np.sum(v * w))
    return out


def _bound_variance(draw: BatchDraw, g, variant, bits):
    if bits is None:
        return np.zeros(g.shape[0])
    return np.array([variance_bound(fit_transform(gi, variant, bits), gi.shape[1]) for gi in g])


def variance_decomposition(net: Network, x, y, scheme: QuantScheme, mc: MCConfig, top_grad=None) -> VarianceReport:
    """Total Monte Carlo variance of the parameter gradient next to the sum of
    exact per-source terms, plus the operator-norm and closed-form bounds."""
    tape, top = _prepare(net, x, y, scheme, top_grad)
    tables = _gamma_tables(net, tape)
    lin = net.linear_indices
    keys = [(l, l, "weight") for l in lin] + [(k, l, "act") for l in lin for k in lin if k < l]
    closed_ok = scheme.variant == "ptq"

    mom = _Moments()
    block_totals, block_terms = [], {key: [] for key in keys}
    term_sum = {key: 0.0 for key in keys}
    eq8_blocks, eq10_blocks = [], []
    qvar = {}
    for trials in _variance_blocks(mc):
        params, traces = backward_fqt_batch(net, tape, top, scheme, mc.master_seed, trials, keep_trace=True)
        flat = flatten_params(params)
        block_totals.append(float(np.sum(np.var(flat, axis=0, ddof=1))))
        mom.add(flat)
        eq8 = np.zeros(len(trials))
        eq10 = np.zeros(len(trials))
        for k, l, slot in keys:
            draw = traces[l].weight_draw if slot == "weight" else traces[l].act_draw
            vals = _propagated_variance(draw, tables[(k, l)])
            block_terms[(k, l, slot)].append(float(np.mean(vals)))
            term_sum[(k, l, slot)] += _fsum(vals)
        for l in lin:
            tr = traces[l]
            w_exact = tr.weight_draw.exact_variance()
            a_exact = tr.act_draw.exact_variance()
            up = sum(tables[(k, l)]["op_sq"] for k in lin if k < l)
            eq8 += w_exact * tables[(l, l)]["op_sq"] + a_exact * up
            qvar.setdefault(f"layer{l}_weight", []).append(float(np.mean(w_exact)))
            qvar.setdefault(f"layer{l}_act", []).append(float(np.mean(a_exact)))
            if closed_ok:
                eq10 += _bound_variance(tr.weight_draw, tr.grad_in, "ptq", scheme.grad_weight_bits) * tables[(l, l)]["op_sq"]
                eq10 += _bound_variance(tr.act_draw, tr.grad_in, "ptq", scheme.grad_act_bits) * up
        eq8_blocks.append(float(np.mean(eq8)))
        eq10_blocks.append(float(np.mean(eq10)))

    t = mc.trials
    terms = [SourceTerm(k, l, slot, term_sum[(k, l, slot)] / t, _batch_se(block_terms[(k, l, slot)])) for k, l, slot in keys]
    block_sum = np.sum([block_terms[key] for key in keys], axis=0) if keys else np.zeros(N_BLOCKS)
    sizes = np.array([len(b) for b in mc.blocks()], dtype=np.float64)
    weights = sizes / sizes.sum()
    total = _fsum(mom.variance())
    return VarianceReport(
        trials=t,
        total_mc=total,
        total_mc_se=_batch_se(block_totals),
        terms=terms,
        terms_sum=math.fsum(term.mean for term in terms),
        terms_sum_se=_batch_se(block_sum),
        difference_se=_batch_se(np.asarray(block_totals) - block_sum),
        qat_variance=0.0,
        bound_eq8=_fsum(np.asarray(eq8_blocks) * weights),
        bound_eq8_se=_batch_se(eq8_blocks),
        bound_eq10=_fsum(np.asarray(eq10_blocks) * weights) if closed_ok else None,
        bound_eq10_se=_batch_se(eq10_blocks) if closed_ok else None,
        quantizer_variances={key: _fsum(np.asarray(v) * weights) for key, v in qvar.items()},
    )


@dataclass
class BoundCheck:
    passed: bool
    details: list

    def to_dict(self):
        return {"passed": self.passed, "details": self.details}


def bound_check(report: VarianceReport, k_se: float = 3.0) -> BoundCheck:
    """Measured total <= operator-norm bound <= per-tensor closed form, with SE slack."""
    details = []

    def check(name, lhs, rhs, slack):
        ok = lhs <= rhs + slack + 1e-12 * max(abs(rhs), 1.0)
        details.append({"check": name, "lhs": lhs, "rhs": rhs, "slack": slack, "passed": bool(ok)})
        return ok

    slack = k_se * math.hypot(report.total_mc_se, report.bound_eq8_se)
    ok = check("total_mc <= bound_eq8", report.total_mc, report.bound_eq8, slack)
    ok &= check("terms_sum <= bound_eq8", report.terms_sum, report.bound_eq8, 0.0)
    if report.bound_eq10 is not None:
        ok &= check("bound_eq8 <= bound_eq10", report.bound_eq8, report.bound_eq10, 0.0)
        ok &= check("total_mc <= bound_eq10", report.total_mc, report.bound_eq10, k_se * math.hypot(report.total_mc_se, report.bound_eq10_se))
    return BoundCheck(bool(ok), details)


# -- bit sweep ------------------------------------------------------------------


@dataclass
class SweepRow:
    layer: int
    bits: int
    exact_variance: float
    bound: float
    mc_variance: float
    mc_se: float
    ratio_to_next_bit: float | None  # Var(b) / Var(b + 1); None when undefined


def bit_sweep(net: Network, x, y, variant: str, bits_list, mc: MCConfig, top_grad=None, forward_bits: int = 8) -> list:
    """Exact quantizer variance of each linear layer's QAT activation gradient per bit width.

    The Monte Carlo column re-estimates the same variance from ``mc.trials``
    draws; its ``mc_se`` comes from batch means.
    """
    bits_list = sorted(int(b) for b in bits_list)
    for b in bits_list:
        QuantBits(b)
    scheme = QuantScheme(forward_bits, None, None, variant)
    tape, top = _prepare(net, x, y, scheme, top_grad)
    qat = backward_qat(net, tape, top)
    rows = []
    for i in net.linear_indices:
        g = qat.outputs[i]
        by_bits = {}
        for b in bits_list:
            t = fit_transform(g, variant, b)
            _, exact = exact_conditional_variance(g, t)
            mom = _Moments()
            blocks = []
            for trials in _variance_blocks(mc):
                draw = quantize_batch(np.broadcast_to(g, (len(trials),) + g.shape), variant, b, mc.master_seed, trials, i, SLOT_ACT_GRAD)
                flat = draw.values.reshape(len(trials), -1)
                blocks.append(float(np.sum(np.var(flat, axis=0, ddof=1))))
                mom.add(flat)
            by_bits[b] = SweepRow(i, b, exact, variance_bound(t, g.shape[1]), _fsum(mom.variance()), _batch_se(blocks), None)
        for b in bits_list:
            nxt = by_bits.get(b + 1)
            if nxt is not None and nxt.exact_variance > 0.0:
                by_bits[b].ratio_to_next_bit = by_bits[b].exact_variance / nxt.exact_variance
            rows.append(by_bits[b])
    return rows


def bin_count_ratio(b: int) -> float:
    """((2^b - 1) / (2^(b-1) - 1))^2: how much a bound grows when dropping from b to b-1 bits."""
    return (QuantBits(b).B / QuantBits(b - 1).B) ** 2


# -- sparse gradients -----------------------------------------------------------


def sparse_gradient(n_rows: int, lambda1: float, lambda2: float, d: int, seed: int = 0) -> np.ndarray:
    """One row with range ``lambda1`` and ``n_rows - 1`` rows of sup-norm ``lambda2 / 2``."""
    if n_rows < 2 or d < 2:
        raise ValueError("need at least two rows and two columns")
    if not lambda1 > 0 or lambda2 < 0:
        raise ValueError("need lambda1 > 0 and lambda2 >= 0")
    rng = np.random.default_rng(seed)
    g = np.empty((n_rows, d))
    g[0] = rng.uniform(0.0, lambda1, d)
    g[0, 0], g[0, 1] = 0.0, lambda1
    half = lambda2 / 2.0
    g[1:] = rng.uniform(-half, half, (n_rows - 1, d))
    g[np.arange(1, n_rows), np.arange(1, n_rows) % d] = half
    return g


@dataclass
class SparseRow:
    variant: str
    n_rows: int
    exact_variance: float
    bound: float
    groups: int | None = None


def sparse_gradient_bench(n_rows: int, lambda1: float, lambda2: float, d: int, bits: int, seed: int = 0) -> list:
    g = sparse_gradient(n_rows, lambda1, lambda2, d, seed)
    rows = []
    for variant in ("ptq", "psq", "bhq"):
        t = fit_transform(g, variant, bits)
        _, exact = exact_conditional_variance(g, t)
        rows.append(SparseRow(variant, n_rows, exact, variance_bound(t, d), len(t.groups) if variant == "bhq" else None))
    return rows


def ordering_holds(rows) -> bool:
    v = {r.variant: r.exact_variance for r in rows}
    return v["bhq"] < v["psq"] < v["ptq"]


# -- batch resampling ---------------------------------------------------------------


@dataclass
class ResamplingReport:
    total: float
    qat_variance: float
    quant_terms: float
    total_se: float

    def to_dict(self):
        return asdict(self)


def batch_resampling_decomposition(net: Network, features, labels, batch_size: int, scheme: QuantScheme, n_batches: int, trials_per_batch: int, seed: int = 0) -> ResamplingReport:
    """Unconditional gradient variance with random batches next to
    Var(QAT gradient over batches) + E[quantizer variance given the batch]."""
    rng = np.random.default_rng(seed)
    samples, qats, terms = [], [], []
    for b in range(n_batches):
        idx = rng.choice(features.shape[0], batch_size, replace=False)
        tape, top = _prepare(net, features[idx], labels[idx], scheme, None)
        qats.append(np.concatenate([p.ravel() for p in backward_qat(net, tape, top).params if p is not None]))
        trials = np.arange(b * trials_per_batch, (b + 1) * trials_per_batch, dtype=np.uint64)
        params, _ = backward_fqt_batch(net, tape, top, scheme, seed, trials)
        flat = flatten_params(params)
        samples.append(flat)
        terms.append(_fsum(np.var(flat, axis=0, ddof=1)))
    allv = np.concatenate(samples)
    grand = allv.mean(axis=0)
    # each batch's share of the total sum of squares gives a batch-means error
    shares = [float(np.sum((s - grand) ** 2)) / s.shape[0] for s in samples]
    return ResamplingReport(
        total=_fsum(np.var(allv, axis=0, ddof=1)),
        qat_variance=_fsum(np.var(np.array(qats), axis=0, ddof=1)),
        quant_terms=math.fsum(terms) / n_batches,
        total_se=_batch_se(shares),
    )
