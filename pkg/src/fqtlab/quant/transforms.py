"""Scale transforms S (with zero points) and the procedures that fit them.

Every transform maps a gradient matrix into "unit space", where a fitted
matrix lands inside [0, B], and maps integer codes back.  Three families:

* per-tensor: one scale and one zero point,
* per-sample: one scale and zero point per row,
* block Householder: rows are grouped; each group is scaled by
  diag(s1, s2, ..., s2) and then reflected by a Householder matrix that sends
  the group's large row onto the all-ones direction.  Zero points are applied
  after the rotation as per-row offsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from fqtlab import kernels
from fqtlab.quant.rounding import QuantBits, as_bits
from fqtlab.tensor import as_matrix

LAMBDA2_FLOOR = kernels.LAMBDA2_FLOOR
# keeps B / R finite when a range is subnormal
MAX_SCALE = 1e300


class ScaleTransform:
    """Common interface; see the concrete classes below."""

    kind: str
    bits: QuantBits
    n_rows: int

    def to_unit(self, m) -> np.ndarray:
        raise NotImplementedError

    def from_unit(self, y) -> np.ndarray:
        raise NotImplementedError

    def entry_variance(self, unit_var) -> np.ndarray:
        """Per-entry variance of the dequantized matrix, given unit-space SR variances."""
        raise NotImplementedError

    def inverse_matrix(self) -> np.ndarray:
        """Dense S^{-1} (N x N); the zero-point shift is not included."""
        raise NotImplementedError

    def inverse_frobenius_sq(self) -> float:
        return float(np.sum(self.inverse_matrix() ** 2))

    def bound(self, d: int) -> float:
        raise NotImplementedError

    def to_record(self) -> dict:
        raise NotImplementedError

    def _check_rows(self, m):
        a = as_matrix(m)
        if a.shape[0] != self.n_rows:
            raise ValueError(f"transform fitted for {self.n_rows} rows, got {a.shape[0]}")
        return a


@dataclass(frozen=True, eq=False)
class PerTensorTransform(ScaleTransform):
    bits: QuantBits
    n_rows: int
    scale: float
    zero: float
    degenerate: bool = False
    kind: str = field(default="ptq", init=False)

    def to_unit(self, m):
        return (self._check_rows(m) - self.zero) * self.scale

    def from_unit(self, y):
        return np.asarray(y, dtype=np.float64) / self.scale + self.zero

    def entry_variance(self, unit_var):
        return np.asarray(unit_var, dtype=np.float64) * (1.0 / self.scale) ** 2

    def inverse_matrix(self):
        return np.eye(self.n_rows) / self.scale

    def bound(self, d):
        if self.degenerate:
            return 0.0
        return self.n_rows * d / 4.0 * (1.0 / self.scale) ** 2

    def to_record(self):
        return {
            "variant": self.kind,
            "bits": int(self.bits.b),
            "n_rows": self.n_rows,
            "scale": float(self.scale),
            "zero": float(self.zero),
            "degenerate": bool(self.degenerate),
        }


@dataclass(frozen=True, eq=False)
class PerSampleTransform(ScaleTransform):
    bits: QuantBits
    scales: np.ndarray
    zeros: np.ndarray
    degenerate: np.ndarray
    kind: str = field(default="psq", init=False)

    @property
    def n_rows(self):
        return self.scales.shape[0]

    def to_unit(self, m):
        return (self._check_rows(m) - self.zeros[:, None]) * self.scales[:, None]

    def from_unit(self, y):
        return np.asarray(y, dtype=np.float64) / self.scales[:, None] + self.zeros[:, None]

    def entry_variance(self, unit_var):
        return np.asarray(unit_var, dtype=np.float64) * (1.0 / self.scales[:, None]) ** 2

    def inverse_matrix(self):
        return np.diag(1.0 / self.scales)

    def bound(self, d):
        inv = np.where(self.degenerate, 0.0, (1.0 / self.scales) ** 2)
        return d / 4.0 * float(np.sum(inv))

    def to_record(self):
        return {
            "variant": self.kind,
            "bits": int(self.bits.b),
            "n_rows": self.n_rows,
            "scales": [float(s) for s in self.scales],
            "zeros": [float(z) for z in self.zeros],
            "degenerate": [bool(x) for x in self.degenerate],
        }


@dataclass(frozen=True)
class HouseholderGroup:
    """One diagonal block of a block Householder transform.

    ``rows[0]`` is the large row.  ``lambda1``/``lambda2`` are the values the
    scales were computed from, after the degenerate-case adjustments.
    """

    rows: tuple
    s1: float
    s2: float
    lambda1: float
    lambda2: float
    degenerate: bool = False

    @property
    def large_row(self) -> int:
        return self.rows[0]

    @property
    def size(self) -> int:
        return len(self.rows)

    def bound_factor(self) -> float:
        """(lambda1^(2/3) n^(-1/3) + lambda2^(2/3) n^(2/3))^3, i.e. B^2 (s1^-2 + n s2^-2)."""
        if self.degenerate:
            return 0.0
        n = self.size
        return (self.lambda1 ** (2 / 3) * n ** (-1 / 3) + self.lambda2 ** (2 / 3) * n ** (2 / 3)) ** 3


@dataclass(frozen=True, eq=False)
class BlockHouseholderTransform(ScaleTransform):
    bits: QuantBits
    n_rows: int
    groups: tuple
    zeros: np.ndarray  # per-row shift applied before the rotation
    offsets: np.ndarray  # per-row shift applied after it
    kind: str = field(default="bhq", init=False)

    @cached_property
    def _layout(self):
        order = np.array([r for g in self.groups for r in g.rows], dtype=np.int64)
        starts = np.zeros(len(self.groups) + 1, dtype=np.int64)
        starts[1:] = np.cumsum([g.size for g in self.groups])
        s1 = np.array([g.s1 for g in self.groups], dtype=np.float64)
        s2 = np.array([g.s2 for g in self.groups], dtype=np.float64)
        return order, starts, s1, s2

    def rotate(self, m, inverse=False):
        """Apply S (or S^{-1}) without the offsets."""
        order, starts, s1, s2 = self._layout
        a = np.ascontiguousarray(m, dtype=np.float64)
        return kernels.block_householder(a, order, starts, s1, s2, inverse)

    def to_unit(self, m):
        return self.rotate(self._check_rows(m) - self.zeros[:, None]) - self.offsets[:, None]

    def from_unit(self, y):
        return self.rotate(np.asarray(y, dtype=np.float64) + self.offsets[:, None], inverse=True) + self.zeros[:, None]

    def inverse_matrix(self):
        a = np.zeros((self.n_rows, self.n_rows))
        for g in self.groups:
            idx = np.array(g.rows)
            scale = np.full(g.size, g.s2)
            scale[0] = g.s1
            a[np.ix_(idx, idx)] = householder_matrix(g.size) / scale[:, None]
        return a

    def entry_variance(self, unit_var):
        v = np.asarray(unit_var, dtype=np.float64)
        out = np.empty_like(v)
        for g in self.groups:
            idx = np.array(g.rows)
            scale = np.full(g.size, g.s2)
            scale[0] = g.s1
            a = householder_matrix(g.size) / scale[:, None]
            out[idx] = (a * a) @ v[idx]
        return out

    def bound(self, d):
        return d / (4.0 * self.bits.B**2) * sum(g.bound_factor() for g in self.groups)

    def to_record(self):
        return {
            "variant": self.kind,
            "bits": int(self.bits.b),
            "n_rows": self.n_rows,
            "groups": [
                {
                    "rows": [int(r) for r in g.rows],
                    "large_row": int(g.large_row),
                    "s1": float(g.s1),
                    "s2": float(g.s2),
                    "lambda1": float(g.lambda1),
                    "lambda2": float(g.lambda2),
                    "degenerate": bool(g.degenerate),
                }
                for g in self.groups
            ],
            "zeros": [float(z) for z in self.zeros],
            "offsets": [float(o) for o in self.offsets],
        }


# -- serialization ------------------------------------------------------------


def transform_from_record(rec: dict) -> ScaleTransform:
    bits = QuantBits(int(rec["bits"]))
    kind = rec["variant"]
    if kind == "ptq":
        return PerTensorTransform(bits, int(rec["n_rows"]), float(rec["scale"]), float(rec["zero"]), bool(rec["degenerate"]))
    if kind == "psq":
        return PerSampleTransform(
            bits,
            np.array(rec["scales"], dtype=np.float64),
            np.array(rec["zeros"], dtype=np.float64),
            np.array(rec["degenerate"], dtype=bool),
        )
    if kind == "bhq":
        groups = tuple(
            HouseholderGroup(tuple(g["rows"]), g["s1"], g["s2"], g["lambda1"], g["lambda2"], g["degenerate"])
            for g in rec["groups"]
        )
        return BlockHouseholderTransform(
            bits,
            int(rec["n_rows"]),
            groups,
            np.array(rec["zeros"], dtype=np.float64),
            np.array(rec["offsets"], dtype=np.float64),
        )
    raise ValueError(f"unknown transform variant {kind!r}")


def dumps_transform(t: ScaleTransform) -> str:
    return json.dumps(t.to_record())


def loads_transform(text: str) -> ScaleTransform:
    return transform_from_record(json.loads(text))


# -- fitting ------------------------------------------------------------------


def fit_per_tensor(m, bits) -> PerTensorTransform:
    """Zero point min(m), scale B / R(m)."""
    a = as_matrix(m)
    if a.size == 0:
        raise ValueError("cannot fit a transform on an empty matrix")
    bits = as_bits(bits)
    lo, r = float(a.min()), float(a.max() - a.min())
    if r == 0.0:
        return PerTensorTransform(bits, a.shape[0], 1.0, lo, True)
    return PerTensorTransform(bits, a.shape[0], min(bits.B / r, MAX_SCALE), lo, False)


def fit_per_sample(m, bits) -> PerSampleTransform:
    a = as_matrix(m)
    if a.size == 0:
        raise ValueError("cannot fit a transform on an empty matrix")
    bits = as_bits(bits)
    lo = a.min(axis=1)
    r = a.max(axis=1) - lo
    degenerate = r == 0.0
    with np.errstate(over="ignore"):
        scales = np.where(degenerate, 1.0, np.minimum(bits.B / np.where(degenerate, 1.0, r), MAX_SCALE))
    return PerSampleTransform(bits, scales, lo, degenerate)


def clamp_lambda2(lambda1: float, lambda2: float) -> float:
    return max(lambda2, LAMBDA2_FLOOR * lambda1)


def optimal_householder_scales(lambda1, lambda2, n, bits):
    """Scales (s1, s2) minimising s1^-2 + n s2^-2 subject to
    lambda1 s1 n^(-1/2) + lambda2 s2 n^(1/2) = B.
    """
    bits = as_bits(bits)
    if not lambda1 > 0:
        raise ValueError(f"lambda1 must be positive, got {lambda1}")
    if lambda2 < 0:
        raise ValueError(f"lambda2 must be non-negative, got {lambda2}")
    if n < 1:
        raise ValueError(f"group size must be at least 1, got {n}")
    lambda2 = clamp_lambda2(lambda1, lambda2)
    denom = lambda1 ** (2 / 3) * n ** (-1 / 3) + lambda2 ** (2 / 3) * n ** (2 / 3)
    s1 = bits.B * lambda1 ** (-1 / 3) * n ** (1 / 6) / denom
    s2 = bits.B * lambda2 ** (-1 / 3) * n ** (1 / 6) / denom
    # shrinking a scale keeps the constraint satisfied
    return min(s1, MAX_SCALE), min(s2, MAX_SCALE)


def householder_matrix(n: int) -> np.ndarray:
    """Dense Q = I - 2 v v^T / |v|^2, v = 1/sqrt(n) - e_1 (identity when n == 1)."""
    if n == 1:
        return np.eye(1)
    v = np.full(n, 1.0 / np.sqrt(n))
    v[0] -= 1.0
    return np.eye(n) - 2.0 * np.outer(v, v) / (v @ v)


def householder_reflect(x, n_rows: int) -> np.ndarray:
    """Q x for the reflection that maps e_1 onto 1/sqrt(n_rows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != n_rows:
        raise ValueError(f"expected {n_rows} entries, got {x.shape[0]}")
    if n_rows < 2:
        raise ValueError("a reflection needs at least two rows")
    root = 1.0 / np.sqrt(n_rows)
    # v^T x with v = root * 1 - e_1, and |v|^2 = 2 - 2 root
    dot = root * x.sum(axis=0) - x[0]
    coef = 2.0 * dot / (2.0 - 2.0 * root)
    out = x - coef * root
    out[0] += coef
    return out


def row_magnitudes(m) -> np.ndarray:
    return np.abs(as_matrix(m)).max(axis=1)


GROUP_SCORES = ("bound", "approx")


def select_groups(m, score: str = "bound") -> list:
    """Partition rows into (large_row, small_rows) groups.

    Rows are sorted by sup-norm (descending, stable).  For every candidate
    group count G the G largest rows each lead a group whose number of small
    rows is proportional to its magnitude, and small rows are dealt out in
    sorted order.  The G with the smallest score wins, ties going to the
    smaller G.  ``score="bound"`` sums the closed-form group bounds, which
    accounts for how large the small rows are; ``score="approx"`` uses only
    the leading magnitudes, sum M_i^2 / (1 + small_i).
    """
    if score not in GROUP_SCORES:
        raise ValueError(f"score must be one of {GROUP_SCORES}, got {score!r}")
    a = as_matrix(m)
    if a.size == 0:
        raise ValueError("cannot group an empty matrix")
    mags = row_magnitudes(a)
    order = np.argsort(-mags, kind="stable")
    ranges = a.max(axis=1) - a.min(axis=1)
    g, sizes = kernels.best_group_count(np.ascontiguousarray(mags[order]), np.ascontiguousarray(ranges[order]), score == "bound")
    g = int(g)
    groups = []
    cursor = g
    for i in range(g):
        k = int(sizes[i])
        groups.append((int(order[i]), tuple(int(r) for r in order[cursor : cursor + k])))
        cursor += k
    return groups


def _make_groups(a, grouping, bits):
    groups = []
    for large, small in grouping:
        rows = (large,) + tuple(small)
        big = a[large]
        lam1 = float(big.max() - big.min())
        lam2 = 2.0 * float(np.abs(a[list(small)]).max()) if small else 0.0
        if lam1 == 0.0 and lam2 == 0.0:
            # nothing to quantize: each (constant) row passes through exactly
            groups.extend(HouseholderGroup((r,), 1.0, 1.0, 0.0, 0.0, True) for r in rows)
            continue
        if lam1 == 0.0:
            lam1 = lam2
        if not small:
            # a lone row is plain per-row scaling
            s = min(bits.B / lam1, MAX_SCALE)
            groups.append(HouseholderGroup(rows, s, s, lam1, 0.0, False))
            continue
        lam2 = clamp_lambda2(lam1, lam2)
        s1, s2 = optimal_householder_scales(lam1, lam2, len(rows), bits)
        groups.append(HouseholderGroup(rows, s1, s2, lam1, lam2, False))
    return groups


def fit_block_householder(m, bits, grouping=None) -> BlockHouseholderTransform:
    """Fit the block Householder transform.

    ``grouping`` defaults to :func:`select_groups`.  Since one-row groups are
    among the candidates, the fitted bound never exceeds the per-sample one.
    """
    a = as_matrix(m)
    if a.size == 0:
        raise ValueError("cannot fit a transform on an empty matrix")
    bits = as_bits(bits)
    groups = tuple(_make_groups(a, select_groups(a) if grouping is None else grouping, bits))
    # Shifting rows to start at zero before rotating changes no range (the
    # rotation maps row-constant matrices to row-constant matrices) but keeps
    # large common offsets out of the scaled values.
    zeros = a.min(axis=1)
    t = BlockHouseholderTransform(bits, a.shape[0], groups, zeros, np.zeros(a.shape[0]))
    offsets = t.rotate(a - zeros[:, None]).min(axis=1)
    return BlockHouseholderTransform(bits, a.shape[0], groups, zeros, offsets)


FITTERS = {"ptq": fit_per_tensor, "psq": fit_per_sample, "bhq": fit_block_householder}


def fit_transform(m, variant: str, bits) -> ScaleTransform:
    try:
        fitter = FITTERS[variant]
    except KeyError:
        raise ValueError(f"unknown quantizer variant {variant!r}; expected one of {sorted(FITTERS)}") from None
    return fitter(m, bits)
