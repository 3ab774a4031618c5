"""Bias-free MLPs with exact, quantized-forward, QAT and FQT propagation.

Layer ``i`` (0-based) maps H^i to H^(i+1).  Linear layers compute
H^(i+1) = Q_a(H^i) Q_w(Theta); ReLU layers are elementwise.  Gradients are
quantized at linear-layer outputs only, twice per layer (gradient
bifurcation): one 8-bit-style per-tensor quantizer feeds the weight gradient,
an independent draw of the configured variant feeds the input gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from fqtlab.quant import (
    VARIANTS,
    QuantBits,
    deterministic_round,
    fit_per_tensor,
    fit_transform,
    quantize_stochastic,
    unit_values,
)
from fqtlab.rng import SLOT_ACT_GRAD, SLOT_WEIGHT_GRAD, Substream
from fqtlab.tensor import as_matrix

JACOBIAN_CAP = 4096


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class QuantScheme:
    """Bit widths for the forward quantizers and the two gradient quantizers.

    ``None`` for any bit count disables that quantizer (full precision).
    """

    forward_bits: int | None = 8
    grad_weight_bits: int | None = 8
    grad_act_bits: int | None = 8
    variant: str = "ptq"
    rounding: str = "stochastic"

    def __post_init__(self):
        for name in ("forward_bits", "grad_weight_bits", "grad_act_bits"):
            b = getattr(self, name)
            if b is not None:
                QuantBits(b)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.rounding not in ("stochastic", "nearest"):
            raise ValueError(f"rounding must be 'stochastic' or 'nearest', got {self.rounding!r}")

    @classmethod
    def full_precision(cls, forward_bits: int | None = 8) -> "QuantScheme":
        return cls(forward_bits, None, None)

    def with_grad_bits(self, bits: int | None) -> "QuantScheme":
        return replace(self, grad_act_bits=bits)


class Network:
    def __init__(self, layers, params):
        layers = tuple(layers)
        if len(params) != len(layers):
            raise ValueError("need one parameter entry (None for ReLU) per layer")
        dim = None
        checked = []
        for layer, p in zip(layers, params):
            if isinstance(layer, Linear):
                p = as_matrix(p, "parameter")
                if p.shape != (layer.in_dim, layer.out_dim):
                    raise ValueError(f"parameter shape {p.shape} does not match {layer}")
                if dim is not None and dim != layer.in_dim:
                    raise ValueError(f"layer {layer} expects {layer.in_dim} inputs, previous layer gives {dim}")
                dim = layer.out_dim
                checked.append(p.copy())
            elif isinstance(layer, ReLU):
                if p is not None:
                    raise ValueError("ReLU layers carry no parameters")
                checked.append(None)
            else:
                raise TypeError(f"unknown layer {layer!r}")
        if not any(isinstance(l, Linear) for l in layers):
            raise ValueError("network needs at least one linear layer")
        self.layers = layers
        self.params = checked

    @classmethod
    def mlp(cls, dims, seed: int = 0) -> "Network":
        """Linear/ReLU stack through ``dims``, He-normal initialised."""
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"bad MLP dims {dims}")
        rng = np.random.default_rng(seed)
        layers, params = [], []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if i:
                layers.append(ReLU())
                params.append(None)
            layers.append(Linear(a, b))
            params.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        return cls(layers, params)

    @property
    def in_dim(self) -> int:
        return next(l.in_dim for l in self.layers if isinstance(l, Linear))

    @property
    def out_dim(self) -> int:
        return next(l.out_dim for l in reversed(self.layers) if isinstance(l, Linear))

    @property
    def linear_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Linear)]

    def with_params(self, params) -> "Network":
        return Network(self.layers, params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params if p is not None)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params if p is not None])


@dataclass
class Tape:
    """Recorded forward state.

    ``h[i]`` is H^i (len L+1); ``inputs[i]`` is what layer i consumed
    (Q_a(H^i) for linear layers); ``weights[i]`` is Q_w(Theta) or None.
    """

    h: list
    inputs: list
    weights: list

    @property
    def batch_size(self) -> int:
        return self.h[0].shape[0]


# -- forward ------------------------------------------------------------------


def ptq_deterministic(m, bits):
    """Deterministic per-tensor quantizer used for activations and weights."""
    if bits is None:
        return np.array(m, dtype=np.float64)
    t = fit_per_tensor(m, bits)
    return t.from_unit(deterministic_round(unit_values(m, t)))


def _check_input(net, x):
    x = as_matrix(x, "X")
    if x.shape[1] != net.in_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {net.in_dim}")
    return x


def _forward(net, x, forward_bits, quantize):
    h = [x]
    inputs, weights = [], []
    for layer, p in zip(net.layers, net.params):
        cur = h[-1]
        if isinstance(layer, Linear):
            xin = ptq_deterministic(cur, forward_bits) if quantize else cur
            w = ptq_deterministic(p, forward_bits) if quantize else p
            inputs.append(xin)
            weights.append(w)
            h.append(xin @ w)
        else:
            inputs.append(cur)
            weights.append(None)
            h.append(np.maximum(cur, 0.0))
    return h[-1], Tape(h, inputs, weights)


def forward_exact(net: Network, x):
    return _forward(net, _check_input(net, x), None, False)


def forward_quantized(net: Network, x, scheme: QuantScheme):
    return _forward(net, _check_input(net, x), scheme.forward_bits, True)


# -- loss ---------------------------------------------------------------------


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def check_one_hot(y):
    y = as_matrix(y, "Y")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise ValueError("labels must be one-hot rows")
    return y


def loss_and_grad(predictions, y):
    """Summed softmax cross-entropy and its gradient softmax(h_i) - y_i."""
    h = as_matrix(predictions, "predictions")
    y = check_one_hot(y)
    if y.shape != h.shape:
        raise ValueError(f"labels {y.shape} do not match predictions {h.shape}")
    z = h - h.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(np.sum(y * log_p))
    return loss, np.exp(log_p) - y


# -- backward -----------------------------------------------------------------


@dataclass
class Gradients:
    """``params[i]`` for linear layers (None for ReLU); ``outputs[i]`` is the
    gradient w.r.t. H^(i+1) that reached layer i; ``input`` is w.r.t. H^0."""

    params: list
    outputs: list
    input: np.ndarray


def _check_tape(net, tape):
    if len(tape.inputs) != len(net.layers) or len(tape.h) != len(net.layers) + 1:
        raise ValueError("tape does not match the network")


def backward_qat(net: Network, tape: Tape, top_grad) -> Gradients:
    _check_tape(net, tape)
    g = as_matrix(top_grad, "top_grad")
    n = len(net.layers)
    params, outputs = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        outputs[i] = g
        if isinstance(net.layers[i], Linear):
            params[i] = tape.inputs[i].T @ g
            g = g @ tape.weights[i].T
        else:
            g = g * (tape.h[i] > 0.0)
    return Gradients(params, outputs, g)


def quantize_grad(g, variant, bits, stream, rounding="stochastic"):
    """One draw of Q_b on ``g``; identity when ``bits`` is None."""
    if bits is None:
        return g
    t = fit_transform(g, variant, bits)
    return quantize_stochastic(g, t, stream, rounding).dequantize()


def backward_fqt(net: Network, tape: Tape, top_grad, scheme: QuantScheme, stream: Substream) -> Gradients:
    """One FQT backward pass; ``stream`` fixes the seed and trial index.

    Layer i's weight-gradient quantizer uses substream (trial, i, 0) and its
    input-gradient quantizer (trial, i, 1).
    """
    _check_tape(net, tape)
    g = as_matrix(top_grad, "top_grad")
    n = len(net.layers)
    params, outputs = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        outputs[i] = g
        if isinstance(net.layers[i], Linear):
            q1 = quantize_grad(g, "ptq", scheme.grad_weight_bits, stream.child(i, SLOT_WEIGHT_GRAD), scheme.rounding)
            q2 = quantize_grad(g, scheme.variant, scheme.grad_act_bits, stream.child(i, SLOT_ACT_GRAD), scheme.rounding)
            params[i] = tape.inputs[i].T @ q1
            g = q2 @ tape.weights[i].T
        else:
            g = g * (tape.h[i] > 0.0)
    return Gradients(params, outputs, g)


# -- explicit Jacobians ---------------------------------------------------------


def _cap(rows, cols):
    if rows > JACOBIAN_CAP or cols > JACOBIAN_CAP:
        raise ValueError(f"explicit Jacobian of size {rows}x{cols} exceeds the {JACOBIAN_CAP} cap")


def jacobians(net: Network, tape: Tape, i: int):
    """(J, K) of layer i in row-major vec convention: vec(dH^i) = vec(dH^(i+1)) J."""
    _check_tape(net, tape)
    layer = net.layers[i]
    n = tape.batch_size
    if isinstance(layer, Linear):
        _cap(n * layer.out_dim, max(n * layer.in_dim, layer.in_dim * layer.out_dim))
        j = np.kron(np.eye(n), tape.weights[i].T)
        k = np.kron(tape.inputs[i], np.eye(layer.out_dim))
        return j, k
    d = tape.h[i].size
    _cap(d, d)
    return np.diag((tape.h[i] > 0.0).ravel().astype(np.float64)), np.zeros((d, 0))


def gamma(net: Network, tape: Tape, k: int, l: int) -> np.ndarray:
    """gamma^(k,l) = J_l J_(l-1) ... J_(k+1) K_k, mapping vec(grad H^(l+1)) to vec(grad Theta_k)."""
    if not 0 <= k <= l < len(net.layers):
        raise ValueError(f"need 0 <= k <= l < {len(net.layers)}, got k={k}, l={l}")
    out = None
    for i in range(l, k, -1):
        j, _ = jacobians(net, tape, i)
        out = j if out is None else out @ j
    _, kk = jacobians(net, tape, k)
    return kk if out is None else out @ kk


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"FQTCKPT1"


def save_checkpoint(net: Network, path) -> None:
    """Header: magic, uint32 count of linear layers, (in, out) uint32 pairs;
    then every linear parameter as little-endian float64, row-major, in order."""
    lin = [(l, p) for l, p in zip(net.layers, net.params) if isinstance(l, Linear)]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(lin)))
        for l, _ in lin:
            f.write(struct.pack("<II", l.in_dim, l.out_dim))
        for _, p in lin:
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    """Rebuild an MLP (ReLU between linear layers) from :func:`save_checkpoint` output."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:8]!r}")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    shapes = []
    for _ in range(count):
        shapes.append(struct.unpack_from("<II", data, pos))
        pos += 8
    expected = pos + 8 * sum(a * b for a, b in shapes)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    layers, params = [], []
    for i, (a, b) in enumerate(shapes):
        if i:
            layers.append(ReLU())
            params.append(None)
        layers.append(Linear(a, b))
        params.append(np.frombuffer(data, dtype="<f8", count=a * b, offset=pos).reshape(a, b).astype(np.float64))
        pos += 8 * a * b
    return Network(layers, params)
