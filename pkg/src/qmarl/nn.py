"""Minimal dense-network engine with exact backprop, Adam, and binary checkpoints.

Every learned block in this package (encoder, query/message heads, reconstruction,
policy/value trunk, message predictor) is a small fully connected net built from
this module. Arithmetic is float64 throughout; checkpoints store float32 values
(4 bytes per element, matching the on-air element size), so freshly initialized
or loaded parameters are always float32-representable and round-trip exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu", "softmax")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"QMNET1"


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed, truncated or wrong-version."""


@dataclass
class DenseLayer:
    """One fully connected layer: y = act(W x + b), W is (out, in)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} != output size {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    """An ordered stack of DenseLayers with chained dimensions."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_size != nxt.in_size:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_size} -> {nxt.in_size}"
                )

    @property
    def in_size(self) -> int:
        return self.layers[0].in_size

    @property
    def out_size(self) -> int:
        return self.layers[-1].out_size

    def copy(self) -> "Mlp":
        return Mlp(
            [
                DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                for l in self.layers
            ]
        )


@dataclass
class GradBundle:
    """Parameter gradients mirroring an Mlp's shapes, plus the input gradient."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray | None = None

    def accumulate(self, other: "GradBundle") -> None:
        for a, b in zip(self.d_weights, other.d_weights):
            a += b
        for a, b in zip(self.d_biases, other.d_biases):
            a += b

    def scale(self, factor: float) -> None:
        for a in self.d_weights:
            a *= factor
        for a in self.d_biases:
            a *= factor


def zero_grads(net: Mlp) -> GradBundle:
    return GradBundle(
        [np.zeros_like(l.weights) for l in net.layers],
        [np.zeros_like(l.bias) for l in net.layers],
    )


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    # softmax, stabilized, along the last axis
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activation_backward(dy: np.ndarray, y: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return dy
    if activation == "tanh":
        return dy * (1.0 - y * y)
    if activation == "relu":
        return dy * (y > 0.0)
    # softmax Jacobian: dz = y * (dy - sum(y * dy))
    inner = (y * dy).sum(axis=-1, keepdims=True)
    return y * (dy - inner)


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[tuple]]:
    """Run the net on x (1-D vector or 2-D batch of row vectors).

    Returns the output and a tape of per-layer (input, output) pairs that
    backward() needs. The call is pure: no state on the net is touched.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_size:
        raise ValueError(f"input size {x.shape[-1]} != net input {net.in_size}")
    tape = []
    h = x
    for layer in net.layers:
        z = h @ layer.weights.T + layer.bias
        y = _activate(z, layer.activation)
        tape.append((h, y))
        h = y
    return h, tape


def apply(net: Mlp, x: np.ndarray) -> np.ndarray:
    """forward() without keeping the tape."""
    return forward(net, x)[0]


def backward(net: Mlp, tape: list[tuple], upstream: np.ndarray) -> GradBundle:
    """Exact gradients of upstream . y for all parameters and the input.

    tape must come from forward() on the same net. For batched inputs the
    parameter gradients are summed over rows and d_input is per-row.
    """
    if len(tape) != len(net.layers):
        raise ValueError("tape/net mismatch: layer counts differ")
    dy = np.asarray(upstream, dtype=np.float64)
    if dy.shape != tape[-1][1].shape:
        raise ValueError("upstream shape does not match the forward output")
    d_weights: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x_in, y_out = tape[i]
        if x_in.shape[-1] != layer.in_size:
            raise ValueError("tape/net mismatch: layer input size differs")
        dz = _activation_backward(dy, y_out, layer.activation)
        if dz.ndim == 1:
            d_weights[i] = np.outer(dz, x_in)
            d_biases[i] = dz.copy()
        else:
            d_weights[i] = dz.T @ x_in
            d_biases[i] = dz.sum(axis=0)
        dy = dz @ layer.weights
    return GradBundle(d_weights, d_biases, dy)


def init(dims: list[int], activations: list[str], rng: np.random.Generator) -> Mlp:
    """Build an Mlp with weights uniform in +-1/sqrt(fan_in) and zero biases.

    Draws are quantized to float32 so that a fresh net survives a checkpoint
    round trip bit-exactly. Deterministic under a fixed rng.
    """
    if len(dims) < 2:
        raise ValueError("dims must list at least input and output sizes")
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        w = w.astype(np.float32).astype(np.float64)
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return Mlp(layers)


@dataclass
class OptimState:
    """Adam accumulators for one Mlp: first/second moments plus step counter."""

    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_net(cls, net: Mlp, lr: float) -> "OptimState":
        return cls(
            m_weights=[np.zeros_like(l.weights) for l in net.layers],
            m_biases=[np.zeros_like(l.bias) for l in net.layers],
            v_weights=[np.zeros_like(l.weights) for l in net.layers],
            v_biases=[np.zeros_like(l.bias) for l in net.layers],
            lr=lr,
        )


def optim_step(net: Mlp, grads: GradBundle, state: OptimState) -> None:
    """One Adam update, in place on net and state.

    Raises ValueError on non-finite gradient entries (diverged training).
    """
    for g in grads.d_weights + grads.d_biases:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient entries: training diverged")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    def update(param, grad, m, v):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    for layer, gw, gb, mw, mb, vw, vb in zip(
        net.layers,
        grads.d_weights,
        grads.d_biases,
        state.m_weights,
        state.m_biases,
        state.v_weights,
        state.v_biases,
    ):
        update(layer.weights, gw, mw, vw)
        update(layer.bias, gb, mb, vb)


def finite_difference_probe(
    net: Mlp,
    rng: np.random.Generator,
    probes_per_layer: int = 8,
    h: float = 1e-5,
    abs_floor: float = 1e-7,
) -> float:
    """Max relative error of backward() against central differences.

    Samples a few weight/bias coordinates per layer on a random input and
    upstream vector; used by the gradcheck harness command.
    """
    x = rng.normal(size=net.in_size)
    upstream = rng.normal(size=net.out_size)
    y, tape = forward(net, x)
    grads = backward(net, tape, upstream)

    def loss() -> float:
        return float(np.dot(upstream, forward(net, x)[0]))

    worst = 0.0
    for li, layer in enumerate(net.layers):
        for params, analytic in (
            (layer.weights, grads.d_weights[li]),
            (layer.bias, grads.d_biases[li]),
        ):
            flat = params.reshape(-1)
            k_count = min(probes_per_layer, flat.size)
            for k in rng.choice(flat.size, size=k_count, replace=False):
                orig = flat[k]
                flat[k] = orig + h
                plus = loss()
                flat[k] = orig - h
                minus = loss()
                flat[k] = orig
                fd = (plus - minus) / (2 * h)
                err = abs(analytic.reshape(-1)[k] - fd) / max(abs(fd), abs_floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint container. Layout (all integers little-endian):
#   magic "QMNET1"
#   u32 net count
#   per net: u32 name length, name (utf-8), u32 layer count,
#     per layer: u32 in, u32 out, u8 activation code,
#       float32 weights row-major (out*in), float32 bias (out)
# Activation codes follow ACTIVATIONS order: 0 identity, 1 tanh, 2 relu,
# 3 softmax.
# ---------------------------------------------------------------------------


def save(nets: dict[str, Mlp], path) -> None:
    """Serialize named nets; parameters are stored as float32."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(nets))]
    for name, net in nets.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            chunks.append(
                struct.pack(
                    "<IIB", layer.in_size, layer.out_size, _ACT_CODE[layer.activation]
                )
            )
            chunks.append(layer.weights.astype("<f4").tobytes(order="C"))
            chunks.append(layer.bias.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load(path) -> dict[str, Mlp]:
    """Read a checkpoint written by save(); values come back as float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a QMNET1 checkpoint")
    nets: dict[str, Mlp] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        layers = []
        for _ in range(r.u32()):
            in_size = r.u32()
            out_size = r.u32()
            code = r.u8()
            if code >= len(ACTIVATIONS):
                raise CheckpointError(f"unknown activation code {code}")
            w = np.frombuffer(r.take(4 * in_size * out_size), dtype="<f4")
            w = w.reshape(out_size, in_size).astype(np.float64)
            b = np.frombuffer(r.take(4 * out_size), dtype="<f4").astype(np.float64)
            layers.append(DenseLayer(w, b, ACTIVATIONS[code]))
        nets[name] = Mlp(layers)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last net")
    return nets
