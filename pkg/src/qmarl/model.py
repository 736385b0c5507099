"""Agent model: observation encoder, query/message heads, reconstruction,
weighted aggregation, and the policy/value output.

Three variants cover the ablations used in the experiments:

* ``generation``  - queries plus short messages; receivers rebuild the full
  message from (query, short message) with the reconstruction net.
* ``plain``       - queries plus full-size messages; no reconstruction net.
* ``commnet``     - the hidden state itself is the message, aggregation is a
  plain mean, and there is no query block at all.

Parameters are shared by every agent; all methods are pure functions of
(nets, input) and safe to call concurrently on separate copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

VARIANTS = ("generation", "plain", "commnet")

N_ACTIONS = 2  # stay, move


@dataclass(frozen=True)
class ModelConfig:
    """Sizes and variant of one agent model."""

    obs_size: int
    hidden: int
    s_q: int
    s_m: int
    s_m_prime: int
    trunk: int
    variant: str = "generation"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.obs_size, self.hidden, self.s_m, self.trunk) <= 0:
            raise ValueError("all sizes must be positive")
        if self.variant == "generation" and self.s_q + self.s_m_prime != self.s_m:
            raise ValueError(
                f"generation variant needs s_q + s_m_prime == s_m, "
                f"got {self.s_q}+{self.s_m_prime} != {self.s_m}"
            )
        if self.variant == "commnet" and self.s_m != self.hidden:
            raise ValueError("commnet variant shares the hidden state: s_m == hidden")

    @property
    def payload_size(self) -> int:
        """Element count of what actually goes on the air."""
        if self.variant == "generation":
            return self.s_m_prime
        return self.s_m

    @property
    def has_query(self) -> bool:
        return self.variant != "commnet"


class Model:
    """Shared parameter set plus the per-step operations of one agent."""

    def __init__(self, config: ModelConfig, nets: dict[str, nn.Mlp]):
        self.config = config
        self.nets = nets
        self._check_shapes()

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        c = config
        nets = {"encoder": nn.init([c.obs_size, c.hidden], ["tanh"], rng)}
        if c.has_query:
            nets["query"] = nn.init([c.hidden, c.s_q], ["tanh"], rng)
            nets["message"] = nn.init([c.hidden, c.payload_size], ["tanh"], rng)
        if c.variant == "generation":
            nets["decoder"] = nn.init([c.s_q + c.s_m_prime, c.s_m], ["tanh"], rng)
        nets["trunk"] = nn.init([c.hidden + c.s_m, c.trunk], ["tanh"], rng)
        nets["policy"] = nn.init([c.trunk, N_ACTIONS], ["softmax"], rng)
        nets["value"] = nn.init([c.trunk, 1], ["identity"], rng)
        return cls(config, nets)

    def _check_shapes(self):
        c = self.config
        expect = {"encoder": (c.obs_size, c.hidden), "trunk": (c.hidden + c.s_m, c.trunk)}
        if c.has_query:
            expect["query"] = (c.hidden, c.s_q)
            expect["message"] = (c.hidden, c.payload_size)
        if c.variant == "generation":
            expect["decoder"] = (c.s_q + c.s_m_prime, c.s_m)
        expect["policy"] = (c.trunk, N_ACTIONS)
        expect["value"] = (c.trunk, 1)
        for name, (i, o) in expect.items():
            net = self.nets.get(name)
            if net is None:
                raise ValueError(f"missing net {name!r}")
            if net.in_size != i or net.out_size != o:
                raise ValueError(
                    f"net {name!r} is {net.in_size}->{net.out_size}, expected {i}->{o}"
                )

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.nets.items()})

    # ------------------------------------------------------------------
    # per-step operations (vector in, vector out)
    # ------------------------------------------------------------------

    def encode_hidden(self, obs: np.ndarray) -> np.ndarray:
        return nn.apply(self.nets["encoder"], obs)

    def make_query(self, h: np.ndarray) -> np.ndarray:
        if not self.config.has_query:
            raise ValueError("commnet variant produces no query")
        return nn.apply(self.nets["query"], h)

    def make_message(self, h: np.ndarray) -> np.ndarray:
        """The transmitted payload: short message, full message, or h itself."""
        if not self.config.has_query:
            return np.asarray(h, dtype=np.float64)
        return nn.apply(self.nets["message"], h)

    def reconstruct_message(self, q: np.ndarray, m_short: np.ndarray) -> np.ndarray:
        """Receiver-side rebuild of the full message from (query, payload)."""
        if self.config.variant != "generation":
            m_short = np.asarray(m_short, dtype=np.float64)
            if m_short.shape[-1] != self.config.s_m:
                raise ValueError("pass-through payload must already be full size")
            return m_short
        q = np.asarray(q, dtype=np.float64)
        m_short = np.asarray(m_short, dtype=np.float64)
        if q.shape[-1] != self.config.s_q or m_short.shape[-1] != self.config.s_m_prime:
            raise ValueError("reconstruct_message input sizes do not match config")
        return nn.apply(self.nets["decoder"], np.concatenate([q, m_short], axis=-1))

    def act(self, h: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, float]:
        """Policy distribution over {stay, move} plus the state value."""
        t = nn.apply(self.nets["trunk"], np.concatenate([h, c], axis=-1))
        probs = nn.apply(self.nets["policy"], t)
        value = float(nn.apply(self.nets["value"], t)[0])
        return probs, value


def policy_message_jacobian(model: Model, h: np.ndarray, c: np.ndarray) -> np.ndarray:
    """d(policy probs)/d(aggregated message), an (N_ACTIONS, s_m) jacobian.

    Backprops one output row at a time through the policy head and trunk,
    evaluated at the receiver's current aggregation input c.
    """
    trunk_in = np.concatenate([h, c])
    t, trunk_tape = nn.forward(model.nets["trunk"], trunk_in)
    probs, policy_tape = nn.forward(model.nets["policy"], t)
    rows = []
    for k in range(len(probs)):
        upstream = np.zeros_like(probs)
        upstream[k] = 1.0
        d_t = nn.backward(model.nets["policy"], policy_tape, upstream).d_input
        d_in = nn.backward(model.nets["trunk"], trunk_tape, d_t).d_input
        rows.append(d_in[len(h):])
    return np.stack(rows)


def aggregate(
    q_self: np.ndarray | None,
    peers: list[tuple[np.ndarray, np.ndarray]],
    msg_size: int,
    mean_mode: bool = False,
) -> np.ndarray:
    """Weighted mean of peer messages, weights = dot(q_self, q_peer).

    peers holds (query, full message) pairs and must exclude the receiver
    itself. mean_mode forces unit weights (the plain-averaging baseline);
    an empty peer set yields the zero vector.
    """
    if not peers:
        return np.zeros(msg_size)
    total = np.zeros(msg_size)
    for q_i, m_i in peers:
        w = 1.0 if mean_mode else float(np.dot(q_self, q_i))
        total += w * np.asarray(m_i, dtype=np.float64)
    return total / len(peers)
