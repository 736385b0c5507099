"""Per-agent message cache and the predictor that fills in missed updates.

Every listener keeps one cached payload per present agent. A received payload
overwrites its entry and resets its age; entries of agents that did not get a
message through this round are advanced according to the cache mode:

* ``hold``    - keep the stale payload (history-message baseline);
* ``zero``    - blank it (zero-input baseline);
* ``predict`` - run it through the predictor net, once per missed round.

The same advancement rule defines the counterfactual a sender measures its
broadcast distance against, so senders and receivers stay in agreement.

The predictor is trained offline on (payload at round t, payload at round
t+1) pairs collected from rollouts of a frozen policy, with a plain L2 loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

CACHE_MODES = ("hold", "zero", "predict")


@dataclass
class CacheEntry:
    message: np.ndarray
    age: int = 0


@dataclass
class MessageCache:
    """Last-known (or predicted) payload per present agent."""

    size: int
    entries: dict[int, CacheEntry] = field(default_factory=dict)

    def ensure(self, agent: int) -> None:
        """Create a zero entry for a newly present agent."""
        if agent not in self.entries:
            self.entries[agent] = CacheEntry(np.zeros(self.size))

    def remove(self, agent: int) -> None:
        self.entries.pop(agent, None)

    def get(self, agent: int) -> np.ndarray:
        return self.entries[agent].message

    def known_agents(self) -> list[int]:
        return sorted(self.entries)

    def advanced(self, agent: int, predictor: nn.Mlp | None, mode: str) -> np.ndarray:
        """What this entry becomes if the agent is NOT received this round.

        This is also the alternative input a sender measures its broadcast
        distance against.
        """
        entry = self.entries[agent]
        if mode == "hold":
            return entry.message
        if mode == "zero":
            return np.zeros(self.size)
        if mode == "predict":
            return nn.apply(predictor, entry.message)
        raise ValueError(f"unknown cache mode {mode!r}")

    def update(
        self,
        received: dict[int, np.ndarray],
        predictor: nn.Mlp | None = None,
        mode: str = "hold",
    ) -> int:
        """Apply one round of updates; returns the predictor evaluation count.

        Received payloads always win; everything else is advanced per the
        mode. Unknown agents appearing in received get a fresh entry.
        """
        if mode not in CACHE_MODES:
            raise ValueError(f"unknown cache mode {mode!r}")
        evaluations = 0
        for agent in received:
            self.ensure(agent)
        for agent, entry in self.entries.items():
            if agent in received:
                msg = np.asarray(received[agent], dtype=np.float64)
                if msg.shape != (self.size,):
                    raise ValueError("received payload has the wrong size")
                entry.message = msg.copy()
                entry.age = 0
            else:
                if mode == "predict":
                    evaluations += 1
                entry.message = self.advanced(agent, predictor, mode)
                entry.age += 1
        return evaluations


def build_predictor(payload_size: int, rng: np.random.Generator) -> nn.Mlp:
    """One tanh hidden layer of twice the payload width, identity output."""
    return nn.init(
        [payload_size, 2 * payload_size, payload_size], ["tanh", "identity"], rng
    )


def train_predictor(
    inputs: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 64,
    holdout_frac: float = 0.2,
) -> tuple[nn.Mlp, dict]:
    """Fit the predictor with Adam on minibatch MSE; returns net + history.

    history carries the per-epoch held-out MSE (index 0 is the untrained
    net) and the hold-last-message baseline MSE on the same split.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.size == 0:
        raise ValueError("empty predictor dataset")
    if inputs.shape != targets.shape or inputs.ndim != 2:
        raise ValueError("inputs/targets must be matching 2-D arrays")
    n, dim = inputs.shape
    order = rng.permutation(n)
    n_hold = max(1, int(n * holdout_frac))
    hold, train = order[:n_hold], order[n_hold:]
    if train.size == 0:
        raise ValueError("dataset too small for a train/holdout split")
    x_tr, y_tr = inputs[train], targets[train]
    x_ho, y_ho = inputs[hold], targets[hold]

    net = build_predictor(dim, rng)
    state = nn.OptimState.for_net(net, lr=lr)

    def mse(net_, x, y):
        pred = nn.apply(net_, x)
        return float(np.mean((pred - y) ** 2))

    history = {
        "test_mse": [mse(net, x_ho, y_ho)],
        "train_mse": [],
        "identity_mse": float(np.mean((x_ho - y_ho) ** 2)),
    }
    for _ in range(epochs):
        perm = rng.permutation(len(x_tr))
        epoch_loss = 0.0
        for start in range(0, len(perm), batch_size):
            batch = perm[start : start + batch_size]
            xb, yb = x_tr[batch], y_tr[batch]
            pred, tape = nn.forward(net, xb)
            err = pred - yb
            epoch_loss += float((err**2).sum())
            upstream = 2.0 * err / err.size
            grads = nn.backward(net, tape, upstream)
            nn.optim_step(net, grads, state)
        history["train_mse"].append(epoch_loss / (len(x_tr) * dim))
        history["test_mse"].append(mse(net, x_ho, y_ho))
    return net, history
