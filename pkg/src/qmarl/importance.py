"""Message-importance measures and the top-k selection they feed.

Three measures of how much a sender's fresh message would change a receiver's
policy output, in decreasing order of cost:

* exact      - two full forward passes, norm of the output difference;
* gradient   - first-order approximation through the receiver's jacobian at
  the aggregation input;
* approx     - |dot(q_recv, q_send)| * ||message change||, computable by any
  listener from broadcast queries and distances alone.

The approx form drops constants that are common to all senders (receiver
gradient magnitude, peer-count normalization); scaling every importance by a
positive constant never changes the selected set, which is why those
constants have no runtime representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


def importance_exact(
    f: Callable[[np.ndarray], np.ndarray], m_new: np.ndarray, m_alt: np.ndarray
) -> float:
    """||f(m_new) - f(m_alt)|| for a receiver-context evaluator f.

    f maps one sender's message to the receiver's policy output with every
    other input (observation, other messages) held fixed.
    """
    return float(np.linalg.norm(np.asarray(f(m_new)) - np.asarray(f(m_alt))))


def importance_gradient(
    df_dc: np.ndarray,
    q_recv: np.ndarray,
    q_send: np.ndarray,
    m_new: np.ndarray,
    m_alt: np.ndarray,
) -> float:
    """First-order importance: ||df_dc . (dot(q_recv, q_send) * (m_new - m_alt))||.

    df_dc is the receiver's output jacobian at its aggregated-message input,
    shaped (out_size, s_m); a 1-D gradient is treated as a single row.
    """
    df_dc = np.atleast_2d(np.asarray(df_dc, dtype=np.float64))
    delta = float(np.dot(q_recv, q_send)) * (
        np.asarray(m_new, dtype=np.float64) - np.asarray(m_alt, dtype=np.float64)
    )
    return float(np.linalg.norm(df_dc @ delta))


def importance_approx(q_recv: np.ndarray, q_send: np.ndarray, d: float) -> float:
    """|dot(q_recv, q_send)| * d, with d = ||m - m_alt|| precomputed by the sender."""
    if d < 0:
        raise ValueError("message distance must be nonnegative")
    return abs(float(np.dot(q_recv, q_send))) * d


def message_distance(
    current: np.ndarray, cached: np.ndarray | None, mode: str
) -> float:
    """Sender-side scalar broadcast with the query.

    influence mode measures against the zero vector, difference mode against
    the cached last-known payload (zero if the agent never transmitted).
    """
    current = np.asarray(current, dtype=np.float64)
    if mode == "influence":
        return float(np.linalg.norm(current))
    if mode == "difference":
        if cached is None:
            return float(np.linalg.norm(current))
        return float(np.linalg.norm(current - np.asarray(cached, dtype=np.float64)))
    raise ValueError(f"unknown distance mode {mode!r}")


def agent_importance(
    q_sender: np.ndarray, receiver_queries: list[np.ndarray], d: float
) -> float:
    """Mean of importance_approx over the other present agents' queries.

    receiver_queries excludes the sender; a sender with no receivers scores 0.
    """
    if not receiver_queries:
        return 0.0
    return float(
        np.mean([importance_approx(q, q_sender, d) for q in receiver_queries])
    )


@dataclass
class ImportanceRecord:
    """Per-receiver and aggregate importance of one sender's pending message."""

    sender: int
    per_receiver: dict[int, float]
    aggregate: float
    distance: float

    @classmethod
    def build(
        cls,
        sender: int,
        q_sender: np.ndarray,
        receiver_queries: Mapping[int, np.ndarray],
        d: float,
    ) -> "ImportanceRecord":
        per = {
            j: importance_approx(q_j, q_sender, d)
            for j, q_j in receiver_queries.items()
            if j != sender
        }
        agg = float(np.mean(list(per.values()))) if per else 0.0
        return cls(sender=sender, per_receiver=per, aggregate=agg, distance=d)


@dataclass
class Schedule:
    """Senders granted the message phase, ordered by nonincreasing importance."""

    senders: tuple[int, ...]
    capacity: int

    def __post_init__(self):
        if len(self.senders) > self.capacity:
            raise ValueError("schedule exceeds capacity")
        if len(set(self.senders)) != len(self.senders):
            raise ValueError("schedule repeats a sender")


def select_topk(
    importances: Mapping[int, float],
    n_c: int,
    tiebreak: Mapping[int, int] | None = None,
) -> Schedule:
    """The n_c agents with the largest importance, descending; deterministic.

    Ties are broken by the ascending tiebreak key (the agent's query-slot
    index in the decentralized protocol) and fall back to the agent id.
    """
    if n_c < 0:
        raise ValueError("capacity must be nonnegative")
    key = (lambda a: tiebreak[a]) if tiebreak is not None else (lambda a: a)
    ranked = sorted(importances, key=lambda a: (-importances[a], key(a)))
    return Schedule(senders=tuple(ranked[:n_c]), capacity=n_c)
