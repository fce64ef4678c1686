"""Per-fleet timestamp vector algebra used by the rendezvous protocol.

Each robot tracks two length-N vectors: ``local`` estimates how fresh its
own knowledge of every fleet member will be as of its latest confirmed
meeting, and ``operator_est`` estimates how fresh the operator's knowledge
of every member is. Both start at zero and only ever grow.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class TimestampVectors:
    local: list[float]
    operator_est: list[float]

    @classmethod
    def zeros(cls, n: int) -> "TimestampVectors":
        return cls([0.0] * n, [0.0] * n)

    def copy(self) -> "TimestampVectors":
        return TimestampVectors(list(self.local), list(self.operator_est))


def merge_operator_stamps(a: list[float], b: list[float]) -> list[float]:
    """Elementwise max; the shared estimate after two robots compare notes."""
    return [max(x, y) for x, y in zip(a, b)]


def update_after_return(operator_est: list[float], local_of_returner: list[float],
                        returner: int, arrival: float) -> list[float]:
    """Operator-side stamps after the returner hands over its data.

    Every other entry rises to what the returner carries; the returner's own
    entry becomes the arrival time since it keeps sensing until it gets there.
    """
    out = [max(cur, carried) for cur, carried in zip(operator_est, local_of_returner)]
    out[returner] = arrival
    return out


def update_local_stamps(local_i: list[float], local_j: list[float],
                        i: int, j: int, meeting_time: float) -> list[float]:
    """Robot i's local stamps after confirming a meeting with j at ``meeting_time``."""
    out = [max(x, y) for x, y in zip(local_i, local_j)]
    out[i] = meeting_time
    out[j] = meeting_time
    return out


def bounded_min(values: list[float], exclude: set[int] = frozenset()) -> float:
    """Minimum entry ignoring excluded (failed) robots; 0.0 if all excluded."""
    kept = [v for n, v in enumerate(values) if n not in exclude]
    return min(kept) if kept else 0.0
