"""Flat all-to-one aggregation and C-ary tree aggregation plans.

Leaders at level ``l`` are the participants whose index is a multiple of
``c**l``; every other active node hands its partial sum to
``(index // c**l) * c**l``.  After ``ceil(log_c n)`` intra-tree rounds the
survivor (index 0) forwards the total to the aggregator, which is counted as
the final round.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .tensors import GradVector, fold

AGGREGATOR = -1


class AggregationIncomplete(RuntimeError):
    pass


def ceil_log(n: int, c: int) -> int:
    """Smallest L with c**L >= n, in integer arithmetic."""
    if n < 1 or c < 2:
        raise ValueError("need n >= 1 and c >= 2")
    levels, reach = 0, 1
    while reach < n:
        reach *= c
        levels += 1
    return levels


@dataclass(frozen=True)
class TreePlan:
    n: int
    c: int
    rounds: tuple[tuple[tuple[int, int], ...], ...]
    final_leader: int = 0

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def active_at(self, level: int) -> list[int]:
        """Participants still holding a partial when ``level`` (1-based) starts."""
        stride = self.c ** (level - 1)
        return list(range(0, self.n, stride))

    def receivers(self, round_index: int) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for s, d in self.rounds[round_index]:
            out.setdefault(d, []).append(s)
        return out

    def role_in_round(self, node: int, round_index: int):
        """('send', dest) | ('recv', [senders]) | ('idle', None) for ``node``."""
        for s, d in self.rounds[round_index]:
            if s == node:
                return "send", d
        senders = self.receivers(round_index).get(node)
        if senders:
            return "recv", senders
        return "idle", None


def build_tree_plan(n: int, c: int) -> TreePlan:
    if c < 2:
        raise ValueError(f"children per leader must be >= 2, got {c}")
    if n < 1:
        raise ValueError("need at least one participant")
    rounds = []
    for level in range(1, ceil_log(n, c) + 1):
        group = c**level
        prev = c ** (level - 1)
        edges = tuple(
            (i, (i // group) * group) for i in range(0, n, prev) if i % group != 0
        )
        rounds.append(edges)
    rounds.append(((0, AGGREGATOR),))
    return TreePlan(n, c, tuple(rounds), 0)


def flat_aggregate(updates: Sequence[GradVector]) -> GradVector:
    """Fold in ascending participant order."""
    if not updates:
        raise ValueError("nothing to aggregate")
    return fold(updates)


def run_tree_aggregation(
    plan: TreePlan,
    local_updates: Sequence[GradVector],
    send: Callable[[int, int, int, GradVector], None] | None = None,
) -> GradVector:
    """Execute ``plan`` round by round, in process.

    ``send(round, src, dst, value)`` observes every transfer (the last one has
    ``dst == AGGREGATOR``).  Leaders fold their own partial first, then the
    arrivals in ascending sender order.
    """
    if len(local_updates) != plan.n:
        raise AggregationIncomplete(f"expected {plan.n} local updates, got {len(local_updates)}")
    partial: dict[int, GradVector] = dict(enumerate(local_updates))
    delivered = None
    for r, edges in enumerate(plan.rounds):
        inbox: dict[int, list[tuple[int, GradVector]]] = {}
        for s, d in edges:
            if s not in partial:
                raise AggregationIncomplete(f"round {r}: node {s} has nothing to send")
            value = partial.pop(s)
            if send is not None:
                send(r, s, d, value)
            if d == AGGREGATOR:
                delivered = value
            else:
                inbox.setdefault(d, []).append((s, value))
        for leader, arrivals in inbox.items():
            arrivals.sort(key=lambda sv: sv[0])
            partial[leader] = fold([partial[leader], *(v for _, v in arrivals)])
    if delivered is None:
        raise AggregationIncomplete("no value reached the aggregator")
    return delivered
