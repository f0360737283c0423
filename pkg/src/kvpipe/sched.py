"""Request ordering policies and the pending-request queue.

All policies are non-preemptive: a key is computed once per request and the
smallest key is served next. Ties break on (arrival_time, id).
"""

from __future__ import annotations

import heapq
from enum import Enum
from typing import Iterable, Mapping, MutableSet, NamedTuple

from .core import ClusterConfig, RequestSpec, cached_token_count
from .costmodel import ServiceCost
from .exceptions import MissingDeadline


class PolicyKind(str, Enum):
    FIFO = "fifo"
    SJF_PT = "sjf-pt"
    SJF_COST = "sjf-cost"
    EDF = "edf"
    LSTF = "lstf"

    @classmethod
    def parse(cls, name: "str | PolicyKind") -> "PolicyKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown policy {name!r} (choose from {choices})") from None


class PriorityKey(NamedTuple):
    """Smaller sorts first."""

    primary: float
    arrival_time: float
    request_id: int


def prefill_tokens(spec: RequestSpec, config: ClusterConfig | None = None) -> int:
    """Tokens the GPU actually has to prefill once the cached prefix is reused."""
    config = config or ClusterConfig()
    return spec.prompt_tokens - cached_token_count(spec, config)


def priority_key(spec: RequestSpec, policy: PolicyKind, cost: ServiceCost | None = None,
                 now: float = 0.0, config: ClusterConfig | None = None) -> PriorityKey:
    """Rank ``spec`` under ``policy``.

    ``now`` does not change the relative order at a single scheduling
    instant for any supported policy; it is accepted so time-dependent
    policies can share the signature. ``config`` sets the block granularity
    SJF-PT uses to find the uncached token count.
    """
    policy = PolicyKind.parse(policy)
    if policy is PolicyKind.FIFO:
        primary = spec.arrival_time
    elif policy is PolicyKind.SJF_PT:
        primary = prefill_tokens(spec, config)
    elif policy is PolicyKind.SJF_COST:
        primary = _need_cost(spec, cost).total
    else:
        if spec.deadline is None:
            raise MissingDeadline(f"request {spec.id} has no deadline ({policy.value} needs one)")
        if policy is PolicyKind.EDF:
            primary = spec.deadline
        else:
            primary = spec.deadline - _need_cost(spec, cost).total
    return PriorityKey(float(primary), spec.arrival_time, spec.id)


def _need_cost(spec, cost):
    if cost is None:
        raise ValueError(f"request {spec.id}: policy needs a service cost estimate")
    return cost


def pick_next(queue: MutableSet[RequestSpec], policy: PolicyKind,
              costs: Mapping[int, ServiceCost], now: float = 0.0,
              config: ClusterConfig | None = None) -> RequestSpec | None:
    """Remove and return the most urgent request, or ``None`` if ``queue`` is empty."""
    if not queue:
        return None
    best = min(queue, key=lambda s: priority_key(s, policy, costs.get(s.id), now, config))
    queue.remove(best)
    return best


class PendingQueue:
    """Heap-backed equivalent of repeated :func:`pick_next` calls.

    Keys are computed at push time, which is sound because no policy key
    depends on the current time.
    """

    def __init__(self, policy: PolicyKind, costs: Mapping[int, ServiceCost],
                 config: ClusterConfig | None = None):
        self.policy = PolicyKind.parse(policy)
        self.costs = costs
        self.config = config
        self._heap: list = []

    def push(self, spec: RequestSpec, now: float = 0.0) -> None:
        key = priority_key(spec, self.policy, self.costs.get(spec.id), now, self.config)
        heapq.heappush(self._heap, (key, spec))

    def extend(self, specs: Iterable[RequestSpec], now: float = 0.0) -> None:
        for spec in specs:
            self.push(spec, now)

    def pop(self) -> RequestSpec | None:
        entry = self.pop_entry()
        return None if entry is None else entry[1]

    def pop_entry(self) -> tuple[PriorityKey, RequestSpec] | None:
        if not self._heap:
            return None
        return heapq.heappop(self._heap)

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)
