"""Discrete-event simulation of the L3->L2->L1->compute prefill pipeline.

Three stages, each with its own executor channel(s):

* ``net``     L3 -> L2 transfer over the network link
* ``pcie``    L2 -> L1 transfer over PCIe
* ``compute`` prefill on the GPU, one request at a time

In **coupled** mode a single control loop serves one request end to end
(all network hops, then all PCIe hops, then compute) before picking the
next request. In **decoupled** mode every stage has its own dispatcher:
blocks move up as soon as their source copy is ready and their destination
space is reserved, so stages overlap within and across requests.

Events are processed in ``(time, seq)`` order. All events sharing a
timestamp are applied before any dispatcher runs, which makes scheduling
decisions see every simultaneous arrival.
"""

from __future__ import annotations

import heapq
import warnings
from bisect import insort
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import NamedTuple, Sequence

from .core import (AllocationMode, ClusterConfig, ControlMode, KVBlock, RequestSpec,
                   RequestState, Tier)
from .costmodel import (CostModels, LinearCostModel, ServiceCost, estimate_service_cost,
                        fit_linear)
from .exceptions import CapacityError, OverloadWarning
from .sched import PendingQueue, PolicyKind, PriorityKey


# solo and profiling runs have nothing to order, so costs are irrelevant
_ZERO_MODELS = CostModels(LinearCostModel(), LinearCostModel())


class Stage(str, Enum):
    NET = "net"
    PCIE = "pcie"
    COMPUTE = "compute"


_NET, _PCIE, _COMPUTE = Stage.NET.value, Stage.PCIE.value, Stage.COMPUTE.value
_L1, _L2 = Tier.L1.value, Tier.L2.value


class EventKind(IntEnum):
    ARRIVAL = 0
    TRANSFER_DONE = 1
    ALLOCATION_GRANT = 2
    COMPUTE_DONE = 3


class SimEvent(NamedTuple):
    time: float
    seq: int
    kind: EventKind
    payload: object


class TraceRecord(NamedTuple):
    time: float
    seq: int
    kind: str
    stage: str
    request_id: int
    block_index: int
    bytes: int


TRACE_COLUMNS = TraceRecord._fields


class Allocation(str, Enum):
    GRANT = "grant"
    DEFERRED = "deferred"


class TierLedger:
    """Byte reservations for one storage tier.

    Requests that do not fit wait in a FIFO queue; once anything waits, new
    requests queue behind it even if they would fit.
    """

    def __init__(self, tier: Tier, capacity: float):
        self.tier = Tier(tier)
        self.capacity = capacity
        self.reserved = 0
        self.peak = 0
        self.pending: deque = deque()

    def request(self, owner, nbytes: int) -> Allocation:
        if nbytes <= 0:
            raise ValueError("allocation size must be > 0")
        if nbytes > self.capacity:
            raise CapacityError(
                f"{self.tier.value}: {nbytes} bytes requested, capacity {self.capacity:g}")
        if not self.pending and self.reserved + nbytes <= self.capacity:
            self._take(nbytes)
            return Allocation.GRANT
        self.pending.append((owner, nbytes))
        return Allocation.DEFERRED

    def release(self, nbytes: int) -> list:
        """Free ``nbytes`` and return owners whose deferred requests now fit."""
        if nbytes > self.reserved:
            raise RuntimeError(f"{self.tier.value}: releasing more than reserved")
        self.reserved -= nbytes
        granted = []
        while self.pending and self.reserved + self.pending[0][1] <= self.capacity:
            owner, size = self.pending.popleft()
            self._take(size)
            granted.append(owner)
        return granted

    def _take(self, nbytes):
        self.reserved += nbytes
        if self.reserved > self.peak:
            self.peak = self.reserved


def tier_allocate(ledger: TierLedger, owner, nbytes: int) -> Allocation:
    return ledger.request(owner, nbytes)


@dataclass
class StageState:
    stage: Stage
    channels: int = 1
    in_flight: int = 0
    busy_until: float = 0.0
    busy_time: float = 0.0

    @property
    def free(self) -> bool:
        return self.in_flight < self.channels

    def occupy(self, now: float, duration: float) -> float:
        end = now + duration
        self.in_flight += 1
        self.busy_time += duration
        if end > self.busy_until:
            self.busy_until = end
        return end


@dataclass(eq=False)
class _Flight:
    """Runtime cursors for one scheduled request.

    ``order`` is the request's priority key; every stage serves the most
    urgent eligible request first.
    """

    state: RequestState
    order: PriorityKey
    net_secs: list
    pcie_secs: list
    comp_secs: float
    next_net: int = 0
    next_pcie: int = 0
    n_l2: int = 0
    n_l1: int = 0
    l2_waiting: bool = False

    @property
    def n_blocks(self):
        return len(self.state.blocks)


@dataclass
class SimulationResult:
    """Raw output of one run: request states, event trace and stage completions."""

    states: list[RequestState]
    trace: list[TraceRecord]
    completions: dict[str, list[tuple[float, int]]]
    start: float
    end: float
    ledger_peak: dict[str, int]
    stage_busy: dict[str, float]
    config: ClusterConfig
    policy: PolicyKind
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def makespan(self) -> float:
        return self.end - self.start


def stage_seconds(state: RequestState, config: ClusterConfig) -> tuple[list, list, float]:
    """Per-block NET and PCIe durations and the compute duration for one request."""
    m = state.spec.measured_cost
    if m is not None:
        net = [m[0]] if state.blocks else []
        return net, [0.0] * len(net), m[1]
    net = [config.net_seconds(b.bytes) for b in state.blocks]
    pcie = [config.pcie_seconds(b.bytes) for b in state.blocks]
    return net, pcie, config.compute_seconds(state.compute_tokens)


def _build_state(spec: RequestSpec, config: ClusterConfig) -> RequestState:
    state = RequestState.from_spec(spec, config)
    if spec.measured_cost is not None:
        # replay path: one pseudo-block carries the whole measured load time
        if spec.measured_cost[0] > 0:
            nbytes = sum(b.bytes for b in state.blocks)
            state.blocks = [KVBlock(spec.id, 0, state.cached_tokens, nbytes)]
        else:
            state.blocks = []
    return state


def _flight_order(flight):
    return flight.order


class PipelineSimulator:
    """Single-run event loop. Use :func:`run_simulation` unless you need the raw result."""

    def __init__(self, requests: Sequence[RequestSpec], config: ClusterConfig,
                 policy: PolicyKind | str, models: CostModels | None = None, seed: int = 0,
                 *, max_queue_length: int | None = 10_000, record_trace: bool = True):
        self.config = config
        self.policy = PolicyKind.parse(policy)
        self.seed = seed
        self.coupled = config.control_mode is ControlMode.COUPLED
        self.proactive = (not self.coupled
                          and config.allocation_mode is AllocationMode.PROACTIVE)
        self.max_queue_length = max_queue_length
        self.record_trace = record_trace

        specs = sorted(requests, key=lambda s: (s.arrival_time, s.id))
        if len({s.id for s in specs}) != len(specs):
            raise ValueError("request ids must be unique")
        if models is None:
            models = profile_cost_models(config)
        self.models = models
        self.costs: dict[int, ServiceCost] = {
            s.id: estimate_service_cost(s, models.load, models.comp, config) for s in specs}
        self.states = {s.id: _build_state(s, config) for s in specs}
        for state in self.states.values():
            self._check_fits(state)

        self.queue = PendingQueue(self.policy, self.costs, config)
        self.ledgers = {Tier.L2: TierLedger(Tier.L2, config.l2_capacity),
                        Tier.L1: TierLedger(Tier.L1, config.l1_capacity)}
        self.stages = {Stage.NET: StageState(Stage.NET, config.net_channels),
                       Stage.PCIE: StageState(Stage.PCIE, config.pcie_channels),
                       Stage.COMPUTE: StageState(Stage.COMPUTE, 1)}
        self.trace: list[TraceRecord] = []
        self._l1, self._l2 = self.ledgers[Tier.L1], self.ledgers[Tier.L2]
        self._net, self._pcie, self._comp = (self.stages[s] for s in Stage)
        self.completions = {s.value: [] for s in Stage}
        self._tier_name = {Tier.L1: _L1, Tier.L2: _L2}
        self._events: list[SimEvent] = []
        self._seq = 0
        self._trace_seq = 0
        self._in_service = 0
        self._net_active: list[_Flight] = []
        self._pcie_active: list[_Flight] = []
        self._compute_ready: list = []
        self._warned = False
        for s in specs:
            self._push(s.arrival_time, EventKind.ARRIVAL, s)

    def _check_fits(self, state):
        total = sum(b.bytes for b in state.blocks)
        for tier, cap in ((Tier.L1, self.config.l1_capacity), (Tier.L2, self.config.l2_capacity)):
            if total > cap:
                raise CapacityError(
                    f"request {state.spec.id}: {total} cached bytes exceed {tier.value} "
                    f"capacity {cap:g}")

    # -- event plumbing -------------------------------------------------
    def _push(self, time, kind, payload):
        heapq.heappush(self._events, SimEvent(time, self._seq, kind, payload))
        self._seq += 1

    def _log(self, now, kind, stage="", rid=-1, block=-1, nbytes=0):
        if self.record_trace:
            self.trace.append(TraceRecord(now, self._trace_seq, kind, stage, rid, block, nbytes))
        self._trace_seq += 1

    def run(self) -> SimulationResult:
        events = self._events
        start = events[0].time if events else 0.0
        now = start
        while events:
            now = events[0].time
            while events and events[0].time == now:
                ev = heapq.heappop(events)
                self._handle(ev)
                self._check_ledgers()
            self._dispatch(now)
        for state in self.states.values():
            if state.first_token is None:
                raise RuntimeError(f"request {state.spec.id} never completed (simulator bug)")
        return SimulationResult(
            states=[self.states[k] for k in sorted(self.states)],
            trace=self.trace, completions=self.completions, start=start, end=now,
            ledger_peak={t.value: l.peak for t, l in self.ledgers.items()},
            stage_busy={s.value: st.busy_time for s, st in self.stages.items()},
            config=self.config, policy=self.policy, seed=self.seed)

    def _check_ledgers(self):
        l1, l2 = self._l1, self._l2
        if not (0 <= l1.reserved <= l1.capacity and 0 <= l2.reserved <= l2.capacity):
            raise AssertionError(f"ledger out of bounds: L1={l1.reserved} L2={l2.reserved}")

    # -- event handlers -------------------------------------------------
    def _handle(self, ev: SimEvent):
        kind = ev.kind
        if kind is EventKind.TRANSFER_DONE:
            stage, flight, blk = ev.payload
            if stage is Stage.NET:
                self._on_net_done(ev.time, flight, blk)
            else:
                self._on_pcie_done(ev.time, flight, blk)
        elif kind is EventKind.ALLOCATION_GRANT:
            tier, blk = ev.payload
            blk.reserve(tier)
            self._log(ev.time, "alloc_grant", self._tier_name[tier], blk.request_id, blk.block_index, blk.bytes)
        elif kind is EventKind.COMPUTE_DONE:
            self._on_compute_done(ev.time, ev.payload)
        else:
            spec = ev.payload
            self.states[spec.id].arrival = ev.time
            self.queue.push(spec, ev.time)
            self._log(ev.time, "arrival", "", spec.id)
            if (self.max_queue_length is not None and not self._warned
                    and len(self.queue) > self.max_queue_length):
                self._warned = True
                warnings.warn(f"pending queue exceeded {self.max_queue_length} requests at "
                              f"t={ev.time:.3f}s", OverloadWarning, stacklevel=2)

    def _allocate(self, now, tier: Tier, blk: KVBlock) -> bool:
        if blk.bytes == 0:
            blk.reserve(tier)
            return True
        if tier_allocate(self.ledgers[tier], blk, blk.bytes) is Allocation.GRANT:
            blk.reserve(tier)
            self._log(now, "alloc_grant", self._tier_name[tier], blk.request_id, blk.block_index, blk.bytes)
            return True
        self._log(now, "alloc_defer", self._tier_name[tier], blk.request_id, blk.block_index, blk.bytes)
        return False

    def _release(self, now, tier: Tier, blk: KVBlock):
        if blk.bytes == 0:
            return
        self._log(now, "release", self._tier_name[tier], blk.request_id, blk.block_index, blk.bytes)
        for owner in self.ledgers[tier].release(blk.bytes):
            self._push(now, EventKind.ALLOCATION_GRANT, (tier, owner))

    def _on_net_done(self, now, flight: _Flight, blk: KVBlock):
        self._net.in_flight -= 1
        blk.hop()
        self.completions[_NET].append((now, blk.bytes))
        self._log(now, "transfer_done", _NET, blk.request_id, blk.block_index, blk.bytes)
        flight.n_l2 += 1
        if flight.n_l2 == flight.n_blocks:
            flight.state.l2_resident = now
        if not self.proactive:
            self._allocate(now, Tier.L1, blk)

    def _on_pcie_done(self, now, flight: _Flight, blk: KVBlock):
        self._pcie.in_flight -= 1
        blk.hop()
        self.completions[_PCIE].append((now, blk.bytes))
        self._log(now, "transfer_done", _PCIE, blk.request_id, blk.block_index, blk.bytes)
        self._release(now, Tier.L2, blk)
        flight.n_l1 += 1
        if flight.n_l1 == flight.n_blocks:
            flight.state.l1_resident = now
            insort(self._compute_ready, (flight.order, flight))

    def _on_compute_done(self, now, flight: _Flight):
        self._comp.in_flight -= 1
        state = flight.state
        state.first_token = now
        self._in_service -= 1
        kv_bytes = state.compute_tokens * self.config.bytes_per_token
        self.completions[_COMPUTE].append((now, kv_bytes))
        self._log(now, "compute_done", _COMPUTE, state.spec.id, -1, kv_bytes)
        for blk in state.blocks:
            self._release(now, Tier.L1, blk)

    # -- dispatchers ----------------------------------------------------
    def _dispatch(self, now):
        net, pcie, comp = self._net, self._pcie, self._comp
        while net.free:
            item = self._next_net_block(now)
            if item is None:
                break
            self._start_net(now, *item)
        while pcie.free:
            item = self._next_pcie_block()
            if item is None:
                break
            self._start_pcie(now, *item)
        if comp.free and self._compute_ready:
            _, flight = self._compute_ready.pop(0)
            self.start_compute(now, flight)

    def _pick(self, now) -> _Flight | None:
        entry = self.queue.pop_entry()
        if entry is None:
            return None
        key, spec = entry
        state = self.states[spec.id]
        state.scheduled = now
        net, pcie, comp = stage_seconds(state, self.config)
        flight = _Flight(state, key, net, pcie, comp)
        self._in_service += 1
        self._log(now, "schedule", "", spec.id)
        if flight.n_blocks == 0:
            state.l2_resident = state.l1_resident = now
            insort(self._compute_ready, (flight.order, flight))
        else:
            insort(self._net_active, flight, key=_flight_order)
            insort(self._pcie_active, flight, key=_flight_order)
        return flight

    def stage_dispatch(self, stage: Stage, now: float):
        """Next eligible ``(flight, block)`` for ``stage``, or ``None``."""
        if Stage(stage) is Stage.NET:
            return self._next_net_block(now)
        if Stage(stage) is Stage.PCIE:
            return self._next_pcie_block()
        raise ValueError("compute is dispatched by start_compute")

    def _next_net_block(self, now):
        while True:
            for flight in self._net_active:
                blk = flight.state.blocks[flight.next_net]
                if Tier.L2 in blk.allocated_at:
                    return flight, blk
                if not flight.l2_waiting:
                    if self._allocate(now, Tier.L2, blk):
                        return flight, blk
                    flight.l2_waiting = True
            if self._net_active:
                return None
            # NET dispatcher is out of work: this is the scheduling instant
            if self.coupled and self._in_service:
                return None
            if self._pick(now) is None:
                return None

    def _start_net(self, now, flight: _Flight, blk: KVBlock):
        flight.l2_waiting = False
        state = flight.state
        if state.l3l2_first_dispatch is None:
            state.l3l2_first_dispatch = now
        if self.proactive:
            self._allocate(now, Tier.L1, blk)
        end = self._net.occupy(now, flight.net_secs[flight.next_net])
        self._log(now, "transfer_start", _NET, blk.request_id, blk.block_index, blk.bytes)
        self._push(end, EventKind.TRANSFER_DONE, (Stage.NET, flight, blk))
        flight.next_net += 1
        if flight.next_net == flight.n_blocks:
            self._net_active.remove(flight)

    def _next_pcie_block(self):
        for flight in self._pcie_active:
            if self.coupled and flight.n_l2 < flight.n_blocks:
                continue
            blk = flight.state.blocks[flight.next_pcie]
            if blk.residency is Tier.L2 and Tier.L1 in blk.allocated_at:
                return flight, blk
        return None

    def _start_pcie(self, now, flight: _Flight, blk: KVBlock):
        end = self._pcie.occupy(now, flight.pcie_secs[flight.next_pcie])
        self._log(now, "transfer_start", _PCIE, blk.request_id, blk.block_index, blk.bytes)
        self._push(end, EventKind.TRANSFER_DONE, (Stage.PCIE, flight, blk))
        flight.next_pcie += 1
        if flight.next_pcie == flight.n_blocks:
            self._pcie_active.remove(flight)

    def start_compute(self, now: float, flight: _Flight) -> bool:
        """Launch prefill for ``flight`` if every block is in L1 and the GPU is free."""
        comp = self._comp
        if not comp.free or flight.n_l1 < flight.n_blocks:
            return False
        flight.state.compute_start = now
        end = comp.occupy(now, flight.comp_secs)
        self._log(now, "compute_start", _COMPUTE, flight.state.spec.id)
        self._push(end, EventKind.COMPUTE_DONE, flight)
        return True


def simulate(requests: Sequence[RequestSpec], config: ClusterConfig,
             policy: PolicyKind | str = PolicyKind.FIFO, models: CostModels | None = None,
             seed: int = 0, **kwargs) -> SimulationResult:
    """Run the event loop and return the raw :class:`SimulationResult`."""
    return PipelineSimulator(requests, config, policy, models, seed, **kwargs).run()


def run_simulation(requests: Sequence[RequestSpec], config: ClusterConfig,
                   policy: PolicyKind | str = PolicyKind.FIFO, models: CostModels | None = None,
                   seed: int = 0, **kwargs):
    """Simulate ``requests`` and summarise them into a :class:`~kvpipe.metrics.RunReport`."""
    from .metrics import summarize_run

    result = simulate(requests, config, policy, models, seed, **kwargs)
    return summarize_run(result, requests)


def solo_ttft(spec: RequestSpec, config: ClusterConfig,
              mode: ControlMode | str = ControlMode.DECOUPLED) -> float:
    """TTFT of ``spec`` alone in an empty system."""
    alone = spec.replace(arrival_time=0.0, deadline=None)
    cfg = config.replace(control_mode=ControlMode(mode))
    result = simulate([alone], cfg, PolicyKind.FIFO, _ZERO_MODELS, record_trace=False)
    return result.states[0].first_token


def profile_cost_models(config: ClusterConfig, token_grid: Sequence[int] | None = None) -> CostModels:
    """Offline profiling: time solo requests on ``config`` and fit both cost lines.

    Loading samples vary the cached-token count (hit ratio 1, one query
    token); compute samples vary the uncached prompt length. Each sample is
    measured from the simulated timestamps, not from the config formulas.
    """
    block = config.block_size_tokens
    if token_grid is None:
        token_grid = [block * k for k in (1, 4, 16, 64, 256)]
    load, comp = [], []
    cfg = config
    for i, n in enumerate(token_grid):
        spec = RequestSpec(i, 0.0, int(n), 1, 1.0)
        st = simulate([spec], cfg, PolicyKind.FIFO, _ZERO_MODELS, record_trace=False).states[0]
        load.append((st.cached_tokens, st.l1_resident - st.scheduled))
        spec = RequestSpec(i, 0.0, 0, max(1, int(n)), 0.0)
        st = simulate([spec], cfg, PolicyKind.FIFO, _ZERO_MODELS, record_trace=False).states[0]
        comp.append((st.compute_tokens, st.first_token - st.compute_start))
    return CostModels(fit_linear(load), fit_linear(comp))


def service_capacity(requests: Sequence[RequestSpec], config: ClusterConfig,
                     mode: ControlMode | str | None = None) -> float:
    """Sustainable request rate (req/s) for this request mix.

    Coupled mode serves requests strictly one after another, so capacity is
    the inverse of the mean end-to-end service time. Decoupled mode is
    limited by its busiest stage.
    """
    mode = ControlMode(mode or config.control_mode)
    totals = [0.0, 0.0, 0.0]
    for spec in requests:
        net, pcie, comp = stage_seconds(_build_state(spec, config), config)
        totals[0] += sum(net) / config.net_channels
        totals[1] += sum(pcie) / config.pcie_channels
        totals[2] += comp
    n = len(requests)
    if n == 0:
        raise ValueError("no requests")
    per_request = sum(totals) / n if mode is ControlMode.COUPLED else max(totals) / n
    return 1.0 / per_request
