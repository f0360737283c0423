"""Shared fixtures.

Every simulation run anywhere in the suite passes through
``check_result``: block conservation, ledger bounds, timestamp order and
bit-exact determinism (by re-running the same inputs).
"""

from __future__ import annotations

import io
import time
from collections import Counter, defaultdict

import pytest
from hypothesis import settings

from kvpipe import engine
from kvpipe.core import RequestState, Tier
from kvpipe.metrics import write_trace_csv

settings.register_profile("kvpipe", deadline=None, max_examples=60)
settings.load_profile("kvpipe")

ACCEPTANCE_LINES: list[str] = []


class _Overhead:
    seconds = 0.0
    runs = 0


OVERHEAD = _Overhead()


def trace_bytes(result) -> bytes:
    buf = io.StringIO()
    from kvpipe.engine import TRACE_COLUMNS
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    for rec in result.trace:
        buf.write(f"{rec.time!r},{rec.seq},{rec.kind},{rec.stage},{rec.request_id},"
                  f"{rec.block_index},{rec.bytes}\n")
    for st in result.states:
        buf.write(repr(sorted(st.timestamps().items())) + "\n")
    return buf.getvalue().encode()


def check_result(result) -> None:
    cfg = result.config
    n_blocks = sum(len(s.blocks) for s in result.states)
    block_bytes = sum(b.bytes for s in result.states for b in s.blocks)

    # conservation: one NET hop and one PCIe hop per block, bytes preserved
    for stage in ("net", "pcie"):
        done = result.completions[stage]
        assert len(done) == n_blocks, f"{stage}: {len(done)} transfers for {n_blocks} blocks"
        assert sum(b for _, b in done) == block_bytes
    for s in result.states:
        for b in s.blocks:
            assert b.residency is Tier.L1
            assert b.bytes == b.tokens * cfg.bytes_per_token or s.spec.measured_cost is not None

    # timestamp chain
    for s in result.states:
        ts = [v for v in s.timestamps().values() if v is not None]
        assert s.first_token is not None, f"request {s.spec.id} incomplete"
        assert all(a <= b for a, b in zip(ts, ts[1:])), f"request {s.spec.id}: {s.timestamps()}"
        assert s.arrival == s.spec.arrival_time

    # ledger bounds at every peak, and at every event boundary when traced
    assert result.ledger_peak["L1"] <= cfg.l1_capacity
    assert result.ledger_peak["L2"] <= cfg.l2_capacity
    if result.trace:
        reserved = {"L1": 0, "L2": 0}
        cap = {"L1": cfg.l1_capacity, "L2": cfg.l2_capacity}
        hops = defaultdict(Counter)
        seqs = [r.seq for r in result.trace]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
        times = [r.time for r in result.trace]
        assert all(a <= b for a, b in zip(times, times[1:]))
        for rec in result.trace:
            if rec.kind == "alloc_grant":
                reserved[rec.stage] += rec.bytes
                assert reserved[rec.stage] <= cap[rec.stage], rec
            elif rec.kind == "release":
                reserved[rec.stage] -= rec.bytes
                assert reserved[rec.stage] >= 0, rec
            elif rec.kind == "transfer_done":
                hops[rec.stage][(rec.request_id, rec.block_index)] += 1
        expected = Counter({(s.spec.id, b.block_index): 1 for s in result.states for b in s.blocks})
        assert hops["net"] == expected and hops["pcie"] == expected
        assert reserved == {"L1": 0, "L2": 0}


@pytest.fixture(autouse=True)
def _checked_simulations(monkeypatch):
    original_init = engine.PipelineSimulator.__init__
    original_run = engine.PipelineSimulator.run

    def init(self, *args, **kwargs):
        self._ctor = (args, dict(kwargs))
        original_init(self, *args, **kwargs)

    def run(self):
        result = original_run(self)
        t0 = time.perf_counter()
        check_result(result)
        if not getattr(self, "_is_replay", False):
            args, kwargs = self._ctor
            twin = engine.PipelineSimulator.__new__(engine.PipelineSimulator)
            original_init(twin, *args, **kwargs)
            twin._is_replay = True
            again = original_run(twin)
            assert trace_bytes(again) == trace_bytes(result), "non-deterministic simulation"
        OVERHEAD.seconds += time.perf_counter() - t0
        OVERHEAD.runs += 1
        return result

    monkeypatch.setattr(engine.PipelineSimulator, "__init__", init)
    monkeypatch.setattr(engine.PipelineSimulator, "run", run)
    yield


@pytest.fixture
def report_line():
    def emit(line: str):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
