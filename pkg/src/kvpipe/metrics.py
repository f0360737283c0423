"""TTFT, SLO attainment and per-stage throughput from simulation results."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import RequestSpec
from .exceptions import IncompleteTrace, WindowTooLong

DEFAULT_WINDOW = 20.0


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival: float
    first_token: float
    ttft: float
    deadline: float | None
    slo_met: bool | None


@dataclass(frozen=True)
class StageTimeline:
    """Transfer completions ``(time, bytes)`` for one stage over ``[start, end]``."""

    stage: str
    events: tuple[tuple[float, int], ...]
    start: float
    end: float

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.events)

    @property
    def average_rate(self) -> float:
        span = self.end - self.start
        return self.total_bytes / span if span > 0 else math.inf

    def buckets(self, width: float = 1.0) -> list[tuple[float, float]]:
        """``(bucket_start, bytes_per_s)`` for consecutive buckets of ``width`` seconds."""
        n = max(1, math.ceil((self.end - self.start) / width))
        acc = np.zeros(n)
        for t, b in self.events:
            i = min(int((t - self.start) // width), n - 1)
            acc[i] += b
        return [(self.start + i * width, float(acc[i] / width)) for i in range(n)]


@dataclass
class RunReport:
    records: list[RequestRecord]
    mean_ttft: float
    median_ttft: float
    p95_ttft: float
    p99_ttft: float
    slo_attainment: float | None
    timelines: dict[str, StageTimeline]
    metadata: dict = field(default_factory=dict)
    result: object = field(default=None, repr=False, compare=False)

    @property
    def ttfts(self) -> np.ndarray:
        return np.array([r.ttft for r in self.records])

    @property
    def states(self):
        return self.result.states if self.result is not None else None

    @property
    def trace(self):
        return self.result.trace if self.result is not None else None

    def peak_throughput(self, stage: str, window: float = DEFAULT_WINDOW) -> float:
        return windowed_peak_throughput(self.timelines[stage], window)

    def summary(self, window: float = DEFAULT_WINDOW) -> dict:
        peaks = {}
        for stage, tl in self.timelines.items():
            try:
                peaks[stage] = windowed_peak_throughput(tl, window)
            except WindowTooLong:
                peaks[stage] = None
        return {
            "metadata": self.metadata,
            "n_requests": len(self.records),
            "mean_ttft": self.mean_ttft,
            "median_ttft": self.median_ttft,
            "p95_ttft": self.p95_ttft,
            "p99_ttft": self.p99_ttft,
            "slo_attainment": self.slo_attainment,
            "throughput_window_s": window,
            "peak_throughput_bytes_per_s": peaks,
            "average_throughput_bytes_per_s": {s: tl.average_rate for s, tl in self.timelines.items()},
        }


def config_hash(config) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def summarize_run(trace, requests: Sequence[RequestSpec] | None = None) -> RunReport:
    """Build a :class:`RunReport` from a :class:`~kvpipe.engine.SimulationResult`.

    ``requests`` defaults to the specs carried by the result; when given, it
    fixes the record order.
    """
    by_id = {s.spec.id: s for s in trace.states}
    specs = list(requests) if requests is not None else [s.spec for s in trace.states]
    records = []
    for spec in specs:
        state = by_id.get(spec.id)
        if state is None or state.first_token is None:
            raise IncompleteTrace(f"request {spec.id} has no first_token")
        ttft = state.first_token - spec.arrival_time
        met = None if spec.deadline is None else ttft <= spec.deadline - spec.arrival_time
        records.append(RequestRecord(spec.id, spec.arrival_time, state.first_token, ttft,
                                     spec.deadline, met))
    if not records:
        raise IncompleteTrace("no requests in trace")
    ttfts = np.array([r.ttft for r in records])
    judged = [r.slo_met for r in records if r.slo_met is not None]
    attainment = sum(judged) / len(judged) if judged else None
    timelines = {stage: StageTimeline(stage, tuple(events), trace.start, trace.end)
                 for stage, events in trace.completions.items()}
    config = trace.config
    metadata = {
        "policy": trace.policy.value,
        "mode": config.control_mode.value,
        "allocation_mode": config.allocation_mode.value,
        "seed": trace.seed,
        "config_hash": config_hash(config),
        "makespan": trace.makespan,
        **trace.metadata,
    }
    return RunReport(records, float(ttfts.mean()), float(np.median(ttfts)),
                     float(np.percentile(ttfts, 95)), float(np.percentile(ttfts, 99)),
                     attainment, timelines, metadata, trace)


def windowed_peak_throughput(timeline: StageTimeline, window: float = DEFAULT_WINDOW) -> float:
    """Highest mean rate over any half-open window ``[s, s + window)``.

    Bytes count at their transfer's completion instant. Only windows starting
    at a completion can be maximal, so a two-pointer sweep over sorted
    completions suffices.
    """
    if not window > 0:
        raise ValueError("window must be > 0")
    if timeline.end - timeline.start < window:
        raise WindowTooLong(f"{timeline.stage}: trace spans {timeline.end - timeline.start:.3f}s, "
                            f"shorter than the {window}s window")
    events = sorted(timeline.events)
    best = 0
    acc = 0
    lo = 0
    for t, b in events:
        acc += b
        while not t < events[lo][0] + window:
            acc -= events[lo][1]
            lo += 1
        if acc > best:
            best = acc
    return best / window


# -- report files ------------------------------------------------------------

def write_summary_json(report: RunReport, path, window: float = DEFAULT_WINDOW) -> None:
    with open(path, "w") as fh:
        json.dump(report.summary(window), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_requests_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "arrival", "ttft", "deadline", "slo_met"])
        for r in report.records:
            w.writerow([r.id, repr(r.arrival), repr(r.ttft),
                        "" if r.deadline is None else repr(r.deadline),
                        "" if r.slo_met is None else int(r.slo_met)])


def write_throughput_csv(report: RunReport, path, bucket: float = 1.0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "stage", "bytes_per_s"])
        for stage, tl in report.timelines.items():
            for t, rate in tl.buckets(bucket):
                w.writerow([repr(t), stage, repr(rate)])


def write_trace_csv(trace: Iterable, path) -> None:
    from .engine import TRACE_COLUMNS

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            w.writerow([repr(rec.time), rec.seq, rec.kind, rec.stage, rec.request_id,
                        rec.block_index, rec.bytes])


def record_dicts(report: RunReport) -> list[dict]:
    return [asdict(r) for r in report.records]
