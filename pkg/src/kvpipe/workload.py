"""Synthetic request streams: dataset length profiles, Poisson arrivals, SLOs."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import ClusterConfig, ControlMode, RequestSpec
from .exceptions import ConfigError, UnknownProfile

MIN_GAP = 1e-6
DEFAULT_CV = 0.5
HIT_RATIO_SWEEP = (0.25, 0.5, 0.75, 1.0)
SLO_FACTORS = (2.0, 4.0, 8.0)


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    num_requests: int
    context_tokens_mean: float
    query_tokens_mean: float
    context_tokens_cv: float = DEFAULT_CV
    query_tokens_cv: float = DEFAULT_CV

    def __post_init__(self):
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")
        if not (self.context_tokens_mean > 0 and self.query_tokens_mean > 0):
            raise ValueError("length means must be > 0")
        if self.context_tokens_cv < 0 or self.query_tokens_cv < 0:
            raise ValueError("cv must be >= 0")


# Long-context dataset statistics: request count, mean context, mean query.
PROFILES = {
    "loogle": DatasetProfile("loogle", 120, 28_100, 28),
    "icl": DatasetProfile("icl", 120, 28_300, 61),
    "code": DatasetProfile("code", 100, 38_300, 209),
}


def builtin_profile(name: str) -> DatasetProfile:
    try:
        return PROFILES[name.strip().lower()]
    except KeyError:
        raise UnknownProfile(f"unknown dataset profile {name!r} (choose from "
                             f"{', '.join(sorted(PROFILES))})") from None


@dataclass(frozen=True)
class WorkloadSpec:
    """What to generate.

    ``hit_ratio_source`` is either one ratio applied to every request or a
    sequence to draw from uniformly per request. ``count`` defaults to the
    profile's request count.
    """

    profile: DatasetProfile
    qps: float
    count: int | None = None
    hit_ratio_source: float | tuple[float, ...] = 1.0
    slo_factors: tuple[float, ...] = SLO_FACTORS
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.profile, str):
            object.__setattr__(self, "profile", builtin_profile(self.profile))
        if self.count is None:
            object.__setattr__(self, "count", self.profile.num_requests)
        if not isinstance(self.hit_ratio_source, (int, float)):
            object.__setattr__(self, "hit_ratio_source", tuple(self.hit_ratio_source))
        object.__setattr__(self, "slo_factors", tuple(self.slo_factors))
        if not self.qps > 0:
            raise ValueError("qps must be > 0")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if any(f <= 1 for f in self.slo_factors):
            raise ValueError("SLO factors must be > 1")
        ratios = self.hit_ratios
        if not ratios or any(not 0 <= r <= 1 for r in ratios):
            raise ValueError("hit ratios must lie in [0, 1]")

    @property
    def hit_ratios(self) -> tuple[float, ...]:
        if isinstance(self.hit_ratio_source, (int, float)):
            return (float(self.hit_ratio_source),)
        return tuple(float(r) for r in self.hit_ratio_source)

    def replace(self, **changes) -> "WorkloadSpec":
        return dataclasses.replace(self, **changes)


def _lognormal_lengths(rng, mean, cv, n):
    if cv == 0:
        draws = np.full(n, float(mean))
    else:
        sigma2 = np.log1p(cv * cv)
        draws = rng.lognormal(np.log(mean) - sigma2 / 2, np.sqrt(sigma2), n)
    return np.maximum(1, np.rint(draws)).astype(int)


def generate_workload(spec: WorkloadSpec) -> list[RequestSpec]:
    """Poisson arrivals with lognormal context/query lengths.

    Inter-arrival gaps are drawn at unit rate and divided by ``qps``, so two
    specs differing only in ``qps`` produce the same lengths and hit ratios
    with arrivals rescaled.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.count
    gaps = np.maximum(rng.standard_exponential(n) / spec.qps, MIN_GAP)
    arrivals = np.cumsum(gaps)
    p = spec.profile
    contexts = _lognormal_lengths(rng, p.context_tokens_mean, p.context_tokens_cv, n)
    queries = _lognormal_lengths(rng, p.query_tokens_mean, p.query_tokens_cv, n)
    ratios = spec.hit_ratios
    if len(ratios) == 1:
        hits = np.full(n, ratios[0])
    else:
        hits = rng.choice(np.asarray(ratios), size=n)
    return [RequestSpec(i, float(arrivals[i]), int(contexts[i]), int(queries[i]), float(hits[i]),
                        dataset_tag=p.name)
            for i in range(n)]


def assign_slos(requests: Sequence[RequestSpec], config: ClusterConfig, models=None,
                factors: Sequence[float] = SLO_FACTORS, seed: int = 0) -> list[RequestSpec]:
    """Give each request ``deadline = arrival + factor * solo_ttft``.

    ``solo_ttft`` is the request's TTFT simulated alone on an idle decoupled
    pipeline; ``factor`` is drawn uniformly from ``factors``. ``models`` is
    accepted for signature symmetry with the engine; an idle system has no
    ordering decisions, so it does not affect the result.
    """
    from .engine import solo_ttft

    if not len(factors):
        raise ValueError("factors must be non-empty")
    rng = np.random.default_rng([seed, 0x51])
    draws = rng.choice(np.asarray(factors, dtype=float), size=len(requests))
    baseline_cache: dict = {}
    out = []
    for spec, factor in zip(requests, draws):
        key = (spec.context_tokens, spec.query_tokens, spec.cache_hit_ratio, spec.measured_cost)
        base = baseline_cache.get(key)
        if base is None:
            base = baseline_cache[key] = solo_ttft(spec, config, ControlMode.DECOUPLED)
        out.append(spec.replace(deadline=spec.arrival_time + float(factor) * base))
    return out


def generate_at_load(spec: WorkloadSpec, config: ClusterConfig, load_factor: float,
                     mode: ControlMode | str | None = None) -> tuple[list[RequestSpec], float]:
    """Generate ``spec``'s requests with qps set to ``load_factor`` x simulated capacity.

    Returns the requests and the qps used.
    """
    from .engine import service_capacity

    probe = generate_workload(spec.replace(qps=1.0))
    qps = load_factor * service_capacity(probe, config, mode)
    return generate_workload(spec.replace(qps=qps)), qps


def save_jsonl(requests: Iterable[RequestSpec], path) -> None:
    with open(Path(path), "w") as fh:
        for spec in requests:
            fh.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")


def load_jsonl(path) -> list[RequestSpec]:
    out = []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(RequestSpec.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def two_request_example() -> list[RequestSpec]:
    """The two-request loading-aware scheduling example, as measured costs.

    R1 arrives first and needs 0.361 s to load and 0.019 s to compute; R2
    needs 0.199 s and 0.025 s. Both are waiting when the scheduler decides.
    """
    return [
        RequestSpec(1, 0.0, 28_100, 28, 1.0, measured_cost=(0.361, 0.019), dataset_tag="loogle"),
        RequestSpec(2, 0.0, 28_100, 28, 1.0, measured_cost=(0.199, 0.025), dataset_tag="loogle"),
    ]


def profile_from_dict(d: Any, path: str = "workload.profile") -> DatasetProfile:
    if isinstance(d, str):
        try:
            return builtin_profile(d)
        except UnknownProfile as exc:
            raise ConfigError([(path, str(exc))]) from None
    if not isinstance(d, Mapping):
        raise ConfigError([(path, "must be a profile name or an object")])
    known = {f.name for f in dataclasses.fields(DatasetProfile)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError([(f"{path}.{k}", "unknown key") for k in unknown])
    try:
        return DatasetProfile(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError([(path, str(exc))]) from None
