"""Domain types shared by every module, plus block planning and KV sizing.

Storage tiers follow the usual three-level hierarchy: ``L3`` is remote CPU
DRAM (the distributed pool), ``L2`` local CPU DRAM and ``L1`` GPU HBM.
Cached KV blocks move strictly upward, one hop at a time.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .exceptions import ConfigError


class Tier(str, Enum):
    L3 = "L3"
    L2 = "L2"
    L1 = "L1"


_NEXT_TIER = {Tier.L3: Tier.L2, Tier.L2: Tier.L1}


class AllocationMode(str, Enum):
    PROACTIVE = "proactive"
    REACTIVE = "reactive"


class ControlMode(str, Enum):
    COUPLED = "coupled"
    DECOUPLED = "decoupled"


# Llama-3.1-8B: 32 layers, 8 KV heads, head_dim 128, fp16.
DEFAULT_BYTES_PER_TOKEN = 131072
# 400 Gbps RDMA link.
DEFAULT_NETWORK_BANDWIDTH = 400e9 / 8


def kv_bytes_per_token(layers: int, kv_heads: int, head_dim: int, dtype_bytes: int) -> int:
    """Bytes of K and V cache one token occupies across all layers."""
    for name, value in (("layers", layers), ("kv_heads", kv_heads),
                        ("head_dim", head_dim), ("dtype_bytes", dtype_bytes)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
    return 2 * int(layers) * int(kv_heads) * int(head_dim) * int(dtype_bytes)


@dataclass(frozen=True)
class RequestSpec:
    """One inference request as submitted to the serving engine."""

    id: int
    arrival_time: float
    context_tokens: int
    query_tokens: int
    cache_hit_ratio: float = 1.0
    deadline: float | None = None
    measured_cost: tuple[float, float] | None = None
    dataset_tag: str = ""

    def __post_init__(self):
        if self.context_tokens < 0:
            raise ValueError(f"request {self.id}: context_tokens must be >= 0")
        if self.query_tokens < 1:
            raise ValueError(f"request {self.id}: query_tokens must be >= 1")
        if not 0.0 <= self.cache_hit_ratio <= 1.0:
            raise ValueError(f"request {self.id}: cache_hit_ratio must be in [0, 1]")
        if self.arrival_time < 0 or not math.isfinite(self.arrival_time):
            raise ValueError(f"request {self.id}: arrival_time must be finite and >= 0")
        if self.deadline is not None and not self.deadline > self.arrival_time:
            raise ValueError(f"request {self.id}: deadline must be after arrival_time")
        if self.measured_cost is not None:
            cost = tuple(float(c) for c in self.measured_cost)
            if len(cost) != 2 or min(cost) < 0:
                raise ValueError(f"request {self.id}: measured_cost must be two non-negative seconds")
            object.__setattr__(self, "measured_cost", cost)

    @property
    def prompt_tokens(self) -> int:
        return self.context_tokens + self.query_tokens

    def replace(self, **changes) -> "RequestSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if self.measured_cost is not None:
            d["measured_cost"] = list(self.measured_cost)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RequestSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown request fields: {sorted(unknown)}")
        kwargs = dict(d)
        if kwargs.get("measured_cost") is not None:
            kwargs["measured_cost"] = tuple(kwargs["measured_cost"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ClusterConfig:
    """Hardware and control knobs for one simulated serving node.

    Bandwidths are bytes/second, capacities bytes, times seconds.
    ``net_channels``/``pcie_channels`` split a stage's bandwidth evenly across
    parallel executor channels.
    """

    network_bandwidth: float = DEFAULT_NETWORK_BANDWIDTH
    pcie_bandwidth: float = 64e9
    transfer_base_latency: float = 10e-6
    l1_capacity: float = 40e9
    l2_capacity: float = 64e9
    bytes_per_token: int = DEFAULT_BYTES_PER_TOKEN
    block_size_tokens: int = 256
    compute_base: float = 0.015
    compute_per_token: float = 4e-5
    compute_quadratic: float = 0.0
    allocation_mode: AllocationMode = AllocationMode.PROACTIVE
    control_mode: ControlMode = ControlMode.DECOUPLED
    net_channels: int = 1
    pcie_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "allocation_mode", AllocationMode(self.allocation_mode))
        object.__setattr__(self, "control_mode", ControlMode(self.control_mode))
        errors = []
        for name in ("network_bandwidth", "pcie_bandwidth", "l1_capacity", "l2_capacity",
                     "bytes_per_token"):
            if not getattr(self, name) > 0:
                errors.append((name, "must be > 0"))
        for name in ("transfer_base_latency", "compute_base", "compute_per_token",
                     "compute_quadratic"):
            if getattr(self, name) < 0:
                errors.append((name, "must be >= 0"))
        for name in ("block_size_tokens", "net_channels", "pcie_channels"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                errors.append((name, "must be an integer >= 1"))
        if errors:
            raise ConfigError(errors)

    def compute_seconds(self, compute_tokens: int) -> float:
        n = compute_tokens
        return self.compute_base + self.compute_per_token * n + self.compute_quadratic * n * n

    def net_seconds(self, nbytes: float) -> float:
        return self.transfer_base_latency + nbytes * self.net_channels / self.network_bandwidth

    def pcie_seconds(self, nbytes: float) -> float:
        return self.transfer_base_latency + nbytes * self.pcie_channels / self.pcie_bandwidth

    def replace(self, **changes) -> "ClusterConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["allocation_mode"] = self.allocation_mode.value
        d["control_mode"] = self.control_mode.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], path: str = "cluster") -> "ClusterConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([(f"{path}.{k}", "unknown key") for k in unknown])
        try:
            return cls(**d)
        except ConfigError as exc:
            raise ConfigError([(f"{path}.{p}", m) for p, m in exc.errors]) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError([(path, str(exc))]) from None


@dataclass
class KVBlock:
    """Unit of transfer and residency for a request's cached prefix."""

    request_id: int
    block_index: int
    tokens: int
    bytes: int
    residency: Tier = Tier.L3
    allocated_at: set = field(default_factory=set)

    def reserve(self, tier: Tier) -> None:
        self.allocated_at.add(Tier(tier))

    def hop(self) -> Tier:
        """Move one tier up; the destination must already be reserved."""
        dest = _NEXT_TIER.get(self.residency)
        if dest is None:
            raise RuntimeError(f"block {self.request_id}/{self.block_index} already in L1")
        if dest not in self.allocated_at:
            raise RuntimeError(
                f"block {self.request_id}/{self.block_index}: hop into {dest.value} without reservation")
        self.residency = dest
        return dest


def cached_token_count(spec: RequestSpec, config: ClusterConfig) -> int:
    """Cached prefix length, rounded down to whole blocks."""
    block = config.block_size_tokens
    # small epsilon absorbs float error in context * ratio (e.g. 0.29 * 100)
    n_blocks = math.floor(spec.context_tokens * spec.cache_hit_ratio / block + 1e-9)
    return n_blocks * block


def derive_block_plan(spec: RequestSpec, config: ClusterConfig) -> list[KVBlock]:
    cached = cached_token_count(spec, config)
    size = config.block_size_tokens
    blocks = []
    start = 0
    while start < cached:
        tokens = min(size, cached - start)
        blocks.append(KVBlock(spec.id, len(blocks), tokens, tokens * config.bytes_per_token))
        start += tokens
    return blocks


_TIMESTAMP_ORDER = ("arrival", "scheduled", "l3l2_first_dispatch", "l2_resident",
                    "l1_resident", "compute_start", "first_token")


@dataclass
class RequestState:
    """Mutable per-request progress through the pipeline."""

    spec: RequestSpec
    cached_tokens: int
    compute_tokens: int
    blocks: list[KVBlock]
    arrival: float | None = None
    scheduled: float | None = None
    l3l2_first_dispatch: float | None = None
    l2_resident: float | None = None
    l1_resident: float | None = None
    compute_start: float | None = None
    first_token: float | None = None

    TIMESTAMP_FIELDS = _TIMESTAMP_ORDER

    @classmethod
    def from_spec(cls, spec: RequestSpec, config: ClusterConfig) -> "RequestState":
        cached = cached_token_count(spec, config)
        return cls(spec=spec, cached_tokens=cached,
                   compute_tokens=spec.context_tokens + spec.query_tokens - cached,
                   blocks=derive_block_plan(spec, config))

    def timestamps(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in _TIMESTAMP_ORDER}

    @property
    def ttft(self) -> float | None:
        if self.first_token is None:
            return None
        return self.first_token - self.spec.arrival_time
