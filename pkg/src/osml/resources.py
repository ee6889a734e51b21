"""Platform constants and the allocation value types shared by every module."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping


class PreconditionError(ValueError):
    """An allocation or request falls outside its documented bounds."""


class SaturationError(ValueError):
    """Offered load exceeds the profile's max sustainable RPS."""


class CapacityError(RuntimeError):
    """A ledger mutation would over-commit the platform."""


@dataclass(frozen=True)
class Platform:
    total_cores: int = 36
    total_ways: int = 20
    total_bw_gbs: float = 76.8
    llc_mb: float = 45.0
    core_freq_ghz: float = 2.3

    @property
    def way_mb(self) -> float:
        return self.llc_mb / self.total_ways

    def ways_for_mb(self, mb: float) -> int:
        """Smallest way count whose capacity covers ``mb``."""
        return max(1, math.ceil(mb / self.way_mb - 1e-9))


DEFAULT_PLATFORM = Platform()


@dataclass(frozen=True)
class Allocation:
    """One service's grant.

    ``way_ids`` names the concrete LLC ways; ``shared_ways`` is the subset the
    service holds non-exclusively (way sharing on admission).  ``threads`` of
    ``None`` means one thread per allocated core.
    """

    cores: int
    way_ids: frozenset[int]
    bw_share: float = 1.0
    threads: int | None = None
    shared_ways: frozenset[int] = frozenset()

    @classmethod
    def of(cls, cores: int, ways: int, bw_share: float = 1.0,
           threads: int | None = None, first_way: int = 0) -> Allocation:
        return cls(cores=cores, way_ids=frozenset(range(first_way, first_way + ways)),
                   bw_share=bw_share, threads=threads)

    @property
    def ways(self) -> int:
        return len(self.way_ids)

    @property
    def exclusive_ways(self) -> frozenset[int]:
        return self.way_ids - self.shared_ways

    @property
    def thread_count(self) -> int:
        return self.cores if self.threads is None else self.threads

    def with_(self, **changes) -> Allocation:
        return replace(self, **changes)


@dataclass(frozen=True)
class ContentionState:
    """Cross-service interference visible to one latency evaluation.

    ``shared_way_sets`` maps a way index to the services occupying it; a way
    held by k services yields 1/k of a way to each.  When ``bw_partitioned`` is
    false (no MBA-style control) every service slows once aggregate demand
    exceeds the platform bandwidth.
    """

    shared_way_sets: Mapping[int, frozenset[str]] = field(default_factory=dict)
    total_bw_demand_gbs: float = 0.0
    platform_bw_gbs: float = DEFAULT_PLATFORM.total_bw_gbs
    bw_partitioned: bool = True

    def __post_init__(self):
        if self.total_bw_demand_gbs < 0:
            raise PreconditionError("total bandwidth demand must be nonnegative")

    def effective_ways(self, alloc: Allocation) -> float:
        total = 0.0
        for way in alloc.way_ids:
            holders = self.shared_way_sets.get(way)
            total += 1.0 / max(1, len(holders)) if holders else 1.0
        return total


NO_CONTENTION = ContentionState()
