"""Local trackers: per-stream peer registries over curve-key areas.

A tracker lists the peers carrying one stream whose curve keys fall in
its area, a half-open (possibly wrapping) interval of the key ring.
Areas split at the median registered key when a tracker overloads and
merge with a ring-adjacent sibling when it underloads, so at quiescence
the areas of one stream always partition the whole ring.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .coords import DelayCoord
from .sfc import CurveSpec, coord_to_key


class WrongAreaError(Exception):
    """Registration landed at a tracker that does not cover the peer's key;
    the caller re-resolves the right tracker through the anycast table."""

    def __init__(self, peer_key: int, area: "KeyInterval"):
        super().__init__(f"key {peer_key} outside tracker area {area}")
        self.peer_key = peer_key
        self.area = area


class MergeError(Exception):
    pass


@dataclass(frozen=True)
class PeerRecord:
    peer_id: str
    coord: DelayCoord
    upload_capacity: float
    role: str  # consumer | ncp | peercaster
    last_refresh: float = 0.0

    def __post_init__(self) -> None:
        if self.upload_capacity < 0:
            raise ValueError("upload_capacity must be >= 0")

    def wire(self) -> str:
        return (
            f"PEER {self.peer_id} {self.coord.x:.3f} {self.coord.y:.3f} "
            f"{self.upload_capacity:.1f} {self.role} {self.last_refresh:.3f}"
        )


@dataclass(frozen=True)
class KeyInterval:
    """Half-open arc [start, start + length) on a ring of n_keys keys."""

    start: int
    length: int
    n_keys: int

    def __post_init__(self) -> None:
        if not (0 < self.length <= self.n_keys):
            raise ValueError("interval length must be in (0, n_keys]")
        if not (0 <= self.start < self.n_keys):
            raise ValueError("interval start out of range")

    @property
    def end(self) -> int:
        """One past the last key, wrapped."""
        return (self.start + self.length) % self.n_keys

    def contains(self, key: int) -> bool:
        return ((key - self.start) % self.n_keys) < self.length

    def offset_of(self, key: int) -> int:
        return (key - self.start) % self.n_keys

    def split_at(self, offset: int) -> tuple["KeyInterval", "KeyInterval"]:
        if not (0 < offset < self.length):
            raise ValueError("split offset must fall strictly inside the interval")
        left = KeyInterval(self.start, offset, self.n_keys)
        right = KeyInterval((self.start + offset) % self.n_keys,
                            self.length - offset, self.n_keys)
        return left, right

    def adjacent_to(self, other: "KeyInterval") -> bool:
        if self.length + other.length > self.n_keys:
            return False
        return self.end == other.start or other.end == self.start

    def union_with(self, other: "KeyInterval") -> "KeyInterval":
        if not self.adjacent_to(other):
            raise MergeError(f"{self} and {other} are not adjacent")
        start = self.start if self.end == other.start else other.start
        return KeyInterval(start, self.length + other.length, self.n_keys)

    def __str__(self) -> str:
        return f"[{self.start}, +{self.length})"


class LocalTracker:
    def __init__(
        self,
        lt_id: str,
        stream_id: str,
        area: KeyInterval,
        spec: CurveSpec,
        coord: DelayCoord,
        load_high: int = 100,
        load_low: int = 25,
    ) -> None:
        if not load_low < load_high:
            raise ValueError("load_low must be below load_high")
        self.lt_id = lt_id
        self.stream_id = stream_id
        self.area = area
        self.spec = spec
        self.coord = coord
        self.load_high = load_high
        self.load_low = load_low
        self.registry: dict[str, PeerRecord] = {}

    @property
    def key(self) -> int:
        return coord_to_key(self.coord, self.spec)

    @property
    def overloaded(self) -> bool:
        return len(self.registry) > self.load_high

    @property
    def underloaded(self) -> bool:
        return len(self.registry) < self.load_low

    def peer_key(self, rec: PeerRecord) -> int:
        return coord_to_key(rec.coord, self.spec)

    def records(self) -> list[PeerRecord]:
        return [self.registry[pid] for pid in sorted(self.registry)]

    def register_peer(self, rec: PeerRecord) -> list[PeerRecord]:
        """Store or refresh one record and return the current peer list."""
        key = self.peer_key(rec)
        if not self.area.contains(key):
            raise WrongAreaError(key, self.area)
        self.registry[rec.peer_id] = rec
        return self.records()

    def unregister_peer(self, peer_id: str) -> bool:
        return self.registry.pop(peer_id, None) is not None

    def expire_peers(self, now: float, timeout_ms: float) -> int:
        if timeout_ms <= 0:
            raise ValueError("timeout must be > 0")
        stale = [
            pid for pid, rec in self.registry.items()
            if now - rec.last_refresh > timeout_ms
        ]
        for pid in stale:
            del self.registry[pid]
        return len(stale)

    def split_area(self) -> tuple["LocalTracker", "LocalTracker"] | None:
        """Partition at the median registered key; a peer from the new half
        (highest upload capacity, then smaller id) is promoted to run it.
        Returns (self, new tracker), or None when every registered key is
        identical and the split must be deferred."""
        offsets = sorted(self.area.offset_of(self.peer_key(r)) for r in self.registry.values())
        distinct = sorted(set(offsets))
        if len(distinct) < 2:
            return None
        split_off = offsets[len(offsets) // 2]
        if split_off == 0:
            split_off = distinct[1]
        left, right = self.area.split_at(split_off)

        own_key = self.key
        keep = left if (left.contains(own_key) or not right.contains(own_key)) else right
        give = right if keep is left else left

        moved = [r for r in self.registry.values() if give.contains(self.peer_key(r))]
        eligible = [r for r in moved if r.peer_id != self.lt_id]
        if not eligible:
            return None
        promoted = min(eligible, key=lambda r: (-r.upload_capacity, r.peer_id))
        new_lt = LocalTracker(
            promoted.peer_id, self.stream_id, give, self.spec, promoted.coord,
            self.load_high, self.load_low,
        )
        for rec in moved:
            del self.registry[rec.peer_id]
            new_lt.registry[rec.peer_id] = rec
        self.area = keep
        return self, new_lt

    def merge_areas(self, sibling: "LocalTracker") -> "LocalTracker":
        """Absorb an adjacent sibling tracker; the sibling retires (its
        anycast registration disappears at the next epoch rebuild)."""
        if sibling.stream_id != self.stream_id:
            raise MergeError("trackers serve different streams")
        if len(self.registry) + len(sibling.registry) > self.load_high:
            raise MergeError("combined registry would overload the survivor")
        self.area = self.area.union_with(sibling.area)
        self.registry.update(sibling.registry)
        sibling.registry.clear()
        return self
