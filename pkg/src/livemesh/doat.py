"""Distributed Overlay Anycast Table.

A Chord-inspired ring whose identifier space is the space-filling-curve
key ring, so ring distance tracks delay-space distance. Nodes keep
fingers at exponentially increasing ring distances in both directions;
each finger carries a Bloom summary of the streams reachable through
that neighbor at scales finer than your own distance to it. Local
trackers register at their closest node, registrations flood outward
(each relay only forwards to neighbors farther away than its source),
and anycast queries walk matching fingers in increasing ring distance,
backtracking past Bloom false positives.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace

from .bloom import BloomFilter, BloomParams
from .coords import DelayCoord, distance
from .sfc import CurveSpec, coord_to_key, key_to_coord, ring_distance


class JoinError(Exception):
    pass


@dataclass(frozen=True)
class DoatParams:
    aggregation_interval_ms: float = 500.0
    rebuild_period_ms: float = 60_000.0
    record_ttl_ms: float = 120_000.0
    query_ttl_factor: int = 4
    # after a record is found, up to this many extra forwards chase
    # spatially closer candidates so the answer approaches the true nearest
    refine_budget: int = 16
    bloom: BloomParams = field(default_factory=BloomParams)

    def query_ttl(self, spec: CurveSpec) -> int:
        return self.query_ttl_factor * math.ceil(math.log2(spec.n_keys))


@dataclass(frozen=True)
class LtRecord:
    lt_address: str
    stream_id: str
    lt_key: int
    lt_coord: DelayCoord
    registered_at: float

    def wire(self) -> str:
        return (
            f"LT {self.lt_address} {self.stream_id} {self.lt_key} "
            f"{self.lt_coord.x:.3f} {self.lt_coord.y:.3f} {self.registered_at:.3f}"
        )


@dataclass(frozen=True)
class RoutingUpdate:
    origin_neighbor: str
    filter: BloomFilter
    epoch: int
    msg_type: str = "ROUTING_UPDATE"

    def wire(self) -> str:
        return f"ROUTING_UPDATE {self.origin_neighbor} {self.epoch} {self.filter.to_wire()}"


@dataclass
class DoatRoutingEntry:
    neighbor_id: str
    neighbor_key: int
    direction: str  # "cw" | "ccw"
    target_distance: int


@dataclass
class _QueryState:
    budget: int
    refine: int
    best: LtRecord | None = None
    best_distance: float = float("inf")
    visited: set[str] = field(default_factory=set)


class DoatNode:
    def __init__(
        self,
        node_id: str,
        key: int,
        coord: DelayCoord,
        params: DoatParams,
        created_at: float = 0.0,
    ):
        self.node_id = node_id
        self.key = key
        self.coord = coord
        self.params = params
        self.epoch = 0
        self.local_entry: dict[str, list[LtRecord]] = {}
        self.entries: list[DoatRoutingEntry] = []
        self.local_filter = BloomFilter(params.bloom)
        # per-neighbor learned state: id -> [filter, epoch_seen]
        self.neighbor_filters: dict[str, list] = {}
        self.neighbor_keys: dict[str, int] = {}
        self.dirty: set[str] = set()
        # a flush window opens one aggregation interval after creation
        self.last_flush_at = created_at
        self.last_sent: dict[str, tuple[int, int]] = {}
        self._topo_version = 0
        self._uniq_cache: tuple[int, list] | None = None

    # -- structure ---------------------------------------------------------

    def unique_neighbors(self, spec: CurveSpec) -> list[tuple[int, str]]:
        """(ring distance, id) pairs of table neighbors, nearest first."""
        if self._uniq_cache is not None and self._uniq_cache[0] == self._topo_version:
            return self._uniq_cache[1]
        seen = {}
        for e in self.entries:
            if e.neighbor_id not in seen:
                seen[e.neighbor_id] = ring_distance(self.key, e.neighbor_key, spec)
        out = sorted((d, n) for n, d in seen.items())
        self._uniq_cache = (self._topo_version, out)
        return out

    def neighbor_distance(self, other_id: str, spec: CurveSpec) -> int:
        key = self.neighbor_keys[other_id]
        return ring_distance(self.key, key, spec)

    # -- registrations -----------------------------------------------------

    def register_lt(self, record: LtRecord, spec: CurveSpec) -> bool:
        """Install a local tracker record; returns True when this created a
        new local route (caller then floods updates to all neighbors)."""
        if record.lt_key != coord_to_key(record.lt_coord, spec):
            raise ValueError("lt_key does not match lt_coord under the curve spec")
        records = self.local_entry.setdefault(record.stream_id, [])
        for i, existing in enumerate(records):
            if existing.lt_address == record.lt_address:
                records[i] = record  # refresh, no new route
                return False
        new_route = not self.local_filter.contains(record.stream_id) or not records
        records.append(record)
        self.local_filter = self.local_filter.insert(record.stream_id)
        if new_route:
            self.dirty.update(n for _, n in self._neighbor_pairs())
        return new_route

    def unregister_lt(self, lt_address: str, stream_id: str) -> bool:
        records = self.local_entry.get(stream_id)
        if not records:
            return False
        kept = [r for r in records if r.lt_address != lt_address]
        if len(kept) == len(records):
            return False
        if kept:
            self.local_entry[stream_id] = kept
        else:
            del self.local_entry[stream_id]
        # the Bloom bit lingers until the next epoch rebuild
        return True

    def _neighbor_pairs(self) -> list[tuple[int, str]]:
        return sorted((key, nid) for nid, key in self.neighbor_keys.items())

    # -- routing updates ----------------------------------------------------

    def reachability_toward(self, target_id: str, spec: CurveSpec) -> BloomFilter:
        """Scoped transitive summary sent to one neighbor: local streams
        plus everything learned from neighbors nearer than the target.

        Only current-epoch state is folded in; composing from older
        epochs would echo retracted routes back into the fresh flood.
        """
        limit = self.neighbor_distance(target_id, spec)
        out = self.local_filter
        for nid, (flt, epoch_seen) in sorted(self.neighbor_filters.items()):
            if nid == target_id or nid not in self.neighbor_keys:
                continue
            if epoch_seen != self.epoch:
                continue
            if ring_distance(self.key, self.neighbor_keys[nid], spec) < limit:
                out = out.union(flt)
        return out

    def handle_routing_update(
        self, from_id: str, from_key: int, update: RoutingUpdate, spec: CurveSpec
    ) -> None:
        if from_id not in self.neighbor_keys:
            self.neighbor_keys[from_id] = from_key
            self._topo_version += 1
        state = self.neighbor_filters.get(from_id)
        if state is None:
            state = [BloomFilter(self.params.bloom), update.epoch]
            self.neighbor_filters[from_id] = state
        old_bits = state[0].bits
        if update.epoch < state[1]:
            return  # stale epoch
        if update.epoch > state[1]:
            state[0] = update.filter
            state[1] = update.epoch
        else:
            state[0] = state[0].union(update.filter)
        if state[0].bits == old_bits and update.epoch == state[1]:
            return  # no change, no forwarding
        d_from = ring_distance(self.key, from_key, spec)
        for key, nid in self._neighbor_pairs():
            if nid == from_id:
                continue
            if ring_distance(self.key, key, spec) > d_from:
                self.dirty.add(nid)

    def flush_adverts(self, now: float, spec: CurveSpec) -> list[tuple[str, RoutingUpdate]]:
        """Emit batched updates for dirty targets; respects the minimum
        aggregation interval (callers re-poll when this returns early).

        Scoped filters for all targets come from one prefix-union pass in
        distance order, so a flush costs one union per neighbor instead of
        one per neighbor pair.
        """
        if not self.dirty:
            return []
        if now - self.last_flush_at < self.params.aggregation_interval_ms:
            return []
        ranked = []
        for nid, key in sorted(self.neighbor_keys.items()):
            state = self.neighbor_filters.get(nid)
            if state is None or state[1] != self.epoch:
                continue
            ranked.append((ring_distance(self.key, key, spec), nid))
        ranked.sort()
        distances = [d for d, _ in ranked]
        prefix = [self.local_filter]
        for _, nid in ranked:
            prefix.append(prefix[-1].union(self.neighbor_filters[nid][0]))
        out = []
        for nid in sorted(self.dirty):
            if nid not in self.neighbor_keys:
                continue
            limit = ring_distance(self.key, self.neighbor_keys[nid], spec)
            flt = prefix[bisect.bisect_left(distances, limit)]
            sent = self.last_sent.get(nid)
            if sent == (flt.bits, self.epoch):
                continue
            self.last_sent[nid] = (flt.bits, self.epoch)
            out.append((nid, RoutingUpdate(self.node_id, flt, self.epoch)))
        self.dirty.clear()
        self.last_flush_at = now
        return out

    def next_flush_time(self, now: float) -> float:
        return max(now, self.last_flush_at + self.params.aggregation_interval_ms)

    # -- epochs --------------------------------------------------------------

    def rebuild_epoch(self, now: float, new_epoch: int) -> None:
        """Advance the epoch: prune dead records, recompute the local filter
        from what actually remains, re-advertise everywhere."""
        self.epoch = new_epoch
        fresh: dict[str, list[LtRecord]] = {}
        for stream_id, records in self.local_entry.items():
            live = [
                r for r in records
                if now - r.registered_at <= self.params.record_ttl_ms
            ]
            if live:
                fresh[stream_id] = live
        self.local_entry = fresh
        flt = BloomFilter(self.params.bloom)
        for stream_id in fresh:
            flt = flt.insert(stream_id)
        self.local_filter = flt
        self.last_sent.clear()
        self.dirty.update(n for _, n in self._neighbor_pairs())


class DoatOverlay:
    """Membership coordination plus query execution over the node set.

    Join/leave bookkeeping is centralized (the artifact simulates one
    process); per-node state and the update/query rules stay strictly
    message-shaped so handlers remain deterministic functions of
    (state, message, time).
    """

    def __init__(self, spec: CurveSpec, params: DoatParams | None = None):
        self.spec = spec
        self.params = params or DoatParams()
        self.nodes: dict[str, DoatNode] = {}
        self._ring: list[tuple[int, str]] = []  # sorted (key, node_id)
        self._pointed_at: dict[str, set[str]] = {}
        self.current_epoch = 0

    # -- membership ----------------------------------------------------------

    def join(
        self,
        node_id: str,
        coord: DelayCoord,
        bootstrap_id: str | None,
        now: float = 0.0,
        defer_rebuild: bool = False,
    ) -> DoatNode:
        if node_id in self.nodes:
            raise JoinError(f"{node_id} already joined")
        if self.nodes:
            if bootstrap_id is None or bootstrap_id not in self.nodes:
                raise JoinError(f"bootstrap {bootstrap_id!r} is not a live DOAT node")
        key = coord_to_key(coord, self.spec)
        node = DoatNode(node_id, key, coord, self.params, created_at=now)
        node.epoch = self.current_epoch
        self.nodes[node_id] = node
        bisect.insort(self._ring, (key, node_id))
        if not defer_rebuild:
            self._rebuild_table(node)
            self._refresh_affected(node)
        return node

    def leave(self, node_id: str) -> None:
        node = self.nodes.pop(node_id, None)
        if node is None:
            return
        self._ring.remove((node.key, node_id))
        affected = self._pointed_at.pop(node_id, set())
        for nid in sorted(affected):
            if nid in self.nodes:
                self._rebuild_table(self.nodes[nid])

    def build_all(self) -> None:
        for _, nid in self._ring:
            self._rebuild_table(self.nodes[nid])

    def _target_distances(self) -> list[int]:
        out = []
        d = 1
        half = self.spec.n_keys // 2
        while d <= half:
            out.append(d)
            d <<= 1
        return out

    def _first_at_or_beyond_cw(self, key: int, exclude: str) -> tuple[int, str] | None:
        if not self._ring or (len(self._ring) == 1 and self._ring[0][1] == exclude):
            return None
        i = bisect.bisect_left(self._ring, (key, ""))
        for step in range(len(self._ring)):
            pos = (i + step) % len(self._ring)
            if self._ring[pos][1] != exclude:
                return self._ring[pos]
        return None

    def _first_at_or_beyond_ccw(self, key: int, exclude: str) -> tuple[int, str] | None:
        if not self._ring or (len(self._ring) == 1 and self._ring[0][1] == exclude):
            return None
        i = bisect.bisect_right(self._ring, (key, "￿")) - 1
        for step in range(len(self._ring)):
            pos = (i - step) % len(self._ring)
            if self._ring[pos][1] != exclude:
                return self._ring[pos]
        return None

    def _rebuild_table(self, node: DoatNode) -> None:
        for e in node.entries:
            peers = self._pointed_at.get(e.neighbor_id)
            if peers:
                peers.discard(node.node_id)
        entries: list[DoatRoutingEntry] = []
        n_keys = self.spec.n_keys
        for d in self._target_distances():
            cw = self._first_at_or_beyond_cw((node.key + d) % n_keys, node.node_id)
            if cw is not None:
                entries.append(DoatRoutingEntry(cw[1], cw[0], "cw", d))
            ccw = self._first_at_or_beyond_ccw((node.key - d) % n_keys, node.node_id)
            if ccw is not None:
                entries.append(DoatRoutingEntry(ccw[1], ccw[0], "ccw", d))
        node.entries = entries
        node._topo_version += 1
        for e in entries:
            node.neighbor_keys[e.neighbor_id] = e.neighbor_key
            node.neighbor_filters.setdefault(
                e.neighbor_id, [BloomFilter(self.params.bloom), 0]
            )
            self._pointed_at.setdefault(e.neighbor_id, set()).add(node.node_id)

    def _refresh_affected(self, new_node: DoatNode) -> None:
        """Re-aim entries captured by a newly inserted key: for each finger
        distance, exactly the nodes whose target point now falls in the arc
        (previous member, new key] change their entry."""
        if len(self._ring) < 2:
            return
        n_keys = self.spec.n_keys
        idx = self._ring.index((new_node.key, new_node.node_id))
        prev_key = self._ring[idx - 1][0]
        next_key = self._ring[(idx + 1) % len(self._ring)][0]
        touched: set[str] = set()
        for d in self._target_distances():
            # cw entries: target in (prev_key, new_key] means source key in
            # (prev_key - d, new_key - d]
            touched.update(
                nid for _, nid in self._members_in_cw_arc(
                    (prev_key - d) % n_keys, (new_node.key - d) % n_keys
                )
            )
            # ccw entries: target in [new_key, next_key) means source key in
            # [new_key + d, next_key + d)
            touched.update(
                nid for _, nid in self._members_in_cw_arc(
                    (new_node.key + d - 1) % n_keys, (next_key + d - 1) % n_keys
                )
            )
        touched.discard(new_node.node_id)
        for nid in sorted(touched):
            self._rebuild_table(self.nodes[nid])
        # warm up the newcomer: table neighbors advertise to it
        for _, nid in new_node.unique_neighbors(self.spec):
            other = self.nodes[nid]
            other.neighbor_keys.setdefault(new_node.node_id, new_node.key)
            other.dirty.add(new_node.node_id)

    def _members_in_cw_arc(self, after: int, upto: int) -> list[tuple[int, str]]:
        """Members with key in the wrapped half-open arc (after, upto]."""
        if after == upto:
            return []
        lo = bisect.bisect_right(self._ring, (after, "￿"))
        hi = bisect.bisect_right(self._ring, (upto, "￿"))
        if after < upto:
            return self._ring[lo:hi]
        return self._ring[lo:] + self._ring[:hi]

    # -- synchronous update pump (unit-test / bootstrap mode) -----------------

    def pump(self, start_time: float, max_intervals: int = 10_000) -> tuple[int, float]:
        """Deliver adverts instantly, one aggregation interval per round,
        until the flood quiesces. Returns (messages delivered, end time)."""
        t = start_time
        delivered = 0
        for _ in range(max_intervals):
            batch: list[tuple[str, str, RoutingUpdate]] = []
            for _, nid in self._ring:
                node = self.nodes[nid]
                for dst, update in node.flush_adverts(t, self.spec):
                    batch.append((nid, dst, update))
            if not batch:
                if not any(self.nodes[nid].dirty for _, nid in self._ring):
                    return delivered, t
            for src, dst, update in batch:
                if dst in self.nodes:
                    self.nodes[dst].handle_routing_update(
                        src, self.nodes[src].key, update, self.spec
                    )
            delivered += len(batch)
            t += self.params.aggregation_interval_ms
        raise RuntimeError("routing flood did not quiesce")

    # -- queries ---------------------------------------------------------------

    def closest_node_brute(self, coord: DelayCoord) -> str:
        target = coord_to_key(coord, self.spec)
        return min(
            self.nodes.values(),
            key=lambda n: (ring_distance(n.key, target, self.spec), n.node_id),
        ).node_id

    def find_closest_doat_node(
        self, query_coord: DelayCoord, entry_node: str
    ) -> tuple[str, int, list[str]]:
        """Greedy walk to the node with minimal ring distance to the query
        coordinate's key. Returns (node_id, hops, path)."""
        target = coord_to_key(query_coord, self.spec)
        current = self.nodes[entry_node]
        hops = 0
        path = [entry_node]
        limit = 4 * math.ceil(math.log2(self.spec.n_keys)) + 4
        while True:
            best_id = current.node_id
            best = (ring_distance(current.key, target, self.spec), current.node_id)
            for e in current.entries:
                cand = (ring_distance(e.neighbor_key, target, self.spec), e.neighbor_id)
                if cand < best:
                    best = cand
                    best_id = e.neighbor_id
            if best_id == current.node_id:
                return current.node_id, hops, path
            current = self.nodes[best_id]
            hops += 1
            path.append(best_id)
            if hops > limit:
                raise RuntimeError("greedy walk exceeded hop bound")

    def query_closest_lt(
        self,
        entry_node: str,
        stream_id: str,
        querier_coord: DelayCoord,
        ttl: int | None = None,
    ) -> tuple[LtRecord | None, int, list[str]]:
        """Anycast lookup: returns (record or None, forward count, path).

        Walks matching fingers in increasing ring distance, recursing; a
        downstream not-found (Bloom false positive) backtracks to the next
        candidate. Once a record is in hand, a bounded refinement keeps
        chasing candidates whose cell lies spatially closer to the querier
        than the best record so far, since ring distance only upper-bounds
        spatial locality in one direction. The path records every forward
        edge in order.
        """
        state = _QueryState(
            budget=ttl if ttl is not None else self.params.query_ttl(self.spec),
            refine=self.params.refine_budget,
        )
        state.visited.add(entry_node)
        path: list[str] = [entry_node]
        self._query(self.nodes[entry_node], stream_id, querier_coord, state, path)
        return state.best, len(path) - 1, path

    def _query(
        self,
        node: DoatNode,
        stream_id: str,
        querier_coord: DelayCoord,
        state: "_QueryState",
        path: list[str],
    ) -> None:
        records = node.local_entry.get(stream_id)
        if records:
            rec = min(
                records,
                key=lambda r: (distance(r.lt_coord, querier_coord), r.lt_address),
            )
            dist_ = distance(rec.lt_coord, querier_coord)
            if dist_ < state.best_distance:
                state.best = rec
                state.best_distance = dist_
        candidates = []
        for ring_d, nid in node.unique_neighbors(self.spec):
            if nid in state.visited:
                continue
            flt = node.neighbor_filters.get(nid)
            if flt is None or flt[1] <= node.epoch - 2:
                continue
            if flt[0].contains(stream_id):
                candidates.append((ring_d, nid))
        for _, nid in candidates:
            if state.budget <= 0:
                return
            if state.best is not None:
                if state.refine <= 0:
                    return
                cell = key_to_coord(node.neighbor_keys[nid], self.spec)
                if distance(cell, querier_coord) >= state.best_distance:
                    continue
                state.refine -= 1
            state.budget -= 1
            state.visited.add(nid)
            path.append(nid)
            self._query(self.nodes[nid], stream_id, querier_coord, state, path)
            if state.best is not None and state.refine <= 0:
                return

    # -- epoch sweep -------------------------------------------------------------

    def rebuild_all_epochs(self, now: float) -> int:
        epoch = int(now // self.params.rebuild_period_ms)
        self.current_epoch = epoch
        for _, nid in self._ring:
            self.nodes[nid].rebuild_epoch(now, epoch)
        return epoch
