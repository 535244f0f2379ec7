"""Real-time mesh/pull swarming.

Consumers pull chunks from neighbors selected toward the stream origin,
keep a playout buffer ahead of the playout point, and start playback
once enough consecutive chunks are buffered. Non-consuming peers pull
only a fraction of the chunks and re-upload them as often as asked,
multiplying the swarm's usable capacity.
"""

from __future__ import annotations

import hashlib
import math
import random
import statistics
from dataclasses import dataclass, field

from . import _kernels
from .coords import DelayCoord, distance
from .tracker import PeerRecord

PENDING, REQUESTED, RECEIVED, SKIPPED = 0, 1, 2, 3


@dataclass(frozen=True)
class Chunk:
    stream_id: str
    seq: int
    created_at: float
    size_bits: float

    def wire(self) -> str:
        return f"CHUNK {self.stream_id} {self.seq} {self.created_at:.3f} {self.size_bits:.0f}"


@dataclass(frozen=True)
class StreamParams:
    stream_id: str = "stream"
    rate_kbit_s: float = 350.0
    chunk_duration_ms: float = 250.0

    @property
    def chunk_size_bits(self) -> float:
        return self.rate_kbit_s * self.chunk_duration_ms

    def make_chunk(self, seq: int, now: float) -> Chunk:
        return Chunk(self.stream_id, seq, now, self.chunk_size_bits)


@dataclass(frozen=True)
class SwarmParams:
    window_chunks: int = 40  # at most 64: the scheduler packs one slot per mask bit
    startup_threshold: int = 8
    k_short: int = 4
    k_jump: int = 2
    chunk_price: float = 1.0
    per_requester_concurrency: int = 4
    request_timeout_ms: float = 2000.0
    queue_penalty_ms: float = 60.0
    # mid-stream joiners anchor this many chunks behind the newest possible
    # start so the startup run pulls well-replicated chunks, not the single
    # copy the origin just produced
    join_depth_chunks: int = 4
    # before playback, spread the fetch burst over more providers by
    # tightening the per-link budget
    startup_per_link_cap: int = 2

    def __post_init__(self) -> None:
        if not (1 <= self.window_chunks <= 64):
            raise ValueError("window_chunks must be in [1, 64]")
        if self.startup_threshold < 1:
            raise ValueError("startup_threshold must be >= 1")


class PlayoutBuffer:
    """Window of slots ahead of the playout point.

    The playout point only advances; every sequence number behind it has
    been either played or skipped.
    """

    def __init__(self, window: int, startup_threshold: int):
        self.window = window
        self.startup_threshold = startup_threshold
        self.playout_point = 0
        self.slots: dict[int, int] = {}
        self.started = False
        self.start_time = 0.0
        self.start_seq = 0
        self.highest_known = -1

    def in_window(self, seq: int) -> bool:
        return self.playout_point <= seq < self.playout_point + self.window

    def state(self, seq: int) -> int:
        return self.slots.get(seq, PENDING)

    def mark(self, seq: int, state: int) -> None:
        if seq >= self.playout_point:
            self.slots[seq] = state

    def consecutive_received(self) -> int:
        run = 0
        while self.slots.get(self.playout_point + run) == RECEIVED:
            run += 1
        return run

    def should_start(self) -> bool:
        return not self.started and self.consecutive_received() >= self.startup_threshold

    def begin_playback(self, now: float) -> None:
        self.started = True
        self.start_time = now
        self.start_seq = self.playout_point

    def deadline(self, seq: int, chunk_duration_ms: float) -> float:
        """Playout wall time of a sequence number; infinite before start."""
        if not self.started:
            return float("inf")
        return self.start_time + (seq - self.start_seq) * chunk_duration_ms

    def advance(self) -> tuple[int, int]:
        """Consume the slot at the playout point: (seq, its final state)."""
        seq = self.playout_point
        state = self.slots.pop(seq, PENDING)
        final = RECEIVED if state == RECEIVED else SKIPPED
        self.playout_point = seq + 1
        return seq, final

    def reanchor(self, new_point: int) -> int:
        """Jump the pre-playback window forward toward the live edge;
        everything left behind is marked off as skipped. Returns the
        number of slots abandoned."""
        if self.started or new_point <= self.playout_point:
            return 0
        skipped = 0
        for seq in range(self.playout_point, new_point):
            if self.slots.pop(seq, PENDING) != RECEIVED:
                skipped += 1
        self.playout_point = new_point
        return skipped


@dataclass
class NeighborLink:
    neighbor_id: str
    link_kind: str  # "short" | "jump"
    predicted_delay: float
    have: set[int] = field(default_factory=set)
    highest_advertised: int = -1
    queue_len_seen: int = 0
    measured_throughput: float = 0.0
    outstanding: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.predicted_delay < 0:
            raise ValueError("predicted_delay must be >= 0")

    def note_have(self, seqs, floor: int = 0) -> None:
        for seq in seqs:
            if seq >= floor:
                self.have.add(seq)
            if seq > self.highest_advertised:
                self.highest_advertised = seq

    def prune_have(self, floor: int) -> None:
        self.have = {s for s in self.have if s >= floor}


@dataclass
class NcpPolicy:
    """Download filter for a non-consuming peer: one residue class of
    sequence numbers, giving an expected download fraction of 1/modulus."""

    modulus: int
    offset: int

    def wants(self, seq: int) -> bool:
        return seq % self.modulus == self.offset


def ncp_chunk_policy(fraction: float, offset: int = 0) -> NcpPolicy:
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    modulus = max(1, round(1.0 / fraction))
    return NcpPolicy(modulus, offset % modulus)


class SwarmPeer:
    def __init__(
        self,
        peer_id: str,
        role: str,
        coord: DelayCoord,
        upload_capacity: float,
        stream: StreamParams,
        params: SwarmParams,
        per_hop_processing: float = 5.0,
        ncp_policy: NcpPolicy | None = None,
    ) -> None:
        self.peer_id = peer_id
        self.role = role
        self.coord = coord
        self.upload_capacity = upload_capacity
        self.stream = stream
        self.params = params
        self.per_hop_processing = per_hop_processing
        self.ncp_policy = ncp_policy
        self.buffer = (
            PlayoutBuffer(params.window_chunks, params.startup_threshold)
            if role == "consumer"
            else None
        )
        self.neighbors: dict[str, NeighborLink] = {}
        self.have_map: set[int] = set()
        self.chunks: dict[int, Chunk] = {}
        self.highest_known = -1
        # history for metrics
        self._salt = int.from_bytes(
            hashlib.blake2b(peer_id.encode(), digest_size=4).digest(), "big"
        )
        self.join_request_time: float | None = None
        self.playback_start_time: float | None = None
        self.lag_samples: list[float] = []
        self.played = 0
        self.missed = 0
        self.chunks_uploaded = 0
        self.chunks_downloaded = 0
        self.unsolicited = 0

    # -- availability -------------------------------------------------------

    def note_stream_head(self, seq: int) -> None:
        if seq > self.highest_known:
            self.highest_known = seq
        # a consumer joining mid-stream anchors its window near the live
        # edge the first time it learns where the edge is
        buf = self.buffer
        if buf is not None and not buf.started and buf.playout_point == 0 and not buf.slots:
            anchor = max(
                0,
                self.highest_known
                - buf.startup_threshold
                - self.params.join_depth_chunks
                + 1,
            )
            if anchor > 0:
                buf.playout_point = anchor

    def hold_chunk(self, chunk: Chunk) -> None:
        self.have_map.add(chunk.seq)
        self.chunks[chunk.seq] = chunk
        self.note_stream_head(chunk.seq)

    # -- scheduling -----------------------------------------------------------

    def wanted_slots(self, now: float) -> list[tuple[float, int, int]]:
        """(deadline, rarity, seq) for every slot worth requesting now.

        Ordering is earliest-deadline-first at one-second granularity with
        rarest-first inside each bucket and sequence order last; the bucket
        boundary carries a per-peer phase so peers at identical depth cut
        their buckets differently, spreading the origin's upload capacity
        over distinct chunks instead of duplicating one.
        """
        cd = self.stream.chunk_duration_ms
        out = []
        ranked = []
        if self.buffer is not None:
            buf = self.buffer
            lo = buf.playout_point
            hi = min(lo + buf.window, self.highest_known + 1)
            bucket_ms = 4.0 * cd
            phase = (self._salt & 0xFFFF) / 65536.0 * bucket_ms
            for seq in range(lo, hi):
                if buf.state(seq) != PENDING or seq in self.have_map:
                    continue
                rarity = sum(1 for l in self.neighbors.values() if seq in l.have)
                if buf.started:
                    deadline = buf.deadline(seq, cd)
                else:
                    # virtual pacing before playback: keeps the startup run
                    # fetching in sequence order without expiring anything
                    deadline = now + (seq - lo) * cd
                bucket = int((deadline + phase) // bucket_ms)
                ranked.append((bucket, rarity, seq, deadline))
            ranked.sort()
            out = [(deadline, rarity, seq) for _, rarity, seq, deadline in ranked]
        elif self.ncp_policy is not None:
            in_flight = sum(len(l.outstanding) for l in self.neighbors.values())
            budget = max(0, self.params.per_requester_concurrency * 2 - in_flight)
            fresh = [
                seq
                for seq in range(self.highest_known, -1, -1)
                if self.ncp_policy.wants(seq)
                and seq not in self.have_map
                and not any(seq in l.outstanding for l in self.neighbors.values())
            ]
            # newest first: a relay is most useful near the live edge
            for seq in fresh[: budget]:
                out.append((float("inf"), 0, seq))
        return out

    def schedule_requests(self, now: float) -> list[tuple[str, int]]:
        """Assign a source neighbor to each unrequested in-window slot,
        earliest deadline first; slots whose deadline already passed are
        marked skipped instead of requested."""
        slots = self.wanted_slots(now)
        if not slots:
            return []
        slots = slots[:64]
        nbr_ids = sorted(self.neighbors)
        deadlines = [deadline for deadline, _, _ in slots]
        # the startup burst spreads across more distinct providers when the
        # per-link budget is tight; steady state uses the full budget
        cap = self.params.per_requester_concurrency
        if self.buffer is not None and not self.buffer.started:
            cap = min(cap, self.params.startup_per_link_cap)
        masks, delays, outstanding, caps = [], [], [], []
        for nid in nbr_ids:
            link = self.neighbors[nid]
            mask = 0
            for i, (_, _, seq) in enumerate(slots):
                if seq in link.have:
                    mask |= 1 << i
            masks.append(mask)
            delays.append(
                link.predicted_delay
                + link.queue_len_seen * self.params.queue_penalty_ms
            )
            outstanding.append(len(link.outstanding))
            caps.append(cap)
        assignment = _kernels.assign_sources(
            deadlines, masks, delays, outstanding, caps, now, self.params.queue_penalty_ms
        )
        requests: list[tuple[str, int]] = []
        for (deadline, _, seq), pick in zip(slots, assignment):
            if pick == -2:
                if self.buffer is not None and self.buffer.started:
                    self.buffer.mark(seq, SKIPPED)
                continue
            if pick < 0:
                continue
            nid = nbr_ids[pick]
            self.neighbors[nid].outstanding[seq] = now
            if self.buffer is not None:
                self.buffer.mark(seq, REQUESTED)
            requests.append((nid, seq))
        return requests

    def expire_requests(self, now: float) -> list[tuple[str, int]]:
        """Give up on requests that outlived the timeout so the next
        scheduling pass can re-route them. Returns (neighbor, seq) pairs
        the caller cancels on the wire."""
        expired = []
        for nid, link in sorted(self.neighbors.items()):
            for seq, at in sorted(link.outstanding.items()):
                if now - at > self.params.request_timeout_ms:
                    expired.append((nid, seq))
        for nid, seq in expired:
            del self.neighbors[nid].outstanding[seq]
            if self.buffer is not None and self.buffer.state(seq) == REQUESTED:
                self.buffer.mark(seq, PENDING)
        return expired

    def maybe_reanchor(self) -> int:
        """Keep the pre-playback window from drifting hopelessly far
        behind the live edge.

        Generous hysteresis: a congested joiner may lag beyond one window
        while it finishes its startup run over well-replicated chunks;
        only a runaway gap forces the jump, and the jump lands in the
        oldest (best-supplied) part of the feasible window rather than at
        the scarce live edge."""
        if self.buffer is None or self.buffer.started:
            return 0
        buf = self.buffer
        if self.highest_known - buf.playout_point >= 2 * buf.window:
            target = max(
                buf.playout_point,
                self.highest_known - buf.window - buf.startup_threshold,
            )
            return buf.reanchor(target)
        return 0

    # -- receiving --------------------------------------------------------------

    def on_chunk_received(self, chunk: Chunk, frm: str, now: float):
        """Returns (credit event or None, playback started just now)."""
        link = self.neighbors.get(frm)
        solicited = False
        if link is not None and chunk.seq in link.outstanding:
            sent_at = link.outstanding.pop(chunk.seq)
            elapsed = max(now - sent_at, 1e-6)
            link.measured_throughput = chunk.size_bits / elapsed
            solicited = True
        if chunk.seq in self.have_map:
            return None, False  # duplicate: no state change, no double credit
        if not solicited:
            self.unsolicited += 1
        self.hold_chunk(chunk)
        self.chunks_downloaded += 1
        started_now = False
        if self.buffer is not None:
            if self.buffer.in_window(chunk.seq):
                self.buffer.mark(chunk.seq, RECEIVED)
            if self.buffer.should_start():
                self.buffer.begin_playback(now)
                self.playback_start_time = now
                started_now = True
        credit = (frm, self.params.chunk_price) if solicited else None
        return credit, started_now

    # -- playout -----------------------------------------------------------------

    def playout_tick(self, now: float):
        """Play or skip the chunk at the playout point; returns
        (seq, "played"|"miss", lag_ms or None)."""
        assert self.buffer is not None and self.buffer.started
        seq, state = self.buffer.advance()
        # a chunk that arrived while its slot was still outside the window
        # is held but never marked; possession decides, not slot state
        if state == RECEIVED or seq in self.have_map:
            chunk = self.chunks.get(seq)
            lag = now - chunk.created_at if chunk is not None else 0.0
            self.lag_samples.append(lag)
            self.played += 1
            return seq, "played", lag
        self.missed += 1
        return seq, "miss", None

    def drop_stale_chunks(self) -> None:
        """Forget chunk payload metadata far behind every useful horizon."""
        if self.buffer is None:
            return
        floor = self.buffer.playout_point - self.buffer.window
        if floor <= 0:
            return
        for seq in [s for s in self.chunks if s < floor]:
            del self.chunks[seq]


# ---------------------------------------------------------------------------
# neighbor selection


def select_neighbors(
    self_id: str,
    self_coord: DelayCoord,
    candidates: list[PeerRecord],
    peercaster_coord: DelayCoord,
    k_short: int,
    k_jump: int,
    rng: random.Random,
) -> list[NeighborLink]:
    """Short links to the nearest peers that are strictly closer to the
    peercaster, jump links sampled in proportion to their distance from
    us. Falls back to plain nearest peers when the closer set is thin."""
    if k_short < 1:
        raise ValueError("k_short must be >= 1")
    seen = {}
    for c in candidates:
        if c.peer_id != self_id:
            seen[c.peer_id] = c
    cands = [seen[pid] for pid in sorted(seen)]
    if not cands:
        return []
    d_self = distance(self_coord, peercaster_coord)
    closer = [c for c in cands if distance(c.coord, peercaster_coord) < d_self]

    shorts: list[PeerRecord] = []
    origin = next((c for c in closer if c.role == "peercaster"), None)
    if origin is not None:
        shorts.append(origin)
    for c in sorted(closer, key=lambda c: (distance(self_coord, c.coord), c.peer_id)):
        if len(shorts) >= k_short:
            break
        if c not in shorts:
            shorts.append(c)
    if len(shorts) < k_short:
        for c in sorted(cands, key=lambda c: (distance(self_coord, c.coord), c.peer_id)):
            if len(shorts) >= k_short:
                break
            if c not in shorts:
                shorts.append(c)

    jump_pool = [c for c in closer if c not in shorts]
    jumps: list[PeerRecord] = []
    for _ in range(min(k_jump, len(jump_pool))):
        weights = [max(distance(self_coord, c.coord), 1e-9) for c in jump_pool]
        total = sum(weights)
        pick = rng.uniform(0.0, total)
        acc = 0.0
        chosen = len(jump_pool) - 1
        for i, w in enumerate(weights):
            acc += w
            if pick <= acc:
                chosen = i
                break
        jumps.append(jump_pool.pop(chosen))

    links = [
        NeighborLink(c.peer_id, "short", distance(self_coord, c.coord))
        for c in shorts
    ]
    links.extend(
        NeighborLink(c.peer_id, "jump", distance(self_coord, c.coord)) for c in jumps
    )
    return links


def ncp_bootstrap_order(
    ncps: list[PeerRecord],
    peercaster_coord: DelayCoord,
    stagger_ms: float = 100.0,
    start_ms: float = 0.0,
) -> list[tuple[float, PeerRecord]]:
    """Join schedule: ascending distance from the peercaster, one joiner
    per stagger interval; equidistant peers fall back to id order."""
    ordered = sorted(
        ncps, key=lambda r: (distance(r.coord, peercaster_coord), r.peer_id)
    )
    return [(start_ms + i * stagger_ms, rec) for i, rec in enumerate(ordered)]


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class QoeMetrics:
    peer_id: str
    role: str
    startup_delay_ms: float | None
    startup_censored_at: float | None
    mean_lag_ms: float | None
    p95_lag_ms: float | None
    continuity: float | None
    played: int
    missed: int
    chunks_uploaded: int
    chunks_downloaded: int


def peer_metrics(peer: SwarmPeer, observation_end: float) -> QoeMetrics:
    startup = None
    censored = None
    if peer.role == "consumer":
        if peer.playback_start_time is not None and peer.join_request_time is not None:
            startup = peer.playback_start_time - peer.join_request_time
        elif peer.join_request_time is not None:
            censored = observation_end - peer.join_request_time
    lags = peer.lag_samples
    mean_lag = statistics.fmean(lags) if lags else None
    p95 = _percentile(lags, 0.95) if lags else None
    total_due = peer.played + peer.missed
    continuity = (peer.played / total_due) if total_due else None
    return QoeMetrics(
        peer_id=peer.peer_id,
        role=peer.role,
        startup_delay_ms=startup,
        startup_censored_at=censored,
        mean_lag_ms=mean_lag,
        p95_lag_ms=p95,
        continuity=continuity,
        played=peer.played,
        missed=peer.missed,
        chunks_uploaded=peer.chunks_uploaded,
        chunks_downloaded=peer.chunks_downloaded,
    )


def _percentile(values: list[float], q: float) -> float:
    ordered = sorted(values)
    if not ordered:
        raise ValueError("no samples")
    idx = min(len(ordered) - 1, max(0, math.ceil(q * len(ordered)) - 1))
    return ordered[idx]


def aggregate_metrics(per_peer: list[QoeMetrics]) -> dict[str, float | int]:
    """Swarm-level summary over consumers."""
    consumers = [m for m in per_peer if m.role == "consumer"]
    started = [m for m in consumers if m.startup_delay_ms is not None]
    lags = [m.mean_lag_ms for m in started if m.mean_lag_ms is not None]
    startups = [m.startup_delay_ms for m in started]
    conts = [m.continuity for m in consumers if m.continuity is not None]
    out: dict[str, float | int] = {
        "consumers": len(consumers),
        "started": len(started),
        "censored": len(consumers) - len(started),
    }
    if startups:
        out["mean_startup_ms"] = statistics.fmean(startups)
        out["median_startup_ms"] = statistics.median(startups)
        out["p95_startup_ms"] = _percentile(startups, 0.95)
    if lags:
        out["mean_lag_ms"] = statistics.fmean(lags)
        out["median_lag_ms"] = statistics.median(lags)
        out["p95_lag_ms"] = _percentile(lags, 0.95)
    if conts:
        out["mean_continuity"] = statistics.fmean(conts)
        out["min_continuity"] = min(conts)
    return out
