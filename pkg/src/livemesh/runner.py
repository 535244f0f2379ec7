"""Scenario execution: wires coordinates, the anycast table, trackers,
swarming, and the trust economy into one deterministic simulation.

Every peer is one actor that may wear several hats at once: anycast
table node, local tracker, chunk relay, and (for the origin) chunk
producer. All interaction between actors flows through the network
fabric as messages; the runner only centralizes bookkeeping that a
deployment would keep per process anyway (membership indexes, the
ground-truth ledger used by invariant checks, metrics).
"""

from __future__ import annotations

import hashlib
import json
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .config import ScenarioConfig, config_to_dict
from .coords import DelayCoord, EmbeddingParams, distance, embed_joiner
from .doat import DoatOverlay, LtRecord
from .netsim import (
    ChurnProcess,
    Engine,
    InvariantViolation,
    Network,
    PeerSpec,
    TraceLog,
    UploadScheduler,
    churn_stream,
    generate_topology,
)
from .sfc import CurveSpec, coord_to_key
from .swarm import (
    PENDING,
    REQUESTED,
    Chunk,
    NeighborLink,
    SwarmPeer,
    aggregate_metrics,
    ncp_bootstrap_order,
    ncp_chunk_policy,
    peer_metrics,
    select_neighbors,
)
from .tracker import KeyInterval, LocalTracker, PeerRecord, WrongAreaError
from .trust import (
    AltruismBudget,
    ledger_csv,
    ReservationTable,
    TrustBook,
    TrustView,
    authorize_service,
    decompose_flow,
    make_advertisement,
    max_flow_with_assignment,
    new_identity,
    pick_walk_next,
    sign_message,
    verify_message,
)

# ---------------------------------------------------------------------------
# wire messages


@dataclass(frozen=True)
class RegisterPeerMsg:
    record: PeerRecord
    msg_type: str = "REGISTER_PEER"

    def wire(self) -> str:
        return f"REGISTER_PEER {self.record.wire()}"


@dataclass(frozen=True)
class ListPeersMsg:
    anchor_x: float
    anchor_y: float
    msg_type: str = "LIST_PEERS"

    def wire(self) -> str:
        return f"LIST_PEERS {self.anchor_x:.3f} {self.anchor_y:.3f}"


@dataclass(frozen=True)
class PeerListMsg:
    records: tuple[PeerRecord, ...]
    area_start: int
    area_length: int
    registered: bool
    stream_head: int = -1  # the tracker's own live-edge estimate
    msg_type: str = "PEER_LIST"

    def wire(self) -> str:
        body = ";".join(r.peer_id for r in self.records)
        return (
            f"PEER_LIST {self.area_start}+{self.area_length} "
            f"{int(self.registered)} {self.stream_head} {body}"
        )


@dataclass(frozen=True)
class RedirectMsg:
    peer_key: int
    msg_type: str = "REGISTER_REDIRECT"

    def wire(self) -> str:
        return f"REGISTER_REDIRECT {self.peer_key}"


@dataclass(frozen=True)
class SplitNotifyMsg:
    new_lt: str
    area_start: int
    area_length: int
    msg_type: str = "SPLIT_NOTIFY"

    def wire(self) -> str:
        return f"SPLIT_NOTIFY {self.new_lt} {self.area_start}+{self.area_length}"


@dataclass(frozen=True)
class MergeNotifyMsg:
    surviving_lt: str
    msg_type: str = "MERGE_NOTIFY"

    def wire(self) -> str:
        return f"MERGE_NOTIFY {self.surviving_lt}"


@dataclass(frozen=True)
class HaveMapMsg:
    base: int
    mask: int
    head: int
    queue_len: int
    msg_type: str = "HAVE_MAP"

    def wire(self) -> str:
        return f"HAVE_MAP {self.base} {self.mask:x} {self.head} {self.queue_len}"


@dataclass(frozen=True)
class ChunkRequestMsg:
    seq: int
    have_base: int
    have_mask: int
    head: int
    msg_type: str = "CHUNK_REQUEST"

    def wire(self) -> str:
        return f"CHUNK_REQUEST {self.seq} {self.have_base} {self.have_mask:x} {self.head}"


@dataclass(frozen=True)
class ChunkDataMsg:
    chunk: Chunk
    have_base: int
    have_mask: int
    head: int
    queue_len: int
    msg_type: str = "CHUNK_DATA"

    def wire(self) -> str:
        return (
            f"CHUNK_DATA {self.chunk.wire()} {self.have_base} "
            f"{self.have_mask:x} {self.head} {self.queue_len}"
        )


@dataclass(frozen=True)
class CancelMsg:
    seq: int
    msg_type: str = "CANCEL"

    def wire(self) -> str:
        return f"CANCEL {self.seq}"


@dataclass(frozen=True)
class DeliveryReceiptMsg:
    """Co-signed record of one delivery. It names the settlement branch
    (redeem prior sender debt vs. record new receiver debt) so both
    mirrored ledgers apply the identical change."""

    stream_id: str
    seq: int
    sender: str
    receiver: str
    price: float
    redeem: bool
    signature: bytes
    msg_type: str = "DELIVERY_RECEIPT"

    def payload(self) -> bytes:
        return (
            f"{self.stream_id}|{self.seq}|{self.sender}|"
            f"{self.receiver}|{self.price:.6f}|{int(self.redeem)}"
        ).encode()

    def wire(self) -> str:
        return (
            f"DELIVERY_RECEIPT {self.stream_id} {self.seq} {self.sender} "
            f"{self.receiver} {self.price:.3f} {int(self.redeem)} "
            f"{self.signature.hex()[:16]}"
        )


@dataclass(frozen=True)
class TrustAdMsg:
    advertiser: str
    entries: tuple[tuple[str, float], ...]
    issued_at: float
    visited: tuple[str, ...]
    ttl: int
    signature: bytes
    msg_type: str = "TRUST_AD"

    def payload(self) -> bytes:
        body = ";".join(f"{cp}={bal:.6f}" for cp, bal in self.entries)
        return f"{self.advertiser}|{self.issued_at:.3f}|{body}".encode()

    def wire(self) -> str:
        body = ";".join(f"{cp}={bal:.3f}" for cp, bal in self.entries)
        return f"TRUST_AD {self.advertiser} {self.issued_at:.3f} {self.ttl} {body}"


@dataclass(frozen=True)
class ShiftMsg:
    phase: str  # RESERVE | COMMIT | ABORT
    shift_id: str
    route: tuple[str, ...]
    amount: float
    hop_index: int

    @property
    def msg_type(self) -> str:
        return f"SHIFT_{self.phase}"

    def wire(self) -> str:
        return (
            f"SHIFT_{self.phase} {self.shift_id} {'>'.join(self.route)} "
            f"{self.amount:.3f} {self.hop_index}"
        )


@dataclass(frozen=True)
class PathProbeMsg:
    kind: str  # FIND_NODE | QUERY_LT | REGISTER_LT
    body: str

    @property
    def msg_type(self) -> str:
        return self.kind

    def wire(self) -> str:
        return f"{self.kind} {self.body}"


def have_summary(peer: SwarmPeer) -> tuple[int, int, int]:
    """(base, 64-bit mask, head) snapshot of held chunks near the live edge."""
    head = peer.highest_known
    base = max(0, head - 63)
    mask = 0
    have = peer.have_map
    for i in range(max(0, head - base) + 1):
        if base + i in have:
            mask |= 1 << i
    return base, mask, head


# ---------------------------------------------------------------------------
# per-peer actor


class PeerActor:
    def __init__(self, runner: "StreamRunner", spec_peer: PeerSpec, arrive_ms: float):
        self.runner = runner
        self.id = spec_peer.peer_id
        self.true_pos = spec_peer.pos
        self.role = spec_peer.role
        self.capacity = spec_peer.upload_capacity
        self.arrive_ms = arrive_ms
        self.coord: DelayCoord | None = None
        self.swarm: SwarmPeer | None = None
        self.upload: UploadScheduler | None = None
        self.tracker: LocalTracker | None = None
        self.doat_contact: str | None = None
        self.lt_binding: str | None = None
        self.redirects = 0
        self.pending_candidates: list[PeerRecord] = []
        self.fetched_remote_list = False
        self.identity = new_identity(
            runner.cfg.trust.signature_scheme,
            rng=runner.rng_for(f"id:{spec_peer.peer_id}"),
        )
        self.book = TrustBook()
        self.view = TrustView()
        self.altruism = AltruismBudget(
            budget=runner.cfg.trust.altruism_budget,
            interval_ms=runner.cfg.trust.altruism_interval_ms,
        )
        self.reservations = ReservationTable()
        self.shift_block_until: dict[str, float] = {}
        self.sessions: dict[str, float] = {}  # peer -> last time we sent to them
        self.active_transfers: set[tuple[str, int]] = set()
        self.alive = True
        self.tick_count = 0
        self.last_request_pump = -1e12
        self.rng = runner.rng_for(f"actor:{spec_peer.peer_id}")

    # -- join flow (A1-A3) ---------------------------------------------------

    def start(self) -> None:
        self.runner.engine.schedule(self.arrive_ms, self.system_join)

    def system_join(self) -> None:
        """A1: position in delay space, then attach to the anycast table."""
        runner = self.runner
        now = runner.engine.now
        landmarks = runner.landmark_sample(self.id)
        if not landmarks:
            self.coord = DelayCoord(0.0, 0.0)  # reference-frame anchor
            runner.overlay.join(self.id, self.coord, None, now=now)
            self.after_doat_join()
            return
        params = EmbeddingParams(step_gain=0.25, rounds=8, neighbor_sample_size=16)
        lm_coords = {pid: runner.actors[pid].coord for pid in landmarks}
        self.coord = embed_joiner(
            DelayCoord(self.rng.uniform(-1.0, 1.0), self.rng.uniform(-1.0, 1.0)),
            lm_coords,
            lambda pid: runner.topology.true_delay(self.id, pid),
            params,
            self.rng,
        )
        # measurement rounds run landmarks in parallel; charge the wall time
        slowest = max(runner.topology.true_delay(self.id, pid) for pid in landmarks)
        embed_ms = params.rounds * (2.0 * slowest + runner.cfg.sim.per_hop_processing_ms)
        runner.engine.schedule(now + embed_ms, self.doat_attach)

    def doat_attach(self) -> None:
        """A2/A3: resolve the closest table node, then join the ring there."""
        runner = self.runner
        if not self.alive:
            return
        target, _, path = runner.overlay.find_closest_doat_node(
            self.coord, runner.bootstrap_node()
        )
        done = runner.charge_path(
            path, "FIND_NODE", f"{self.id} {self.coord.x:.3f} {self.coord.y:.3f}"
        )
        done += runner.net.control_latency(target, self.id)  # A3: the answer
        self.doat_contact = target
        done = runner.charge_path(
            [self.id, target], "JOIN", f"{self.id} key", start=done
        )
        runner.overlay.join(
            self.id, self.coord, bootstrap_id=target, now=max(done, runner.engine.now)
        )
        runner.engine.schedule(max(done, runner.engine.now), self.after_doat_join)

    def after_doat_join(self) -> None:
        runner = self.runner
        self.swarm = SwarmPeer(
            self.id,
            self.role,
            self.coord,
            self.capacity,
            runner.stream,
            runner.swarm_params,
            per_hop_processing=runner.cfg.sim.per_hop_processing_ms,
            ncp_policy=(
                ncp_chunk_policy(0.25, runner.next_ncp_offset())
                if self.role == "ncp"
                else None
            ),
        )
        # parallelism scales with capacity so one transfer runs at about
        # twice the stream rate: per-hop store-and-forward latency stays
        # near half a chunk interval without sacrificing throughput
        parallel = min(
            runner.cfg.swarm.max_parallel_uploads,
            max(1, int(self.capacity / (2.0 * runner.stream.rate_kbit_s))),
        )
        self.upload = UploadScheduler(
            runner.engine,
            self.id,
            self.capacity,
            max_parallel=parallel,
            max_queue=runner.cfg.swarm.upload_queue_limit,
        )
        if self.role == "peercaster":
            self.become_first_lt()
            runner.engine.schedule(
                max(runner.cfg.stream.start_ms, runner.engine.now), self.produce_chunk
            )
        else:
            self.swarm.join_request_time = runner.engine.now
            self.resolve_lt_and_register()
        self.start_maintenance()

    def become_first_lt(self) -> None:
        runner = self.runner
        self.tracker = LocalTracker(
            self.id,
            runner.stream.stream_id,
            KeyInterval(0, runner.curve.n_keys, runner.curve.n_keys),
            runner.curve,
            self.coord,
            load_high=runner.cfg.tracker.load_high,
            load_low=runner.cfg.tracker.load_low,
        )
        self.tracker.register_peer(self.peer_record())
        runner.lt_directory[self.id] = self.tracker
        self.register_lt_with_doat()

    def peer_record(self) -> PeerRecord:
        return PeerRecord(
            self.id, self.coord, self.capacity, self.role, self.runner.engine.now
        )

    def register_lt_with_doat(self) -> None:
        """A tracker advertises itself to the table node closest to it."""
        runner = self.runner
        if self.tracker is None:
            return
        target, _, path = runner.overlay.find_closest_doat_node(
            self.coord, runner.bootstrap_node()
        )
        record = LtRecord(
            lt_address=self.id,
            stream_id=runner.stream.stream_id,
            lt_key=coord_to_key(self.coord, runner.curve),
            lt_coord=self.coord,
            registered_at=runner.engine.now,
        )
        runner.charge_path(path, "REGISTER_LT", record.wire())
        runner.overlay.nodes[target].register_lt(record, runner.curve)
        runner.lt_doat_home[self.id] = target

    def resolve_lt_and_register(self) -> None:
        """B1/B2: anycast-resolve the nearest tracker, then register there."""
        runner = self.runner
        if not self.alive:
            return
        entry = self.doat_contact
        if entry is None or entry not in runner.overlay.nodes:
            entry = runner.bootstrap_node()
        record, hops, path = runner.overlay.query_closest_lt(
            entry, runner.stream.stream_id, self.coord
        )
        runner.stats["lt_queries"] += 1
        runner.stats_query_hops.append(hops)
        if record is None and entry != runner.bootstrap_node():
            # cold contact (fresh joiner): fall back to the rendezvous node
            # in the same pass rather than idling a retry interval
            record, hops2, path2 = runner.overlay.query_closest_lt(
                runner.bootstrap_node(), runner.stream.stream_id, self.coord
            )
            runner.stats["lt_queries"] += 1
            runner.stats_query_hops.append(hops2)
            path = path + path2
        if record is None:
            runner.stats["lt_query_misses"] += 1
            runner.engine.schedule_after(
                runner.cfg.join.lt_query_retry_ms, self.resolve_lt_and_register
            )
            return
        done = runner.charge_path(
            path, "QUERY_LT", f"{runner.stream.stream_id} by {self.id}"
        )
        done = runner.charge_path(  # the answer travels straight back (B4 arrow)
            [path[-1], self.id], "QUERY_RESULT", record.wire(), start=done
        )
        lt_address = record.lt_address
        runner.engine.schedule(
            max(done, runner.engine.now),
            lambda: runner.send(self.id, lt_address, RegisterPeerMsg(self.peer_record())),
        )

    # -- maintenance timers ----------------------------------------------------

    def start_maintenance(self) -> None:
        runner = self.runner
        self.schedule_periodic(runner.stream.chunk_duration_ms, self.tick)
        self.schedule_periodic(
            runner.cfg.tracker.refresh_interval_ms, self.refresh_registration
        )
        self.schedule_periodic(
            runner.cfg.trust.advertisement_period_ms, self.advertise_trust
        )

    def schedule_periodic(self, period: float, fn) -> None:
        delay = period * (0.5 + self.rng.random() * 0.5)
        self.runner.engine.schedule_after(delay, lambda: self._periodic(period, fn))

    def _periodic(self, period: float, fn) -> None:
        if not self.alive:
            return
        fn()
        self.runner.engine.schedule_after(period, lambda: self._periodic(period, fn))

    def tick(self) -> None:
        runner = self.runner
        now = runner.engine.now
        peer = self.swarm
        if peer is None:
            return
        self.tick_count += 1
        for nid, seq in peer.expire_requests(now):
            runner.send(self.id, nid, CancelMsg(seq))
        peer.maybe_reanchor()
        self.pump_playout(now)
        self.pump_requests()
        have_iv = runner.cfg.swarm.have_interval_ms
        for nid in sorted(peer.neighbors):
            if now - self.sessions.get(nid, -1e12) >= have_iv:
                self.send_have(nid)
        if self.tick_count % 8 == 0:
            peer.drop_stale_chunks()

    def pump_requests(self) -> None:
        runner = self.runner
        now = runner.engine.now
        peer = self.swarm
        if peer is None:
            return
        self.last_request_pump = now
        for nid, seq in peer.schedule_requests(now):
            base, mask, head = have_summary(peer)
            runner.send(self.id, nid, ChunkRequestMsg(seq, base, mask, head))
            self.sessions[nid] = now

    def pump_playout(self, now: float) -> None:
        peer = self.swarm
        if peer is None or peer.buffer is None or not peer.buffer.started:
            return
        cd = self.runner.stream.chunk_duration_ms
        while peer.buffer.deadline(peer.buffer.playout_point, cd) <= now:
            peer.playout_tick(peer.buffer.deadline(peer.buffer.playout_point, cd))

    def send_have(self, nid: str) -> None:
        base, mask, head = have_summary(self.swarm)
        self.runner.send(
            self.id, nid, HaveMapMsg(base, mask, head, self.upload.queue_depth)
        )
        self.sessions[nid] = self.runner.engine.now

    def refresh_registration(self) -> None:
        runner = self.runner
        if self.role != "peercaster" and self.lt_binding is not None:
            runner.send(self.id, self.lt_binding, RegisterPeerMsg(self.peer_record()))
        if self.tracker is not None:
            removed = self.tracker.expire_peers(
                runner.engine.now, runner.cfg.tracker.registration_timeout_ms
            )
            runner.stats["tracker_expired"] += removed
            self.register_lt_with_doat()
            self.maybe_merge()

    def advertise_trust(self) -> None:
        runner = self.runner
        ad = make_advertisement(
            self.book, self.id, runner.engine.now, runner.cfg.trust.walk_ttl
        )
        if not ad.entries:
            return
        _, sig = sign_message(self.identity, ad.payload())
        self.forward_trust_ad(
            TrustAdMsg(
                ad.advertiser, ad.entries, ad.issued_at,
                visited=(self.id,), ttl=ad.ttl, signature=sig,
            )
        )

    def forward_trust_ad(self, msg: TrustAdMsg) -> None:
        if msg.ttl <= 0:
            return
        balances = {
            creditor: bal
            for debtor, creditor, bal in self.book.edges()
            if debtor == self.id
        }
        nxt = pick_walk_next(balances, msg.visited, self.rng)
        if nxt is None or nxt not in self.runner.actors:
            return
        visited = msg.visited if self.id in msg.visited else msg.visited + (self.id,)
        self.runner.send(
            self.id,
            nxt,
            TrustAdMsg(
                msg.advertiser, msg.entries, msg.issued_at,
                visited=visited, ttl=msg.ttl - 1, signature=msg.signature,
            ),
        )

    # -- neighbor/session management ----------------------------------------------

    def adopt_peer_list(self, records: tuple[PeerRecord, ...]) -> None:
        runner = self.runner
        peer = self.swarm
        if peer is None or self.role == "peercaster" or not self.alive:
            return
        merged = {r.peer_id: r for r in self.pending_candidates}
        merged.update({r.peer_id: r for r in records if r.peer_id != self.id})
        self.pending_candidates = [merged[pid] for pid in sorted(merged)]
        pc_coord = runner.peercaster_coord
        d_self = distance(self.coord, pc_coord)
        closer = [
            c for c in self.pending_candidates
            if distance(c.coord, pc_coord) < d_self
        ]
        if len(closer) < runner.swarm_params.k_short and not self.fetched_remote_list:
            self.fetched_remote_list = True
            self.fetch_remote_candidates()
            return
        links = select_neighbors(
            self.id,
            self.coord,
            self.pending_candidates,
            pc_coord,
            runner.swarm_params.k_short,
            runner.swarm_params.k_jump,
            self.rng,
        )
        for link in links:
            if link.neighbor_id not in peer.neighbors:
                peer.neighbors[link.neighbor_id] = link
                self.send_have(link.neighbor_id)

    def fetch_remote_candidates(self) -> None:
        """Ask the tracker of the area between us and the origin for extra
        candidates pointing the right way (jump-link feedstock)."""
        runner = self.runner
        pc = runner.peercaster_coord
        anchor = DelayCoord((self.coord.x + pc.x) / 2.0, (self.coord.y + pc.y) / 2.0)
        entry = self.doat_contact
        if entry is None or entry not in runner.overlay.nodes:
            entry = runner.bootstrap_node()
        record, hops, path = runner.overlay.query_closest_lt(
            entry, runner.stream.stream_id, anchor
        )
        runner.stats["lt_queries"] += 1
        runner.stats_query_hops.append(hops)
        if record is None or record.lt_address == self.lt_binding:
            self.adopt_peer_list(())
            return
        done = runner.charge_path(
            path, "QUERY_LT", f"{runner.stream.stream_id} anchor {self.id}"
        )
        lt_address = record.lt_address
        runner.engine.schedule(
            max(done, runner.engine.now),
            lambda: runner.send(self.id, lt_address, ListPeersMsg(anchor.x, anchor.y)),
        )

    # -- chunk production (origin only) ---------------------------------------------

    def produce_chunk(self) -> None:
        runner = self.runner
        if not self.alive:
            return
        now = runner.engine.now
        seq = runner.next_seq
        runner.next_seq += 1
        chunk = runner.stream.make_chunk(seq, now)
        runner.chunk_catalog[seq] = chunk
        self.swarm.hold_chunk(chunk)
        runner.stats["chunks_produced"] += 1
        for nid in sorted(self.swarm.neighbors):
            self.send_have(nid)
        runner.engine.schedule_after(runner.stream.chunk_duration_ms, self.produce_chunk)

    # -- message dispatch ------------------------------------------------------------

    def handle(self, src: str, msg) -> None:
        if not self.alive:
            return
        kind = msg.msg_type
        if kind == "CHUNK_REQUEST":
            self.on_chunk_request(src, msg)
        elif kind == "CHUNK_DATA":
            self.on_chunk_data(src, msg)
        elif kind == "HAVE_MAP":
            self.note_have(src, msg.base, msg.mask, msg.head, msg.queue_len)
        elif kind == "CANCEL":
            self.on_cancel(src, msg)
        elif kind == "DELIVERY_RECEIPT":
            self.on_receipt(src, msg)
        elif kind == "TRUST_AD":
            self.on_trust_ad(src, msg)
        elif kind.startswith("SHIFT_"):
            self.on_shift(src, msg)
        elif kind == "REGISTER_PEER":
            self.on_register_peer(src, msg)
        elif kind == "LIST_PEERS":
            self.on_list_peers(src, msg)
        elif kind == "PEER_LIST":
            self.on_peer_list(src, msg)
        elif kind == "REGISTER_REDIRECT":
            self.on_redirect(src, msg)
        elif kind == "SPLIT_NOTIFY":
            self.lt_binding = msg.new_lt
        elif kind == "MERGE_NOTIFY":
            self.lt_binding = msg.surviving_lt
        elif kind == "ROUTING_UPDATE":
            node = self.runner.overlay.nodes.get(self.id)
            sender = self.runner.overlay.nodes.get(src)
            if node is not None and sender is not None:
                node.handle_routing_update(src, sender.key, msg, self.runner.curve)

    def ensure_session(self, src: str) -> NeighborLink | None:
        peer = self.swarm
        if peer is None:
            return None
        link = peer.neighbors.get(src)
        if link is None:
            other = self.runner.actors.get(src)
            if other is None or other.coord is None:
                return None
            link = NeighborLink(src, "inbound", distance(self.coord, other.coord))
            peer.neighbors[src] = link
        return link

    def note_have(self, src: str, base: int, mask: int, head: int, queue_len: int) -> None:
        link = self.ensure_session(src)
        if link is None:
            return
        floor = self.swarm.buffer.playout_point if self.swarm.buffer is not None else 0
        link.note_have([base + i for i in range(64) if (mask >> i) & 1], floor)
        if head > link.highest_advertised:
            link.highest_advertised = head
        link.queue_len_seen = queue_len
        self.swarm.note_stream_head(head)
        # fresh availability before playback: fetch right away instead of
        # waiting out the current scheduling tick
        buf = self.swarm.buffer
        if (
            buf is not None
            and not buf.started
            and self.runner.engine.now - self.last_request_pump >= 100.0
        ):
            self.pump_requests()

    # -- serving (C1/C2) -----------------------------------------------------------

    def on_chunk_request(self, src: str, msg: ChunkRequestMsg) -> None:
        runner = self.runner
        now = runner.engine.now
        self.note_have(src, msg.have_base, msg.have_mask, msg.head, 0)
        peer = self.swarm
        if peer is None or msg.seq not in peer.have_map:
            runner.send(self.id, src, CancelMsg(msg.seq))
            return
        if (src, msg.seq) in self.active_transfers:
            return
        price = runner.swarm_params.chunk_price
        if self.role != "peercaster" and not authorize_service(
            self.book, self.id, src, price, self.altruism, now
        ):
            runner.stats["service_denials"] += 1
            runner.send(self.id, src, CancelMsg(msg.seq))
            return
        chunk = runner.chunk_catalog.get(msg.seq)
        if chunk is None:
            runner.send(self.id, src, CancelMsg(msg.seq))
            return
        self.active_transfers.add((src, msg.seq))
        accepted = self.upload.submit(
            chunk.size_bits,
            lambda finish, s=src, c=chunk: self.complete_transfer(s, c),
        )
        if not accepted:
            self.active_transfers.discard((src, msg.seq))
            runner.send(self.id, src, CancelMsg(msg.seq))

    def complete_transfer(self, dst: str, chunk: Chunk) -> None:
        runner = self.runner
        self.active_transfers.discard((dst, chunk.seq))
        if not self.alive:
            return
        base, mask, head = have_summary(self.swarm)
        runner.send(
            self.id, dst, ChunkDataMsg(chunk, base, mask, head, self.upload.queue_depth)
        )
        self.sessions[dst] = runner.engine.now
        self.swarm.chunks_uploaded += 1
        runner.stats["chunks_sent"] += 1

    def on_chunk_data(self, src: str, msg: ChunkDataMsg) -> None:
        runner = self.runner
        now = runner.engine.now
        self.note_have(src, msg.have_base, msg.have_mask, msg.head, msg.queue_len)
        peer = self.swarm
        if peer is None:
            return
        credit, _started = peer.on_chunk_received(msg.chunk, src, now)
        runner.stats["chunks_delivered"] += 1
        if credit is not None:
            _, price = credit
            # redeem only what no in-flight shift reservation has locked
            available = runner.ground_ledger.get(src, self.id) - \
                runner.ground_reservations.held(src, self.id, now)
            redeem = available >= price
            receipt = DeliveryReceiptMsg(
                msg.chunk.stream_id, msg.chunk.seq, sender=src,
                receiver=self.id, price=price, redeem=redeem, signature=b"",
            )
            _, sig = sign_message(self.identity, receipt.payload())
            signed = DeliveryReceiptMsg(
                receipt.stream_id, receipt.seq, receipt.sender,
                receipt.receiver, receipt.price, receipt.redeem, sig,
            )
            runner.apply_receipt(self.book, self.id, src, price, redeem)
            runner.apply_receipt(runner.ground_ledger, self.id, src, price, redeem)
            runner.stats["receipts_issued"] += 1
            self.record_direct_view(src)
            runner.send(self.id, src, signed)
        # availability gossip: sessions lacking this chunk hear about it,
        # rate-limited to one bitmap per link per chunk interval so several
        # arrivals batch into a single update
        cd = runner.stream.chunk_duration_ms
        for nid in sorted(peer.neighbors):
            link = peer.neighbors[nid]
            if (
                nid != src
                and msg.chunk.seq not in link.have
                and now - self.sessions.get(nid, -1e12) >= cd
            ):
                self.send_have(nid)

    def on_cancel(self, src: str, msg: CancelMsg) -> None:
        peer = self.swarm
        if peer is None:
            return
        link = peer.neighbors.get(src)
        if link is None:
            return
        if msg.seq in link.outstanding:
            del link.outstanding[msg.seq]
            if peer.buffer is not None and peer.buffer.state(msg.seq) == REQUESTED:
                peer.buffer.mark(msg.seq, PENDING)
            if msg.seq in link.have:
                # the provider holds it and said no (queue full or service
                # denied): raise its cost estimate until the next piggyback
                # refreshes it, and work on credit in parallel
                link.queue_len_seen = min(link.queue_len_seen + 2, 64)
                self.try_shift_toward(src)

    # -- payment (C3) ------------------------------------------------------------

    def on_receipt(self, src: str, msg: DeliveryReceiptMsg) -> None:
        runner = self.runner
        if msg.sender != self.id or msg.receiver != src:
            return
        other = runner.actors.get(src)
        if other is None:
            return
        if not verify_message(other.identity.pseudonym, msg.payload(), msg.signature):
            runner.stats["bad_signatures"] += 1
            return
        runner.apply_receipt(self.book, msg.receiver, msg.sender, msg.price, msg.redeem)
        self.record_direct_view(src)

    def record_direct_view(self, counterparty: str) -> None:
        now = self.runner.engine.now
        self.view.record(
            self.id, [(counterparty, self.book.get(self.id, counterparty))], now
        )
        self.view.record(
            counterparty, [(self.id, self.book.get(counterparty, self.id))], now
        )

    def on_trust_ad(self, src: str, msg: TrustAdMsg) -> None:
        runner = self.runner
        advertiser = runner.actors.get(msg.advertiser)
        if advertiser is None:
            return
        if not verify_message(advertiser.identity.pseudonym, msg.payload(), msg.signature):
            runner.stats["bad_signatures"] += 1
            return
        if self.id in msg.visited:
            return  # loop: drop
        self.view.record(msg.advertiser, msg.entries, msg.issued_at)
        runner.stats["trust_ads_received"] += 1
        self.forward_trust_ad(msg)

    def try_shift_toward(self, provider: str) -> None:
        runner = self.runner
        now = runner.engine.now
        if self.shift_block_until.get(provider, -1.0) > now:
            return
        self.shift_block_until[provider] = now + runner.cfg.trust.shift_cooldown_ms
        caps = self.view.capacities(now, runner.cfg.trust.staleness_horizon_ms)
        nodes = {n for e in caps for n in e}
        if provider not in nodes or self.id not in nodes:
            return
        value, flows = max_flow_with_assignment(caps, provider, self.id)
        if value <= 0:
            return
        paths = decompose_flow(flows, provider, self.id)
        # source-routing long paths is fragile and the reserve/commit round
        # trip must finish well inside the reservation ttl: shortest first
        paths = sorted(
            (p for p in paths if 2 <= len(p[0]) <= 8), key=lambda p: len(p[0])
        )
        if not paths:
            return
        route, amount = paths[0]
        amount = min(amount, runner.swarm_params.chunk_price * 8)
        if amount <= 0:
            return
        shift_id = f"shift-{self.id}-{runner.next_shift_id()}"
        runner.stats["shifts_started"] += 1
        runner.send(
            self.id, route[0],
            ShiftMsg("RESERVE", shift_id, tuple(route), amount, hop_index=0),
        )

    def on_shift(self, src: str, msg: ShiftMsg) -> None:
        runner = self.runner
        now = runner.engine.now
        route = msg.route
        idx = msg.hop_index
        if idx >= len(route) or route[idx] != self.id:
            return
        if msg.phase == "RESERVE":
            if idx == len(route) - 1:
                runner.send(
                    self.id, route[idx - 1],
                    ShiftMsg("COMMIT", msg.shift_id, route, msg.amount, idx - 1),
                )
                return
            debtor, creditor = route[idx], route[idx + 1]
            # validate against both the local mirror and the signed-receipt
            # ground state so an in-flight redemption cannot over-commit
            hold_ttl = 30_000.0  # must outlive the commit round trip
            mirror_ok = self.reservations.reserve(
                msg.shift_id, self.book, debtor, creditor, msg.amount, now,
                ttl_ms=hold_ttl,
            )
            ground_ok = (
                runner.ground_ledger.get(debtor, creditor)
                - runner.ground_reservations.held(debtor, creditor, now)
            ) >= msg.amount
            if mirror_ok and ground_ok:
                runner.ground_reservations.reserve(
                    msg.shift_id, runner.ground_ledger, debtor, creditor,
                    msg.amount, now, ttl_ms=hold_ttl,
                )
                runner.send(
                    self.id, route[idx + 1],
                    ShiftMsg("RESERVE", msg.shift_id, route, msg.amount, idx + 1),
                )
            else:
                self.reservations.release(msg.shift_id)
                runner.stats["shifts_aborted"] += 1
                if idx > 0:
                    runner.send(
                        self.id, route[idx - 1],
                        ShiftMsg("ABORT", msg.shift_id, route, msg.amount, idx - 1),
                    )
        elif msg.phase == "COMMIT":
            self.reservations.release(msg.shift_id)
            runner.ground_reservations.release(msg.shift_id)
            runner.apply_shift_edge(route[idx], route[idx + 1], msg.amount)
            if idx == 0:
                runner.apply_shift_new_debt(route[0], route[-1], msg.amount)
                runner.stats["shifts_committed"] += 1
                runner.stats["trust_shifted_units"] += msg.amount
            else:
                runner.send(
                    self.id, route[idx - 1],
                    ShiftMsg("COMMIT", msg.shift_id, route, msg.amount, idx - 1),
                )
        elif msg.phase == "ABORT":
            self.reservations.release(msg.shift_id)
            runner.ground_reservations.release(msg.shift_id)
            if idx > 0:
                runner.send(
                    self.id, route[idx - 1],
                    ShiftMsg("ABORT", msg.shift_id, route, msg.amount, idx - 1),
                )

    # -- tracker duties (B3/B4) ------------------------------------------------------

    def on_register_peer(self, src: str, msg: RegisterPeerMsg) -> None:
        runner = self.runner
        registrant = msg.record.peer_id
        if self.tracker is None:
            runner.send(self.id, registrant, RedirectMsg(0))
            return
        try:
            records = self.tracker.register_peer(msg.record)
        except WrongAreaError as err:
            # the anycast answers with the nearest tracker, which after a
            # split may not cover the peer's key; hand the registration to
            # the tracker whose area does, and it replies to the peer
            owner = runner.covering_tracker(err.peer_key)
            if owner is not None and owner != self.id:
                runner.send(self.id, owner, msg)
            else:
                runner.send(self.id, registrant, RedirectMsg(err.peer_key))
            return
        runner.send(
            self.id, registrant,
            PeerListMsg(
                tuple(records), self.tracker.area.start,
                self.tracker.area.length, registered=True,
                stream_head=self.swarm.highest_known if self.swarm else -1,
            ),
        )
        if self.tracker.overloaded:
            self.split_tracker()

    def on_list_peers(self, src: str, msg: ListPeersMsg) -> None:
        runner = self.runner
        if self.tracker is None:
            runner.send(self.id, src, RedirectMsg(0))
            return
        runner.send(
            self.id, src,
            PeerListMsg(
                tuple(self.tracker.records()), self.tracker.area.start,
                self.tracker.area.length, registered=False,
                stream_head=self.swarm.highest_known if self.swarm else -1,
            ),
        )

    def on_peer_list(self, src: str, msg: PeerListMsg) -> None:
        if msg.registered:
            self.lt_binding = src
            self.redirects = 0
        if self.swarm is not None and msg.stream_head >= 0:
            self.swarm.note_stream_head(msg.stream_head)
        self.adopt_peer_list(msg.records)

    def on_redirect(self, src: str, msg: RedirectMsg) -> None:
        self.redirects += 1
        if self.redirects <= 8:
            self.resolve_lt_and_register()

    def split_tracker(self) -> None:
        runner = self.runner
        result = self.tracker.split_area()
        if result is None:
            return
        kept, new_lt = result
        promoted = runner.actors.get(new_lt.lt_id)
        if promoted is None or not promoted.alive or promoted.tracker is not None:
            kept.merge_areas(new_lt)  # cannot promote: re-absorb
            return
        runner.stats["tracker_splits"] += 1
        promoted.tracker = new_lt
        runner.lt_directory[new_lt.lt_id] = new_lt
        for rec in new_lt.records():
            if rec.peer_id != new_lt.lt_id:
                runner.send(
                    self.id, rec.peer_id,
                    SplitNotifyMsg(new_lt.lt_id, new_lt.area.start, new_lt.area.length),
                )
        promoted.register_lt_with_doat()
        self.register_lt_with_doat()

    def maybe_merge(self) -> None:
        runner = self.runner
        lt = self.tracker
        if lt is None or not lt.underloaded or len(runner.lt_directory) < 2:
            return
        for other_id in sorted(runner.lt_directory):
            sibling = runner.lt_directory[other_id]
            if sibling is lt or not sibling.area.adjacent_to(lt.area):
                continue
            if len(sibling.registry) + len(lt.registry) > sibling.load_high:
                continue
            survivor = runner.actors[sibling.lt_id]
            sibling.merge_areas(lt)
            runner.stats["tracker_merges"] += 1
            for rec in sibling.records():
                if rec.peer_id != sibling.lt_id:
                    runner.send(self.id, rec.peer_id, MergeNotifyMsg(sibling.lt_id))
            del runner.lt_directory[self.id]
            self.tracker = None
            home = runner.lt_doat_home.pop(self.id, None)
            if home is not None and home in runner.overlay.nodes:
                runner.overlay.nodes[home].unregister_lt(self.id, runner.stream.stream_id)
            survivor.register_lt_with_doat()
            return

    # -- departure ---------------------------------------------------------------

    def depart(self) -> None:
        runner = self.runner
        self.alive = False
        runner.net.unregister(self.id)
        if self.id in runner.overlay.nodes:
            runner.overlay.leave(self.id)
        if self.tracker is not None:
            runner.repair_dead_tracker(self)


# ---------------------------------------------------------------------------
# runner


@dataclass
class RunReport:
    config: dict
    aggregates: dict
    per_peer: list
    doat_stats: dict
    trust_stats: dict
    paths: dict = field(default_factory=dict)


class StreamRunner:
    def __init__(self, cfg: ScenarioConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.engine = Engine()
        self.topology = generate_topology(cfg.topology.kind, cfg.topology_params(), cfg.seed)
        trace = TraceLog() if cfg.sim.trace else None
        self.net = Network(
            self.engine,
            self.topology,
            per_hop_processing_ms=cfg.sim.per_hop_processing_ms,
            jitter_ms=cfg.sim.jitter_ms,
            trace=trace,
            jitter_seed=cfg.seed ^ 0x5EED,
        )
        b = self.topology.bounds
        self.curve = CurveSpec(
            order=cfg.doat.curve_order, min_x=b[0], min_y=b[1], max_x=b[2], max_y=b[3]
        )
        self.overlay = DoatOverlay(self.curve, cfg.doat_params())
        self.stream = cfg.stream_params()
        self.swarm_params = cfg.swarm_params()
        self.actors: dict[str, PeerActor] = {}
        self.lt_directory: dict[str, LocalTracker] = {}
        self.lt_doat_home: dict[str, str] = {}
        self.chunk_catalog: dict[int, Chunk] = {}
        self.ground_ledger = TrustBook()
        self.ground_reservations = ReservationTable()
        self.next_seq = 0
        self._ncp_offset = 0
        self._shift_counter = 0
        self.stats = {
            "lt_queries": 0,
            "lt_query_misses": 0,
            "service_denials": 0,
            "chunks_produced": 0,
            "chunks_sent": 0,
            "chunks_delivered": 0,
            "receipts_issued": 0,
            "bad_signatures": 0,
            "trust_ads_received": 0,
            "shifts_started": 0,
            "shifts_committed": 0,
            "shifts_aborted": 0,
            "trust_shifted_units": 0.0,
            "tracker_splits": 0,
            "tracker_merges": 0,
            "tracker_expired": 0,
        }
        self.stats_query_hops: list[int] = []
        self._joined_order: list[str] = []

    # -- deterministic helpers ----------------------------------------------------

    def rng_for(self, label: str) -> random.Random:
        digest = hashlib.blake2b(
            f"{self.cfg.seed}|{label}".encode(), digest_size=8
        ).digest()
        return random.Random(int.from_bytes(digest, "big"))

    def next_ncp_offset(self) -> int:
        self._ncp_offset += 1
        return self._ncp_offset - 1

    def next_shift_id(self) -> int:
        self._shift_counter += 1
        return self._shift_counter

    def bootstrap_node(self) -> str:
        return "peercaster"

    @property
    def peercaster_coord(self) -> DelayCoord:
        return self.actors["peercaster"].coord

    def landmark_sample(self, joiner: str, k: int = 16) -> list[str]:
        live = [
            pid
            for pid in self._joined_order
            if pid != joiner
            and pid in self.actors
            and self.actors[pid].alive
            and self.actors[pid].coord is not None
        ]
        if len(live) <= k:
            return live
        rng = self.rng_for(f"landmarks:{joiner}")
        return sorted(rng.sample(live, k))

    def send(self, src: str, dst: str, msg) -> None:
        if dst in self.actors and self.actors[dst].alive:
            self.net.send(src, dst, msg)

    def charge_path(
        self, path: list[str], kind: str, body: str, start: float | None = None
    ) -> float:
        """Account latency (and trace lines) for a multi-hop resolution whose
        outcome was computed against current state. Returns completion time."""
        t = self.engine.now if start is None else max(start, self.engine.now)
        for hop_src, hop_dst in zip(path, path[1:]):
            t += self.net.control_latency(hop_src, hop_dst)
            self.net.messages_sent += 1
            if self.net.trace is not None:
                msg = PathProbeMsg(kind, body)

                def log(at=t, s=hop_src, d=hop_dst, m=msg):
                    self.net.trace.record(at, s, d, m.msg_type, m.wire())

                self.engine.schedule(t, log)
        return t

    def advert_pump(self) -> None:
        now = self.engine.now
        for nid in sorted(self.overlay.nodes):
            node = self.overlay.nodes[nid]
            if not node.dirty:
                continue
            for dst, update in node.flush_adverts(now, self.curve):
                self.send(nid, dst, update)
        self.engine.schedule_after(self.cfg.doat.aggregation_interval_ms, self.advert_pump)

    def epoch_pump(self) -> None:
        self.overlay.rebuild_all_epochs(self.engine.now)
        self.engine.schedule_after(self.cfg.doat.rebuild_period_ms, self.epoch_pump)

    def apply_receipt(
        self, book: TrustBook, receiver: str, sender: str, price: float, redeem: bool
    ) -> None:
        """Settle one receipt on one ledger mirror per its named branch."""
        if redeem:
            book.sub(sender, receiver, min(price, book.get(sender, receiver)))
        else:
            book.add(receiver, sender, price)

    def apply_shift_edge(self, debtor: str, creditor: str, amount: float) -> None:
        """One committed hop: both bordering mirrors and the ground move."""
        self.ground_ledger.sub(debtor, creditor, amount)
        for pid in (debtor, creditor):
            actor = self.actors.get(pid)
            if actor is not None:
                have = actor.book.get(debtor, creditor)
                actor.book.sub(debtor, creditor, min(amount, have))

    def apply_shift_new_debt(self, debtor: str, creditor: str, amount: float) -> None:
        self.ground_ledger.add(debtor, creditor, amount)
        for pid in (debtor, creditor):
            actor = self.actors.get(pid)
            if actor is not None:
                actor.book.add(debtor, creditor, amount)

    def covering_tracker(self, key: int) -> str | None:
        for lt_id in sorted(self.lt_directory):
            if self.lt_directory[lt_id].area.contains(key):
                return lt_id
        return None

    def repair_dead_tracker(self, actor: PeerActor) -> None:
        """Hand a dead tracker's area to a ring-adjacent live tracker; its
        peers re-register through the refresh cycle."""
        dead = actor.tracker
        actor.tracker = None
        self.lt_directory.pop(actor.id, None)
        home = self.lt_doat_home.pop(actor.id, None)
        if home is not None and home in self.overlay.nodes:
            self.overlay.nodes[home].unregister_lt(actor.id, self.stream.stream_id)
        for other_id in sorted(self.lt_directory):
            other = self.lt_directory[other_id]
            if other.area.adjacent_to(dead.area):
                other.area = other.area.union_with(dead.area)
                return

    # -- assembly --------------------------------------------------------------------

    def schedule_joins(self) -> None:
        cfg = self.cfg
        by_id = {p.peer_id: p for p in self.topology.peers}
        pc = by_id.pop("peercaster")
        self.actors["peercaster"] = PeerActor(self, pc, arrive_ms=0.0)

        ncps = [p for p in by_id.values() if p.role == "ncp"]
        consumers = [p for p in by_id.values() if p.role == "consumer"]

        if ncps:
            records = [
                PeerRecord(p.peer_id, p.pos, p.upload_capacity, p.role)
                for p in sorted(ncps, key=lambda p: p.peer_id)
            ]
            if cfg.join.ncp_order == "delay":
                schedule = ncp_bootstrap_order(
                    records, pc.pos, cfg.join.ncp_stagger_ms, cfg.join.ncp_start_ms
                )
            else:
                rng = self.rng_for("ncp-order")
                shuffled = list(records)
                rng.shuffle(shuffled)
                schedule = [
                    (cfg.join.ncp_start_ms + i * cfg.join.ncp_stagger_ms, rec)
                    for i, rec in enumerate(shuffled)
                ]
            ncp_by_id = {p.peer_id: p for p in ncps}
            for at, rec in schedule:
                self.actors[rec.peer_id] = PeerActor(self, ncp_by_id[rec.peer_id], at)

        rng = self.rng_for("consumer-arrivals")
        for p in sorted(consumers, key=lambda p: p.peer_id):
            at = cfg.join.consumer_start_ms + rng.uniform(0.0, cfg.join.consumer_window_ms)
            self.actors[p.peer_id] = PeerActor(self, p, at)

        for actor in sorted(self.actors.values(), key=lambda a: (a.arrive_ms, a.id)):
            self._joined_order.append(actor.id)
            self.net.register(actor.id, actor.handle)
            actor.start()

        if cfg.churn.arrival_rate_per_s > 0:
            self.schedule_churn()

    def schedule_churn(self) -> None:
        cfg = self.cfg
        proc = ChurnProcess(
            cfg.churn.arrival_rate_per_s,
            lifetime=cfg.churn.lifetime,
            mean_lifetime_s=cfg.churn.mean_lifetime_s,
            pareto_shape=cfg.churn.pareto_shape,
            seed=cfg.seed ^ 0xC0FFEE,
        )
        start = cfg.join.consumer_start_ms
        events = churn_stream(proc, max(1.0, cfg.duration_ms - start))
        rng = self.rng_for("churn-peers")
        b = self.topology.bounds
        for t, kind, idx in events:
            pid = f"x{idx:04d}"
            if kind == "join":
                pos = DelayCoord(
                    rng.uniform(b[0] * 0.7, b[2] * 0.7),
                    rng.uniform(b[1] * 0.7, b[3] * 0.7),
                )
                spec = PeerSpec(pid, pos, cfg.topology.consumer_capacity, "consumer")
                self.topology.peers.append(spec)
                self.topology._by_id[pid] = spec
                actor = PeerActor(self, spec, arrive_ms=start + t)
                self.actors[pid] = actor
                self._joined_order.append(pid)
                self.net.register(pid, actor.handle)
                actor.start()
            else:
                def leave(pid=pid):
                    actor = self.actors.get(pid)
                    if actor is not None and actor.alive:
                        actor.depart()

                self.engine.schedule(start + t, leave)

    # -- execution ----------------------------------------------------------------------

    def run(self) -> "RunReport":
        cfg = self.cfg
        self.schedule_joins()
        self.engine.schedule_after(cfg.doat.aggregation_interval_ms, self.advert_pump)
        self.engine.schedule(cfg.doat.rebuild_period_ms, self.epoch_pump)
        self.engine.run_until(cfg.duration_ms)
        self.check_conservation()
        return self.build_report()

    def check_conservation(self) -> None:
        if self.stats["chunks_delivered"] > self.stats["chunks_sent"]:
            raise InvariantViolation("more chunks delivered than sent")
        if self.stats["receipts_issued"] > self.stats["chunks_delivered"]:
            raise InvariantViolation("more receipts than deliveries")

    def build_report(self) -> "RunReport":
        end = self.engine.now
        per_peer = []
        for pid in sorted(self.actors):
            actor = self.actors[pid]
            if actor.swarm is None:
                continue
            per_peer.append((actor, peer_metrics(actor.swarm, end)))
        aggregates = aggregate_metrics([m for _, m in per_peer])
        hops = self.stats_query_hops
        doat_stats = {
            "nodes": len(self.overlay.nodes),
            "lt_queries": self.stats["lt_queries"],
            "lt_query_misses": self.stats["lt_query_misses"],
            "mean_query_hops": statistics.fmean(hops) if hops else 0.0,
            "max_query_hops": max(hops) if hops else 0,
            "trackers": len(self.lt_directory),
            "tracker_splits": self.stats["tracker_splits"],
            "tracker_merges": self.stats["tracker_merges"],
        }
        trust_stats = {
            key: self.stats[key]
            for key in (
                "service_denials", "receipts_issued", "bad_signatures",
                "trust_ads_received", "shifts_started", "shifts_committed",
                "shifts_aborted", "trust_shifted_units",
            )
        }
        report = RunReport(
            config=config_to_dict(self.cfg),
            aggregates=aggregates,
            per_peer=[metrics_row(actor, m) for actor, m in per_peer],
            doat_stats=doat_stats,
            trust_stats=trust_stats,
        )
        if self.out_dir is not None:
            self.write_outputs(report)
        return report

    def write_outputs(self, report: "RunReport") -> None:
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        csv_path.write_text(metrics_csv(report.per_peer), encoding="utf-8")
        report.paths["metrics_csv"] = str(csv_path)
        if self.net.trace is not None:
            trace_path = out / "trace.log"
            trace_path.write_text(self.net.trace.dump(), encoding="utf-8")
            report.paths["trace_log"] = str(trace_path)
        ledger_path = out / "ledger.csv"
        ledger_path.write_text(ledger_csv(self.ground_ledger), encoding="utf-8")
        report.paths["ledger_csv"] = str(ledger_path)
        payload = {
            "config": report.config,
            "aggregates": report.aggregates,
            "doat": report.doat_stats,
            "trust": report.trust_stats,
            "paths": report.paths,
        }
        report_path = out / "report.json"
        report_path.write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        report.paths["report_json"] = str(report_path)


CSV_COLUMNS = (
    "peer_id,role,coord_x,coord_y,startup_ms,startup_censored,mean_lag_ms,"
    "p95_lag_ms,continuity,chunks_uploaded,chunks_downloaded"
)


def metrics_row(actor: PeerActor, m) -> dict:
    return {
        "peer_id": m.peer_id,
        "role": m.role,
        "coord_x": actor.coord.x if actor.coord else 0.0,
        "coord_y": actor.coord.y if actor.coord else 0.0,
        "startup_ms": m.startup_delay_ms,
        "startup_censored": m.startup_censored_at,
        "mean_lag_ms": m.mean_lag_ms,
        "p95_lag_ms": m.p95_lag_ms,
        "continuity": m.continuity,
        "chunks_uploaded": m.chunks_uploaded,
        "chunks_downloaded": m.chunks_downloaded,
    }


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def metrics_csv(rows: list[dict]) -> str:
    lines = [CSV_COLUMNS]
    for row in rows:
        censored = row["startup_censored"]
        startup = row["startup_ms"] if row["startup_ms"] is not None else censored
        lines.append(
            ",".join(
                [
                    row["peer_id"],
                    row["role"],
                    f"{row['coord_x']:.3f}",
                    f"{row['coord_y']:.3f}",
                    _fmt(startup),
                    "1" if censored is not None else "0",
                    _fmt(row["mean_lag_ms"]),
                    _fmt(row["p95_lag_ms"]),
                    _fmt(row["continuity"]),
                    str(row["chunks_uploaded"]),
                    str(row["chunks_downloaded"]),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> RunReport:
    return StreamRunner(cfg, out_dir).run()
