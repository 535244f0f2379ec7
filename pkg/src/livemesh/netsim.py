"""Deterministic discrete-event engine, latency model, topology
generators, and churn processes.

A single logical clock drives everything; actors never see wall time.
Given one (scenario, seed) pair, every run dispatches the identical
event sequence, so trace logs and metrics are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .coords import DelayCoord, distance


class SimError(Exception):
    pass


class InvariantViolation(Exception):
    """A runtime invariant of the simulation was broken."""


class Message(Protocol):
    @property
    def msg_type(self) -> str: ...

    def wire(self) -> str: ...


def payload_digest(wire: str) -> str:
    return hashlib.blake2b(wire.encode("utf-8"), digest_size=6).hexdigest()


class Engine:
    """Event queue with a (fire_time, schedule order) total order."""

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self._cancelled: set[int] = set()

    def schedule(self, fire_time: float, callback: Callable[[], None]) -> int:
        if fire_time < self.now:
            raise SimError(f"event at {fire_time} scheduled in the past (now {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, (fire_time, self._seq, callback))
        return self._seq

    def schedule_after(self, delay: float, callback: Callable[[], None]) -> int:
        return self.schedule(self.now + delay, callback)

    def cancel(self, ticket: int) -> None:
        self._cancelled.add(ticket)

    def run_until(self, t_end: float) -> int:
        count = 0
        while self._heap and self._heap[0][0] <= t_end:
            fire_time, seq, callback = heapq.heappop(self._heap)
            if seq in self._cancelled:
                self._cancelled.discard(seq)
                continue
            self.now = fire_time
            callback()
            count += 1
        self.now = max(self.now, t_end)
        return count

    def pending(self) -> int:
        return len(self._heap) - len(self._cancelled)


def message_latency(
    src: DelayCoord,
    dst: DelayCoord,
    size_bits: float,
    per_hop_processing_ms: float = 0.0,
    rate_kbit_s: float = float("inf"),
    jitter_ms: float = 0.0,
) -> float:
    """Propagation + sender processing + transmission + jitter, in ms.

    rate is in kbit/s, so size/rate lands directly in milliseconds.
    """
    transmission = size_bits / rate_kbit_s if size_bits else 0.0
    return distance(src, dst) + per_hop_processing_ms + transmission + jitter_ms


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class PeerSpec:
    peer_id: str
    pos: DelayCoord
    upload_capacity: float  # kbit/s
    role: str  # consumer | ncp | peercaster
    cluster: int = 0


@dataclass
class Topology:
    peers: list[PeerSpec]
    bounds: tuple[float, float, float, float]  # min_x, min_y, max_x, max_y
    noise_sigma: float = 0.0
    noise_seed: int = 0
    inter_cluster_penalty: float = 0.0
    _by_id: dict[str, PeerSpec] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {p.peer_id: p for p in self.peers}

    def peer(self, peer_id: str) -> PeerSpec:
        return self._by_id[peer_id]

    def _noise_factor(self, a: str, b: str) -> float:
        if self.noise_sigma <= 0:
            return 1.0
        lo, hi = sorted((a, b))
        digest = hashlib.blake2b(
            f"{self.noise_seed}|{lo}|{hi}".encode(), digest_size=8
        ).digest()
        rng = random.Random(int.from_bytes(digest, "big"))
        return math.exp(rng.gauss(0.0, self.noise_sigma))

    def true_delay(self, a: str, b: str) -> float:
        """Ground-truth one-way delay; symmetric and non-negative."""
        if a == b:
            return 0.0
        pa, pb = self._by_id[a], self._by_id[b]
        base = distance(pa.pos, pb.pos)
        if pa.cluster != pb.cluster:
            base += self.inter_cluster_penalty
        return base * self._noise_factor(a, b)


def generate_topology(kind: str, params: dict, seed: int) -> Topology:
    if kind == "uniform_rectangle":
        return _uniform_rectangle(params, seed)
    if kind == "clustered":
        return _clustered(params, seed)
    raise ValueError(f"unknown topology kind {kind!r}")


def _uniform_rectangle(params: dict, seed: int) -> Topology:
    n_consumers = int(params.get("consumers", 0))
    n_ncps = int(params.get("ncps", 0))
    max_delay = float(params.get("max_delay_ms", 140.0))
    if n_consumers < 0 or n_ncps < 0 or max_delay <= 0:
        raise ValueError("counts must be >= 0 and max_delay_ms > 0")
    consumer_cap = float(params.get("consumer_capacity", 280.0))
    ncp_cap = float(params.get("ncp_capacity", 1400.0))
    pc_cap = float(params.get("peercaster_capacity", 3500.0))
    rng = random.Random(seed)
    half = max_delay / math.sqrt(2.0)

    offsets = [
        (rng.uniform(-half, half), rng.uniform(-half, half))
        for _ in range(n_consumers + n_ncps)
    ]
    # rescale so the farthest peer sits exactly at the configured bound
    if offsets:
        top = max(math.hypot(x, y) for x, y in offsets)
        if top > 0:
            scale = max_delay / top
            offsets = [(x * scale, y * scale) for x, y in offsets]

    peers = [PeerSpec("peercaster", DelayCoord(0.0, 0.0), pc_cap, "peercaster")]
    for i in range(n_ncps):
        x, y = offsets[i]
        peers.append(PeerSpec(f"n{i:04d}", DelayCoord(x, y), ncp_cap, "ncp"))
    for i in range(n_consumers):
        x, y = offsets[n_ncps + i]
        peers.append(PeerSpec(f"c{i:04d}", DelayCoord(x, y), consumer_cap, "consumer"))

    pad = 1.0001  # clamp-free bounds for every generated point
    bound = max_delay * pad
    return Topology(
        peers=peers,
        bounds=(-bound, -bound, bound, bound),
        noise_sigma=float(params.get("noise_sigma", 0.0)),
        noise_seed=seed,
    )


def _clustered(params: dict, seed: int) -> Topology:
    n_clusters = int(params.get("clusters", 2))
    per_cluster = int(params.get("peers_per_cluster", 10))
    spread = float(params.get("spread_ms", 5.0))
    penalty = float(params.get("inter_cluster_penalty_ms", 80.0))
    extent = float(params.get("extent_ms", 100.0))
    cap = float(params.get("consumer_capacity", 280.0))
    pc_cap = float(params.get("peercaster_capacity", 3500.0))
    if n_clusters < 1 or per_cluster < 0 or spread <= 0:
        raise ValueError("clusters >= 1, peers_per_cluster >= 0, spread_ms > 0")
    rng = random.Random(seed)
    centers = [
        (rng.uniform(0, extent), rng.uniform(0, extent)) for _ in range(n_clusters)
    ]
    peers = [PeerSpec("peercaster", DelayCoord(*centers[0]), pc_cap, "peercaster", 0)]
    idx = 0
    for c, (cx, cy) in enumerate(centers):
        for _ in range(per_cluster):
            # uniform in a disk keeps every intra-cluster pair within 2*spread
            r = spread * math.sqrt(rng.random())
            theta = rng.uniform(0, 2 * math.pi)
            peers.append(
                PeerSpec(
                    f"c{idx:04d}",
                    DelayCoord(cx + r * math.cos(theta), cy + r * math.sin(theta)),
                    cap,
                    "consumer",
                    c,
                )
            )
            idx += 1
    margin = spread * 2
    return Topology(
        peers=peers,
        bounds=(-margin, -margin, extent + margin, extent + margin),
        noise_sigma=float(params.get("noise_sigma", 0.0)),
        noise_seed=seed,
        inter_cluster_penalty=penalty,
    )


# ---------------------------------------------------------------------------
# churn


@dataclass(frozen=True)
class ChurnProcess:
    arrival_rate_per_s: float
    lifetime: str = "exponential"  # or "pareto"
    mean_lifetime_s: float = 300.0
    pareto_shape: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arrival_rate_per_s < 0:
            raise ValueError("arrival rate must be >= 0")
        if self.lifetime not in ("exponential", "pareto"):
            raise ValueError("lifetime must be exponential or pareto")


def churn_stream(process: ChurnProcess, horizon_ms: float) -> list[tuple[float, str, int]]:
    """Reproducible (time_ms, "join"|"leave", peer index) events."""
    if horizon_ms <= 0:
        raise ValueError("horizon must be > 0")
    if process.arrival_rate_per_s == 0:
        return []
    rng = random.Random(process.seed)
    events: list[tuple[float, str, int]] = []
    t = 0.0
    idx = 0
    rate_per_ms = process.arrival_rate_per_s / 1000.0
    while True:
        t += rng.expovariate(rate_per_ms)
        if t >= horizon_ms:
            break
        events.append((t, "join", idx))
        if process.lifetime == "exponential":
            life_ms = rng.expovariate(1.0 / (process.mean_lifetime_s * 1000.0))
        else:
            # Pareto with given shape, scaled so the mean matches when it exists
            shape = process.pareto_shape
            scale = (
                process.mean_lifetime_s * 1000.0 * (shape - 1.0) / shape
                if shape > 1.0
                else process.mean_lifetime_s * 1000.0
            )
            life_ms = scale * (rng.random() ** (-1.0 / shape) - 1.0) + scale
        leave = t + life_ms
        if leave < horizon_ms:
            events.append((leave, "leave", idx))
        idx += 1
    events.sort(key=lambda e: (e[0], e[2], e[1]))
    return events


# ---------------------------------------------------------------------------
# trace log


class TraceLog:
    """Newline-delimited message trace with stable field order."""

    def __init__(self) -> None:
        self.lines: list[str] = []

    def record(self, time_ms: float, src: str, dst: str, msg_type: str, wire: str) -> None:
        self.lines.append(
            f"{time_ms:.3f},{src},{dst},{msg_type},{payload_digest(wire)}"
        )

    def dump(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")


# ---------------------------------------------------------------------------
# network fabric: control messages and capacity-shared chunk transfers


class Network:
    """Delivers actor messages over the topology's ground-truth delays."""

    def __init__(
        self,
        engine: Engine,
        topology: Topology,
        per_hop_processing_ms: float = 5.0,
        jitter_ms: float = 0.0,
        trace: TraceLog | None = None,
        jitter_seed: int = 0,
    ) -> None:
        self.engine = engine
        self.topology = topology
        self.per_hop_processing_ms = per_hop_processing_ms
        self.jitter_ms = jitter_ms
        self.trace = trace
        self._handlers: dict[str, Callable[[str, object], None]] = {}
        self._jitter_rng = random.Random(jitter_seed)
        self.messages_sent = 0

    def register(self, peer_id: str, handler: Callable[[str, object], None]) -> None:
        self._handlers[peer_id] = handler

    def unregister(self, peer_id: str) -> None:
        self._handlers.pop(peer_id, None)

    def control_latency(self, src: str, dst: str) -> float:
        jitter = self._jitter_rng.uniform(0, self.jitter_ms) if self.jitter_ms else 0.0
        return self.topology.true_delay(src, dst) + self.per_hop_processing_ms + jitter

    def send(self, src: str, dst: str, msg: Message) -> None:
        """Control-plane message: zero transmission time."""
        self.messages_sent += 1
        arrive = self.engine.now + self.control_latency(src, dst)

        def deliver() -> None:
            handler = self._handlers.get(dst)
            if handler is None:
                return  # receiver departed
            if self.trace is not None:
                self.trace.record(self.engine.now, src, dst, msg.msg_type, msg.wire())
            handler(src, msg)

        self.engine.schedule(arrive, deliver)


class UploadScheduler:
    """Processor-sharing model of one sender's upload link.

    Active transfers share the capacity equally; rates rebalance whenever
    a transfer starts or finishes, and completion events are recomputed
    from the bits still outstanding. Admission beyond the parallel limit
    queues FIFO.
    """

    def __init__(
        self,
        engine: Engine,
        sender_id: str,
        capacity_kbit_s: float,
        max_parallel: int = 4,
        max_queue: int = 32,
    ) -> None:
        if capacity_kbit_s <= 0:
            raise ValueError("upload capacity must be > 0")
        self.engine = engine
        self.sender_id = sender_id
        self.capacity = capacity_kbit_s
        self.max_parallel = max_parallel
        self.max_queue = max_queue
        self._active: dict[int, dict] = {}
        self._queue: list[tuple[float, Callable[[float], None]]] = []
        self._next_tid = 0
        self._version = 0

    @property
    def queue_depth(self) -> int:
        return len(self._active) + len(self._queue)

    def offered_load_ok(self) -> bool:
        return len(self._queue) < self.max_queue

    def submit(self, size_bits: float, on_complete: Callable[[float], None]) -> bool:
        """Queue one transfer; on_complete(finish_time) fires when the last
        bit has been transmitted. Returns False when the queue is full."""
        if not self.offered_load_ok():
            return False
        self._queue.append((size_bits, on_complete))
        self._try_start()
        return True

    def _try_start(self) -> None:
        started = False
        while self._queue and len(self._active) < self.max_parallel:
            size_bits, on_complete = self._queue.pop(0)
            self._next_tid += 1
            self._active[self._next_tid] = {
                "remaining": size_bits,
                "rate": 0.0,
                "updated": self.engine.now,
                "done": on_complete,
            }
            started = True
        if started:
            self._rebalance()

    def _settle(self, now: float) -> None:
        for tr in self._active.values():
            elapsed = now - tr["updated"]
            tr["remaining"] = max(0.0, tr["remaining"] - elapsed * tr["rate"])
            tr["updated"] = now

    def _rebalance(self) -> None:
        now = self.engine.now
        self._settle(now)
        n = len(self._active)
        if n == 0:
            return
        rate = self.capacity / n  # kbit/s == bits/ms
        total = 0.0
        for tr in self._active.values():
            tr["rate"] = rate
            total += rate
        if total > self.capacity * (1 + 1e-9):
            raise InvariantViolation(
                f"{self.sender_id}: outbound rate {total} exceeds capacity {self.capacity}"
            )
        self._version += 1
        version = self._version
        for tid, tr in sorted(self._active.items()):
            finish = now + tr["remaining"] / tr["rate"]
            self.engine.schedule(finish, self._completion(tid, version))

    def _completion(self, tid: int, version: int) -> Callable[[], None]:
        def fire() -> None:
            if version != self._version or tid not in self._active:
                return  # superseded by a later rebalance
            tr = self._active[tid]
            self._settle(self.engine.now)
            if tr["remaining"] > 1e-3:
                # clock-granularity rounding left a sliver of the payload;
                # finish it on a fresh event rather than dropping the chain
                self.engine.schedule(
                    self.engine.now + tr["remaining"] / tr["rate"],
                    self._completion(tid, version),
                )
                return
            del self._active[tid]
            tr["done"](self.engine.now)
            self._try_start()
            if self._active:
                self._rebalance()

        return fire

    @property
    def allocated_rate(self) -> float:
        return self.capacity / max(1, len(self._active))
