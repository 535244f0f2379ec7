"""Incentives: pseudonymous identities, local trust accounts, random-walk
advertisement, and max-flow trust shifting.

A balance "X owes Y" records contribution X received from Y and ought to
return. Chunk deliveries either redeem prior contribution of the sender
or create new debt at the receiver; shifting moves debt along a path so
a peer can spend credit earned elsewhere with a new provider. Balances
never go negative; shifts conserve every peer's net position.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class ShiftError(Exception):
    """A trust shift failed; carries the refusing hop when known."""

    def __init__(self, message: str, refusing_hop: str | None = None):
        super().__init__(message)
        self.refusing_hop = refusing_hop


# ---------------------------------------------------------------------------
# identities and signing


@dataclass(frozen=True)
class Pseudonym:
    """Public half of an identity: enough to verify signatures."""

    scheme: str
    public_bytes: bytes

    @property
    def nym_id(self) -> str:
        return hashlib.blake2b(self.public_bytes, digest_size=8).hexdigest()


class Identity:
    """Private half; sign() produces what the pseudonym verifies."""

    def __init__(self, scheme: str, private_bytes: bytes):
        self.scheme = scheme
        self._private = private_bytes
        if scheme == "ed25519":
            self._key = Ed25519PrivateKey.from_private_bytes(private_bytes)
            pub = self._key.public_key().public_bytes_raw()
        elif scheme == "keyed-hash":
            # simulation stand-in: the "public key" embeds the secret, so
            # only simulated actors that never peek inside stay honest;
            # real deployments use ed25519
            pub = private_bytes
        else:
            raise ValueError(f"unknown signature scheme {scheme!r}")
        self.pseudonym = Pseudonym(scheme, pub)

    def sign(self, payload: bytes) -> bytes:
        if self.scheme == "ed25519":
            return self._key.sign(payload)
        return hmac.new(self._private, payload, hashlib.blake2b).digest()


def new_identity(scheme: str = "ed25519", rng: random.Random | None = None) -> Identity:
    if scheme == "ed25519":
        if rng is None:
            return Identity(scheme, Ed25519PrivateKey.generate().private_bytes_raw())
        return Identity(scheme, rng.randbytes(32))
    if scheme == "keyed-hash":
        return Identity(scheme, (rng or random).randbytes(32))
    raise ValueError(f"unknown signature scheme {scheme!r}")


def sign_message(identity: Identity, payload: bytes) -> tuple[bytes, bytes]:
    """Returns (payload, signature)."""
    return payload, identity.sign(payload)


def verify_message(pseudonym: Pseudonym, payload: bytes, signature: bytes) -> bool:
    if pseudonym.scheme == "ed25519":
        try:
            Ed25519PublicKey.from_public_bytes(pseudonym.public_bytes).verify(
                signature, payload
            )
            return True
        except InvalidSignature:
            return False
    if pseudonym.scheme == "keyed-hash":
        want = hmac.new(pseudonym.public_bytes, payload, hashlib.blake2b).digest()
        return hmac.compare_digest(want, signature)
    return False


# ---------------------------------------------------------------------------
# trust accounts


class TrustBook:
    """Directed non-negative balances: balance(debtor, creditor) is what
    the debtor owes the creditor. Used both for a peer's mirrored local
    accounts and for the simulator's ground-truth ledger."""

    def __init__(self) -> None:
        self._balances: dict[tuple[str, str], float] = {}
        self._updated: dict[tuple[str, str], float] = {}

    def get(self, debtor: str, creditor: str) -> float:
        return self._balances.get((debtor, creditor), 0.0)

    def set(self, debtor: str, creditor: str, amount: float, now: float = 0.0) -> None:
        if amount < 0:
            raise ValueError("balances cannot go negative")
        if amount == 0:
            self._balances.pop((debtor, creditor), None)
        else:
            self._balances[(debtor, creditor)] = amount
        self._updated[(debtor, creditor)] = now

    def add(self, debtor: str, creditor: str, amount: float, now: float = 0.0) -> None:
        self.set(debtor, creditor, self.get(debtor, creditor) + amount, now)

    def sub(self, debtor: str, creditor: str, amount: float, now: float = 0.0) -> None:
        bal = self.get(debtor, creditor)
        if bal < amount:
            raise ValueError(
                f"balance {bal} of ({debtor} owes {creditor}) cannot cover {amount}"
            )
        self.set(debtor, creditor, bal - amount, now)

    def updated_at(self, debtor: str, creditor: str) -> float:
        return self._updated.get((debtor, creditor), 0.0)

    def edges(self) -> Iterable[tuple[str, str, float]]:
        for (debtor, creditor), bal in sorted(self._balances.items()):
            yield debtor, creditor, bal

    def net_position(self, peer: str) -> float:
        owed_to = sum(b for (d, c), b in self._balances.items() if c == peer)
        owes = sum(b for (d, c), b in self._balances.items() if d == peer)
        return owed_to - owes

    def copy(self) -> "TrustBook":
        out = TrustBook()
        out._balances = dict(self._balances)
        out._updated = dict(self._updated)
        return out


def credit_contribution(
    book: TrustBook, receiver: str, sender: str, price: float, now: float = 0.0
) -> None:
    """Apply one chunk delivery: redeem the sender's prior debt to the
    receiver when it covers the price, otherwise record new receiver debt."""
    if price < 0:
        raise ValueError("price must be >= 0")
    if book.get(sender, receiver) >= price:
        book.sub(sender, receiver, price, now)
    else:
        book.add(receiver, sender, price, now)


def ledger_csv(book: TrustBook) -> str:
    """Dump format: owner, counterparty, balance, updated_at."""
    lines = ["owner,counterparty,balance,updated_at"]
    for debtor, creditor, balance in book.edges():
        lines.append(
            f"{debtor},{creditor},{balance:.3f},{book.updated_at(debtor, creditor):.3f}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class AltruismBudget:
    """Per-stranger free allowance so the economy can bootstrap from
    all-zero balances; refreshes every interval."""

    budget: float = 4.0
    interval_ms: float = 10_000.0
    _spent: dict[str, tuple[float, float]] = field(default_factory=dict)

    def try_spend(self, requester: str, price: float, now: float) -> bool:
        start, used = self._spent.get(requester, (now, 0.0))
        if now - start >= self.interval_ms:
            start, used = now, 0.0
        if used + price > self.budget:
            self._spent[requester] = (start, used)
            return False
        self._spent[requester] = (start, used + price)
        return True


def authorize_service(
    book: TrustBook,
    provider: str,
    requester: str,
    price: float,
    altruism: AltruismBudget | None = None,
    now: float = 0.0,
) -> bool:
    """Allow iff the provider owes the requester at least the price, or
    the stranger allowance still covers it."""
    if book.get(provider, requester) >= price:
        return True
    if altruism is not None:
        return altruism.try_spend(requester, price, now)
    return False


# ---------------------------------------------------------------------------
# advertisement walks and trust views


@dataclass(frozen=True)
class TrustAdvertisement:
    advertiser: str
    entries: tuple[tuple[str, float], ...]
    issued_at: float
    visited: tuple[str, ...] = ()
    ttl: int = 6

    def payload(self) -> bytes:
        body = ";".join(f"{cp}={bal:.6f}" for cp, bal in self.entries)
        return f"{self.advertiser}|{self.issued_at:.3f}|{body}".encode()


def make_advertisement(book: TrustBook, owner: str, now: float, ttl: int) -> TrustAdvertisement:
    entries = tuple(
        (creditor, bal) for debtor, creditor, bal in book.edges() if debtor == owner
    )
    return TrustAdvertisement(owner, entries, now, visited=(), ttl=ttl)


def pick_walk_next(
    balances: Mapping[str, float],
    visited: Iterable[str],
    rng: random.Random,
) -> str | None:
    """Choose the next hop: probability proportional to the forwarder's
    account balance about each non-visited candidate; None when no
    candidate has positive balance."""
    seen = set(visited)
    candidates = [(peer, bal) for peer, bal in sorted(balances.items())
                  if bal > 0 and peer not in seen]
    if not candidates:
        return None
    total = sum(bal for _, bal in candidates)
    pick = rng.uniform(0.0, total)
    acc = 0.0
    for peer, bal in candidates:
        acc += bal
        if pick <= acc:
            return peer
    return candidates[-1][0]


def advertisement_walk(
    origin: str,
    book: TrustBook,
    balances_of: Callable[[str], Mapping[str, float]],
    ttl: int,
    now: float,
    rng: random.Random,
    on_receive: Callable[[str, TrustAdvertisement], None],
) -> list[str]:
    """Run one truncated self-avoiding walk synchronously; returns the
    peers that received the advertisement, in order."""
    if ttl < 1:
        raise ValueError("ttl must be >= 1")
    ad = make_advertisement(book, origin, now, ttl)
    trace: list[str] = []
    holder = origin
    visited = [origin]
    remaining = ttl
    while remaining > 0:
        nxt = pick_walk_next(balances_of(holder), visited, rng)
        if nxt is None:
            break
        ad = TrustAdvertisement(
            ad.advertiser, ad.entries, ad.issued_at, tuple(visited), remaining - 1
        )
        on_receive(nxt, ad)
        trace.append(nxt)
        visited.append(nxt)
        holder = nxt
        remaining -= 1
    return trace


class TrustView:
    """A peer's local picture of the trust network, built from received
    advertisements plus its own direct accounts."""

    def __init__(self) -> None:
        self._edges: dict[tuple[str, str], tuple[float, float]] = {}

    def record(self, advertiser: str, entries: Iterable[tuple[str, float]],
               seen_at: float) -> None:
        stale = [key for key, (_, at) in self._edges.items()
                 if key[0] == advertiser and at < seen_at]
        for key in stale:
            del self._edges[key]
        for counterparty, balance in entries:
            key = (advertiser, counterparty)
            _, prev_at = self._edges.get(key, (0.0, -1.0))
            if seen_at >= prev_at:
                self._edges[key] = (balance, seen_at)

    def record_advertisement(self, ad: TrustAdvertisement) -> None:
        self.record(ad.advertiser, ad.entries, ad.issued_at)

    def capacities(self, now: float, horizon_ms: float) -> dict[tuple[str, str], float]:
        return {
            key: bal
            for key, (bal, at) in self._edges.items()
            if bal > 0 and now - at <= horizon_ms
        }


def build_trust_view(
    ads: Iterable[TrustAdvertisement],
    staleness_horizon_ms: float,
    now: float,
) -> TrustView:
    view = TrustView()
    for ad in ads:
        if now - ad.issued_at <= staleness_horizon_ms:
            view.record_advertisement(ad)
    return view


# ---------------------------------------------------------------------------
# max flow and shifting


def max_flow(capacities: Mapping[tuple[str, str], float], source: str, sink: str) -> float:
    flow_value, _ = max_flow_with_assignment(capacities, source, sink)
    return flow_value


def max_flow_with_assignment(
    capacities: Mapping[tuple[str, str], float], source: str, sink: str
) -> tuple[float, dict[tuple[str, str], float]]:
    """Dinic's algorithm; exact for the integer-valued balances used here.
    Returns (flow value, per-edge flow)."""
    if source == sink:
        return 0.0, {}
    nodes = {source, sink}
    for u, v in capacities:
        nodes.add(u)
        nodes.add(v)
    adj: dict[str, list[list]] = {n: [] for n in nodes}
    # edge record: [to, capacity, index of reverse edge in adj[to]]
    for (u, v), cap in sorted(capacities.items()):
        if cap <= 0 or u == v:
            continue
        adj[u].append([v, float(cap), len(adj[v])])
        adj[v].append([u, 0.0, len(adj[u]) - 1])

    original = {
        (u, i): edge[1] for u in sorted(adj) for i, edge in enumerate(adj[u])
    }

    def bfs_levels() -> dict[str, int] | None:
        levels = {source: 0}
        frontier = [source]
        while frontier:
            nxt = []
            for u in frontier:
                for v, cap, _ in adj[u]:
                    if cap > 1e-12 and v not in levels:
                        levels[v] = levels[u] + 1
                        nxt.append(v)
            frontier = nxt
        return levels if sink in levels else None

    def dfs(u: str, limit: float, levels, iters) -> float:
        if u == sink:
            return limit
        while iters[u] < len(adj[u]):
            edge = adj[u][iters[u]]
            v, cap, rev = edge
            if cap > 1e-12 and levels.get(v, -1) == levels[u] + 1:
                pushed = dfs(v, min(limit, cap), levels, iters)
                if pushed > 0:
                    edge[1] -= pushed
                    adj[v][rev][1] += pushed
                    return pushed
            iters[u] += 1
        return 0.0

    total = 0.0
    while True:
        levels = bfs_levels()
        if levels is None:
            break
        iters = {n: 0 for n in adj}
        while True:
            pushed = dfs(source, float("inf"), levels, iters)
            if pushed <= 0:
                break
            total += pushed

    flows: dict[tuple[str, str], float] = {}
    for u in sorted(adj):
        for i, (v, cap, _) in enumerate(adj[u]):
            used = original[(u, i)] - cap
            if used > 1e-12:
                flows[(u, v)] = flows.get((u, v), 0.0) + used
    # cancel opposing flow so the assignment is a clean forward flow
    for (u, v) in list(flows):
        if (v, u) in flows and flows.get((u, v), 0.0) > 0 and flows.get((v, u), 0.0) > 0:
            cancel = min(flows[(u, v)], flows[(v, u)])
            flows[(u, v)] -= cancel
            flows[(v, u)] -= cancel
    flows = {k: f for k, f in flows.items() if f > 1e-12}
    return total, flows


def max_shiftable(view: TrustView, beneficiary: str, provider_target: str,
                  now: float, horizon_ms: float = float("inf")) -> float:
    """Largest credit the beneficiary can cause to appear in the provider's
    account about it, per the local view: max flow provider -> beneficiary."""
    caps = view.capacities(now, horizon_ms)
    nodes = {n for edge in caps for n in edge}
    if beneficiary not in nodes or provider_target not in nodes:
        return 0.0
    return max_flow(caps, provider_target, beneficiary)


def decompose_flow(
    flows: Mapping[tuple[str, str], float], source: str, sink: str
) -> list[tuple[list[str], float]]:
    """Peel a flow assignment into simple source->sink paths."""
    remaining = {k: v for k, v in flows.items() if v > 1e-12}
    paths = []
    while True:
        path = [source]
        node = source
        seen = {source}
        while node != sink:
            nxt = None
            for (u, v), f in sorted(remaining.items()):
                if u == node and f > 1e-12 and v not in seen:
                    nxt = v
                    break
            if nxt is None:
                break
            path.append(nxt)
            seen.add(nxt)
            node = nxt
        if node != sink:
            break
        amount = min(remaining[(path[i], path[i + 1])] for i in range(len(path) - 1))
        for i in range(len(path) - 1):
            remaining[(path[i], path[i + 1])] -= amount
        remaining = {k: v for k, v in remaining.items() if v > 1e-12}
        paths.append((path, amount))
    return paths


class ReservationTable:
    """Holds placed during the reserve phase of a shift; expired holds
    release automatically so crashed routes self-heal."""

    def __init__(self) -> None:
        self._holds: dict[str, list[tuple[str, str, float, float]]] = {}

    def held(self, debtor: str, creditor: str, now: float) -> float:
        total = 0.0
        for holds in self._holds.values():
            for d, c, amount, expires in holds:
                if d == debtor and c == creditor and expires > now:
                    total += amount
        return total

    def available(self, book: TrustBook, debtor: str, creditor: str, now: float) -> float:
        return book.get(debtor, creditor) - self.held(debtor, creditor, now)

    def reserve(self, shift_id: str, book: TrustBook, debtor: str, creditor: str,
                amount: float, now: float, ttl_ms: float = 5000.0) -> bool:
        if self.available(book, debtor, creditor, now) < amount:
            return False
        self._holds.setdefault(shift_id, []).append(
            (debtor, creditor, amount, now + ttl_ms)
        )
        return True

    def release(self, shift_id: str) -> None:
        self._holds.pop(shift_id, None)


def shift_trust(
    book: TrustBook,
    route: list[str],
    amount: float,
    now: float = 0.0,
    reservations: ReservationTable | None = None,
    shift_id: str = "shift",
    refuse: Callable[[str], bool] | None = None,
) -> None:
    """Two-phase source-routed shift along route[0] -> ... -> route[-1].

    Reserve locks the amount on every hop edge (any shortfall or hop
    refusal aborts with nothing applied); commit then moves the amount
    off each hop edge and creates route[0]'s debt to route[-1]. Raises
    ShiftError naming the refusing hop on abort.
    """
    if amount < 0:
        raise ValueError("amount must be >= 0")
    if len(route) < 2 or len(set(route)) != len(route):
        raise ShiftError("route must be a simple path of at least two peers")
    if amount == 0:
        return
    table = reservations if reservations is not None else ReservationTable()
    try:
        for i in range(len(route) - 1):
            debtor, creditor = route[i], route[i + 1]
            if refuse is not None and refuse(creditor):
                raise ShiftError(f"hop {creditor} refused", refusing_hop=creditor)
            if not table.reserve(shift_id, book, debtor, creditor, amount, now):
                raise ShiftError(
                    f"insufficient balance at hop {debtor}->{creditor}",
                    refusing_hop=debtor,
                )
        table.release(shift_id)
        for i in range(len(route) - 1):
            book.sub(route[i], route[i + 1], amount)
        book.add(route[0], route[-1], amount)
    except ShiftError:
        table.release(shift_id)
        raise
