import math
import random

import pytest

from livemesh.bloom import BloomFilter, BloomParams, _bit_positions
from livemesh.coords import DelayCoord, distance
from livemesh.doat import DoatOverlay, DoatParams, JoinError, LtRecord, RoutingUpdate
from livemesh.sfc import CurveSpec, coord_to_key, cw_offset, key_to_coord, ring_distance


def make_overlay(order=6, interval=500.0):
    spec = CurveSpec(order=order, min_x=0.0, min_y=0.0, max_x=256.0, max_y=256.0)
    return DoatOverlay(spec, DoatParams(aggregation_interval_ms=interval))


def join_at_key(overlay, node_id, key, bootstrap=None, now=0.0):
    coord = key_to_coord(key, overlay.spec)
    return overlay.join(node_id, coord, bootstrap, now=now)


def record_for(overlay, node_id, stream_id, now=0.0):
    node = overlay.nodes[node_id]
    return LtRecord(
        lt_address=f"lt-of-{node_id}",
        stream_id=stream_id,
        lt_key=node.key,
        lt_coord=node.coord,
        registered_at=now,
    )


def check_table_invariant(overlay):
    """Every entry points to the nearest member at or beyond its target
    distance in its direction, for distances 2^0..K/2, both ways."""
    spec = overlay.spec
    n_keys = spec.n_keys
    positions = sorted((n.key, n.node_id) for n in overlay.nodes.values())
    for node in overlay.nodes.values():
        others = [(k, nid) for k, nid in positions if nid != node.node_id]
        if not others:
            assert node.entries == []
            continue
        by_dir = {}
        for e in node.entries:
            by_dir[(e.direction, e.target_distance)] = e
        d = 1
        while d <= n_keys // 2:
            for direction in ("cw", "ccw"):
                e = by_dir[(direction, d)]
                if direction == "cw":
                    target = (node.key + d) % n_keys
                    want = min(others, key=lambda p: (cw_offset(target, p[0], spec), p[1]))
                else:
                    target = (node.key - d) % n_keys
                    want = min(others, key=lambda p: (cw_offset(p[0], target, spec), p[1]))
                assert (e.neighbor_key, e.neighbor_id) == want, (
                    f"{node.node_id} {direction} d={d}: {e.neighbor_id} != {want[1]}"
                )
            d <<= 1


# ---------------------------------------------------------------------------
# membership and routing tables


def test_first_node_joins_alone():
    overlay = make_overlay()
    node = join_at_key(overlay, "a", 0)
    assert node.entries == []
    rec = record_for(overlay, "a", "s")
    node.register_lt(rec, overlay.spec)
    found, hops, _ = overlay.query_closest_lt("a", "s", node.coord)
    assert found == rec
    assert hops == 0


def test_second_node_all_entries_point_to_other():
    overlay = make_overlay()
    join_at_key(overlay, "a", 0)
    join_at_key(overlay, "b", 1000, bootstrap="a")
    for nid, other in (("a", "b"), ("b", "a")):
        entries = overlay.nodes[nid].entries
        assert len(entries) > 0
        assert all(e.neighbor_id == other for e in entries)


def test_join_requires_live_bootstrap():
    overlay = make_overlay()
    join_at_key(overlay, "a", 0)
    with pytest.raises(JoinError):
        join_at_key(overlay, "b", 5, bootstrap="ghost")
    with pytest.raises(JoinError):
        join_at_key(overlay, "c", 6, bootstrap=None)


def test_evenly_spaced_fingers_land_exactly():
    # 64 nodes spaced 64 keys apart on K=4096: fingers at or above the
    # spacing land exactly 2^i keys away; smaller targets hit the successor
    spec = CurveSpec(order=6, min_x=0.0, min_y=0.0, max_x=256.0, max_y=256.0)
    overlay = DoatOverlay(spec)
    assert spec.n_keys == 4096
    for i in range(64):
        join_at_key(overlay, f"n{i:02d}", i * 64, bootstrap="n00" if i else None)
    spacing = 64
    for node in overlay.nodes.values():
        for e in node.entries:
            if e.direction == "cw":
                got = cw_offset(node.key, e.neighbor_key, overlay.spec)
            else:
                got = cw_offset(e.neighbor_key, node.key, overlay.spec)
            if e.target_distance >= spacing:
                assert got == e.target_distance
            else:
                assert got == spacing
    check_table_invariant(overlay)


def test_table_invariant_random_join_orders():
    rng = random.Random(7)
    for trial in range(5):
        overlay = make_overlay(order=5)
        keys = rng.sample(range(overlay.spec.n_keys), 30)
        first = None
        for i, key in enumerate(keys):
            nid = f"n{i:02d}"
            join_at_key(overlay, nid, key, bootstrap=first)
            if first is None:
                first = nid
        check_table_invariant(overlay)


def test_table_invariant_after_leaves():
    rng = random.Random(3)
    overlay = make_overlay(order=5)
    ids = []
    for i, key in enumerate(rng.sample(range(overlay.spec.n_keys), 24)):
        nid = f"n{i:02d}"
        join_at_key(overlay, nid, key, bootstrap=ids[0] if ids else None)
        ids.append(nid)
    for nid in rng.sample(ids, 10):
        overlay.leave(nid)
    check_table_invariant(overlay)


# ---------------------------------------------------------------------------
# closest-node resolution


def test_find_closest_singleton():
    overlay = make_overlay()
    node = join_at_key(overlay, "a", 17)
    got, hops, _ = overlay.find_closest_doat_node(DelayCoord(200.0, 10.0), "a")
    assert got == "a"


def test_find_closest_exact_cell_match():
    overlay = make_overlay()
    join_at_key(overlay, "a", 0)
    join_at_key(overlay, "b", 2048, bootstrap="a")
    coord = key_to_coord(2048, overlay.spec)
    got, _, _ = overlay.find_closest_doat_node(coord, "a")
    assert got == "b"


def test_find_closest_matches_brute_force_256():
    rng = random.Random(11)
    spec = CurveSpec(order=8, min_x=0.0, min_y=0.0, max_x=280.0, max_y=280.0)
    overlay = DoatOverlay(spec)
    first = None
    for i in range(256):
        nid = f"n{i:03d}"
        coord = DelayCoord(rng.uniform(0, 280), rng.uniform(0, 280))
        overlay.join(nid, coord, first)
        if first is None:
            first = nid
    max_hops = 2 * math.ceil(math.log2(spec.n_keys)) + 2
    ids = sorted(overlay.nodes)
    for _ in range(1000):
        q = DelayCoord(rng.uniform(0, 280), rng.uniform(0, 280))
        entry = ids[rng.randrange(len(ids))]
        got, hops, _ = overlay.find_closest_doat_node(q, entry)
        assert got == overlay.closest_node_brute(q)
        assert hops <= max_hops


# ---------------------------------------------------------------------------
# registration and routing updates


def test_register_singleton_no_updates():
    overlay = make_overlay()
    node = join_at_key(overlay, "a", 0)
    node.register_lt(record_for(overlay, "a", "s"), overlay.spec)
    assert node.local_entry["s"][0].lt_address == "lt-of-a"
    assert node.flush_adverts(1000.0, overlay.spec) == []


def test_register_new_local_route_floods_even_if_neighbor_routed():
    overlay = make_overlay(order=5)
    for i, key in enumerate((0, 256, 512, 768)):
        join_at_key(overlay, f"n{i}", key, bootstrap="n0" if i else None)
    overlay.nodes["n1"].register_lt(record_for(overlay, "n1", "s"), overlay.spec)
    overlay.pump(0.0)
    # n0 already routes s via n1; a local registration at n0 must still flood
    n0 = overlay.nodes["n0"]
    assert any(st[0].contains("s") for st in n0.neighbor_filters.values())
    rec = LtRecord("lt-x", "s", n0.key, n0.coord, 0.0)
    created = n0.register_lt(rec, overlay.spec)
    assert created
    assert n0.dirty  # updates scheduled to neighbors


def test_reregister_same_record_is_idempotent():
    overlay = make_overlay()
    node = join_at_key(overlay, "a", 0)
    join_at_key(overlay, "b", 2000, bootstrap="a")
    rec = record_for(overlay, "a", "s", now=1.0)
    assert node.register_lt(rec, overlay.spec)
    node.dirty.clear()
    again = LtRecord(rec.lt_address, rec.stream_id, rec.lt_key, rec.lt_coord, 2.0)
    assert not node.register_lt(again, overlay.spec)
    assert not node.dirty
    assert len(node.local_entry["s"]) == 1
    assert node.local_entry["s"][0].registered_at == 2.0


def test_update_with_no_change_does_not_forward():
    overlay = make_overlay(order=5)
    for i, key in enumerate((0, 256, 512, 768)):
        join_at_key(overlay, f"n{i}", key, bootstrap="n0" if i else None)
    overlay.nodes["n1"].register_lt(record_for(overlay, "n1", "s"), overlay.spec)
    overlay.pump(0.0)
    n2 = overlay.nodes["n2"]
    n2.dirty.clear()
    state = n2.neighbor_filters["n1"]
    dup = RoutingUpdate("n1", state[0], state[1])
    n2.handle_routing_update("n1", overlay.nodes["n1"].key, dup, overlay.spec)
    assert not n2.dirty


def test_stale_epoch_dropped_silently():
    overlay = make_overlay()
    join_at_key(overlay, "a", 0)
    join_at_key(overlay, "b", 2000, bootstrap="a")
    b = overlay.nodes["b"]
    fresh = BloomFilter(overlay.params.bloom).insert("s")
    b.neighbor_filters["a"] = [fresh, 5]
    stale = RoutingUpdate("a", BloomFilter(overlay.params.bloom).insert("t"), epoch=3)
    b.handle_routing_update("a", overlay.nodes["a"].key, stale, overlay.spec)
    assert b.neighbor_filters["a"][0].bits == fresh.bits
    assert b.neighbor_filters["a"][1] == 5


def test_line_flood_reaches_everyone_and_terminates():
    overlay = make_overlay(order=5)  # K = 1024
    keys = (0, 256, 512, 768)
    for i, key in enumerate(keys):
        join_at_key(overlay, f"n{i}", key, bootstrap="n0" if i else None)
    overlay.nodes["n0"].register_lt(record_for(overlay, "n0", "s"), overlay.spec)
    delivered, end_time = overlay.pump(0.0)
    assert delivered > 0
    # quiesced within a bounded number of aggregation intervals
    assert end_time <= 20 * overlay.params.aggregation_interval_ms
    for nid in ("n1", "n2", "n3"):
        node = overlay.nodes[nid]
        assert any(
            st[0].contains("s") for st in node.neighbor_filters.values()
        ), f"{nid} has no route toward the origin"


def test_two_updates_in_one_interval_batch_into_one_forward():
    overlay = make_overlay(order=5, interval=500.0)
    # b's forwarding set must be non-trivial: a at distance 256, c beyond
    join_at_key(overlay, "a", 0)
    join_at_key(overlay, "b", 256, bootstrap="a", now=0.0)
    join_at_key(overlay, "c", 768, bootstrap="a", now=0.0)
    a, b = overlay.nodes["a"], overlay.nodes["b"]
    f1 = BloomFilter(overlay.params.bloom).insert("s1")
    f2 = BloomFilter(overlay.params.bloom).insert("s2")
    b.dirty.clear()
    b.handle_routing_update("a", a.key, RoutingUpdate("a", f1, 0), overlay.spec)
    b.handle_routing_update("a", a.key, RoutingUpdate("a", f2, 0), overlay.spec)
    assert b.flush_adverts(200.0, overlay.spec) == []  # window still open
    sent = b.flush_adverts(500.0, overlay.spec)
    per_dst = {}
    for dst, update in sent:
        per_dst.setdefault(dst, []).append(update)
    assert all(len(v) == 1 for v in per_dst.values())
    assert all(
        v[0].filter.contains("s1") and v[0].filter.contains("s2")
        for v in per_dst.values()
    )
    # and nothing further until the next interval
    assert b.flush_adverts(600.0, overlay.spec) == []


# ---------------------------------------------------------------------------
# anycast queries


def build_eight_node_ring(refine_budget=16):
    spec = CurveSpec(order=3, min_x=0.0, min_y=0.0, max_x=256.0, max_y=256.0)
    overlay = DoatOverlay(spec, DoatParams(refine_budget=refine_budget))
    keys = [0, 8, 16, 24, 32, 40, 48, 56]
    for i, key in enumerate(keys):
        join_at_key(overlay, f"n{key:02d}", key, bootstrap="n00" if i else None)
    return overlay


def test_query_eight_node_ring_three_forwards():
    # the bare increasing-distance rule (no nearest-refinement pass)
    overlay = build_eight_node_ring(refine_budget=0)
    overlay.nodes["n16"].register_lt(record_for(overlay, "n16", "s"), overlay.spec)
    overlay.pump(0.0)
    querier = overlay.nodes["n56"].coord
    found, hops, path = overlay.query_closest_lt("n56", "s", querier)
    assert found is not None and found.lt_address == "lt-of-n16"
    assert hops <= 3
    assert path[0] == "n56"


def test_query_eight_node_ring_with_refinement_still_finds_lt():
    overlay = build_eight_node_ring()
    overlay.nodes["n16"].register_lt(record_for(overlay, "n16", "s"), overlay.spec)
    overlay.pump(0.0)
    found, hops, _ = overlay.query_closest_lt("n56", "s", overlay.nodes["n56"].coord)
    assert found is not None and found.lt_address == "lt-of-n16"
    assert hops <= 3 + overlay.params.refine_budget


def test_query_unknown_stream_not_found_within_ttl():
    overlay = build_eight_node_ring()
    overlay.nodes["n16"].register_lt(record_for(overlay, "n16", "s"), overlay.spec)
    overlay.pump(0.0)
    found, hops, _ = overlay.query_closest_lt("n56", "nosuch", overlay.nodes["n56"].coord)
    assert found is None
    assert hops <= overlay.params.query_ttl(overlay.spec)


def test_query_ttl_exhaustion_returns_not_found():
    overlay = build_eight_node_ring()
    overlay.nodes["n16"].register_lt(record_for(overlay, "n16", "s"), overlay.spec)
    overlay.pump(0.0)
    found, hops, _ = overlay.query_closest_lt(
        "n56", "s", overlay.nodes["n56"].coord, ttl=0
    )
    assert found is None
    assert hops == 0


def find_covering_id(params: BloomParams, target: str, tries=200_000):
    """Search for an id whose Bloom bits cover the target's bits."""
    want = set(_bit_positions(target, params))
    for i in range(tries):
        cand = f"fp-{i}"
        if cand != target and want <= set(_bit_positions(cand, params)):
            return cand
    raise AssertionError("no covering id found; enlarge the search")


def test_bloom_false_positive_triggers_backtrack():
    # tiny filter so a colliding id is easy to find
    params = DoatParams(bloom=BloomParams(m=16, k=2))
    spec = CurveSpec(order=5, min_x=0.0, min_y=0.0, max_x=256.0, max_y=256.0)
    overlay = DoatOverlay(spec, params)
    decoy_stream = find_covering_id(params.bloom, "s")
    # entry at n0; decoy registered nearby at n1 (its filter covers "s");
    # the true LT sits far away at n3
    for i, key in enumerate((0, 64, 512, 700)):
        join_at_key(overlay, f"n{i}", key, bootstrap="n0" if i else None)
    overlay.nodes["n1"].register_lt(record_for(overlay, "n1", decoy_stream), overlay.spec)
    overlay.nodes["n3"].register_lt(record_for(overlay, "n3", "s"), overlay.spec)
    overlay.pump(0.0)
    n0 = overlay.nodes["n0"]
    assert n0.neighbor_filters["n1"][0].contains("s")  # the false positive
    found, hops, path = overlay.query_closest_lt("n0", "s", n0.coord)
    assert found is not None and found.lt_address == "lt-of-n3"
    assert "n1" in path  # walked into the dead end first, then backtracked


def test_query_returns_nearest_of_local_records():
    overlay = make_overlay()
    node = join_at_key(overlay, "a", 0)
    near = LtRecord("lt-near", "s", node.key, key_to_coord(2, overlay.spec), 0.0)
    far = LtRecord("lt-far", "s", node.key, key_to_coord(3000, overlay.spec), 0.0)
    node.local_entry["s"] = [
        LtRecord("lt-near", "s", coord_to_key(near.lt_coord, overlay.spec), near.lt_coord, 0.0),
        LtRecord("lt-far", "s", coord_to_key(far.lt_coord, overlay.spec), far.lt_coord, 0.0),
    ]
    node.local_filter = node.local_filter.insert("s")
    querier = key_to_coord(1, overlay.spec)
    found, _, _ = overlay.query_closest_lt("a", "s", querier)
    assert found.lt_address == "lt-near"


# ---------------------------------------------------------------------------
# epochs


def test_rebuild_without_departures_keeps_query_outcomes():
    overlay = build_eight_node_ring()
    rec = record_for(overlay, "n16", "s", now=0.0)
    overlay.nodes["n16"].register_lt(rec, overlay.spec)
    overlay.pump(0.0)
    before, _, _ = overlay.query_closest_lt("n56", "s", overlay.nodes["n56"].coord)
    overlay.rebuild_all_epochs(60_000.0)
    overlay.pump(60_000.0)
    after, _, _ = overlay.query_closest_lt("n56", "s", overlay.nodes["n56"].coord)
    assert before is not None and after is not None
    assert before.lt_address == after.lt_address


def test_departed_lt_goes_dark_after_two_epochs():
    overlay = build_eight_node_ring()
    # refresh far in the future is irrelevant: the record is removed outright
    overlay.nodes["n16"].register_lt(record_for(overlay, "n16", "s"), overlay.spec)
    overlay.pump(0.0)
    overlay.nodes["n16"].unregister_lt("lt-of-n16", "s")

    # stale filters may still route toward the departed LT before rebuilds
    found, hops, _ = overlay.query_closest_lt("n56", "s", overlay.nodes["n56"].coord)
    assert found is None
    assert hops >= 1

    overlay.rebuild_all_epochs(60_000.0)
    overlay.pump(60_000.0)
    overlay.rebuild_all_epochs(120_000.0)
    overlay.pump(120_000.0)
    for nid in sorted(overlay.nodes):
        found, hops, _ = overlay.query_closest_lt(nid, "s", overlay.nodes[nid].coord)
        assert found is None
        assert hops == 0, f"{nid} still forwards toward a dead route"


def test_record_ttl_prunes_unrefreshed_records():
    overlay = make_overlay()
    node = join_at_key(overlay, "a", 0)
    node.register_lt(record_for(overlay, "a", "s", now=0.0), overlay.spec)
    node.rebuild_epoch(now=300_000.0, new_epoch=5)  # past the 120 s record ttl
    assert "s" not in node.local_entry
    assert not node.local_filter.contains("s")


def test_flood_quiesces_within_bounded_intervals_at_256_nodes():
    rng = random.Random(31)
    spec = CurveSpec(order=8, min_x=0.0, min_y=0.0, max_x=280.0, max_y=280.0)
    overlay = DoatOverlay(spec, DoatParams())
    first = None
    for i in range(256):
        nid = f"n{i:03d}"
        overlay.join(nid, DelayCoord(rng.uniform(0, 280), rng.uniform(0, 280)), first)
        if first is None:
            first = nid
    for j in range(8):
        owner = overlay.nodes[sorted(overlay.nodes)[rng.randrange(256)]]
        owner.register_lt(
            LtRecord(f"lt{j}", f"s{j}", owner.key, owner.coord, 0.0), spec
        )
    delivered, end_time = overlay.pump(0.0)
    assert delivered > 0
    intervals = end_time / overlay.params.aggregation_interval_ms
    assert intervals <= 40, f"flood needed {intervals} aggregation intervals"
