import math
import random

import pytest
from hypothesis import given, strategies as st

from livemesh.coords import (
    DelayCoord,
    EmbeddingParams,
    distance,
    embedding_error,
    relax_embedding,
    update_coordinate,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
coords = st.builds(DelayCoord, finite, finite)


def test_distance_345():
    assert distance(DelayCoord(0, 0), DelayCoord(3, 4)) == 5.0


def test_distance_identity():
    assert distance(DelayCoord(1, 1), DelayCoord(1, 1)) == 0.0


def test_distance_negation():
    assert distance(DelayCoord(0, 0), DelayCoord(-3, -4)) == 5.0


def test_coord_rejects_non_finite():
    with pytest.raises(ValueError):
        DelayCoord(float("nan"), 0.0)
    with pytest.raises(ValueError):
        DelayCoord(0.0, float("inf"))


@given(coords, coords, coords)
def test_metric_axioms(a, b, c):
    assert distance(a, b) >= 0
    assert distance(a, a) == 0
    assert distance(a, b) == distance(b, a)
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9


def test_update_exact_prediction_no_move():
    params = EmbeddingParams(step_gain=0.25)
    got = update_coordinate(DelayCoord(0, 0), DelayCoord(1, 0), 1.0, params)
    assert got == DelayCoord(0, 0)


def test_update_measured_slower_moves_away():
    # error 1.0, unit vector (-1, 0), displacement 0.25
    params = EmbeddingParams(step_gain=0.25)
    got = update_coordinate(DelayCoord(0, 0), DelayCoord(1, 0), 2.0, params)
    assert got.x == pytest.approx(-0.25)
    assert got.y == pytest.approx(0.0)


def test_update_measured_faster_moves_toward():
    params = EmbeddingParams(step_gain=0.25)
    got = update_coordinate(DelayCoord(0, 0), DelayCoord(1, 0), 0.5, params)
    assert got.x == pytest.approx(0.125)
    assert got.y == pytest.approx(0.0)


def test_update_rejects_negative_measurement():
    with pytest.raises(ValueError):
        update_coordinate(DelayCoord(0, 0), DelayCoord(1, 0), -1.0, EmbeddingParams())


def test_update_coincident_points_displace_deterministically():
    params = EmbeddingParams(step_gain=0.5)
    a = update_coordinate(DelayCoord(2, 2), DelayCoord(2, 2), 10.0, params,
                          rng=random.Random(7))
    b = update_coordinate(DelayCoord(2, 2), DelayCoord(2, 2), 10.0, params,
                          rng=random.Random(7))
    assert a == b
    assert distance(a, DelayCoord(2, 2)) == pytest.approx(5.0)


@given(
    coords, coords,
    st.floats(min_value=0.0, max_value=1e4, allow_nan=False),
    st.floats(min_value=0.01, max_value=1.0),
)
def test_update_is_exact_error_contraction(a, b, measured, gain):
    # |new_predicted - measured| = (1 - g) |old_predicted - measured|
    if distance(a, b) == 0.0:
        return
    params = EmbeddingParams(step_gain=gain)
    moved = update_coordinate(a, b, measured, params)
    old_err = abs(distance(a, b) - measured)
    new_err = abs(distance(moved, b) - measured)
    assert new_err == pytest.approx((1.0 - gain) * old_err, abs=1e-6)


def test_embedding_error_perfect():
    pts = {"a": DelayCoord(0, 0), "b": DelayCoord(3, 4), "c": DelayCoord(6, 8)}
    true = {
        ("a", "b"): 5.0,
        ("a", "c"): 10.0,
        ("b", "c"): 5.0,
    }
    assert embedding_error(pts, true) == 0.0


def test_embedding_error_definition_single_pair():
    pts = {"a": DelayCoord(0, 0), "b": DelayCoord(5, 0)}
    assert embedding_error(pts, {("a", "b"): 10.0}) == 0.5


def test_embedding_error_empty_raises():
    with pytest.raises(ValueError):
        embedding_error({}, {})
    with pytest.raises(ValueError):
        embedding_error(
            {"a": DelayCoord(0, 0), "b": DelayCoord(0, 0)}, {("a", "b"): 0.0}
        )


def _planted_instance(n, seed):
    rng = random.Random(seed)
    truth = {f"p{i}": DelayCoord(rng.uniform(0, 200), rng.uniform(0, 200))
             for i in range(n)}

    def true_delay(a, b):
        return distance(truth[a], truth[b])

    start = {pid: DelayCoord(rng.uniform(0, 200), rng.uniform(0, 200))
             for pid in truth}
    return truth, true_delay, start


def test_relaxation_converges_on_embeddable_truth():
    # 200 peers with planar-Euclidean ground truth: median error < 0.10,
    # and non-increasing across rounds after a warm-up.
    _, true_delay, start = _planted_instance(200, seed=11)
    rng = random.Random(42)
    params = EmbeddingParams(step_gain=0.25, rounds=1, neighbor_sample_size=16)
    peers = sorted(start)
    sampled_pairs = {}
    pair_rng = random.Random(5)
    for _ in range(2000):
        a, b = pair_rng.sample(peers, 2)
        sampled_pairs[(a, b)] = true_delay(a, b)

    coords_now = start
    errors = []
    for _ in range(30):
        coords_now = relax_embedding(coords_now, true_delay, params, rng, rounds=1)
        errors.append(embedding_error(coords_now, sampled_pairs))
    warm = errors[5:]
    assert all(b <= a + 0.01 for a, b in zip(warm, warm[1:]))
    assert errors[-1] < 0.10
