"""Synthetic 2-D delay-space coordinates.

Peers embed themselves into a planar metric space from round-trip
measurements; Euclidean distance between coordinates then predicts the
one-way delay between any two peers without probing them directly.
"""

from __future__ import annotations

import math
import random
import statistics
from dataclasses import dataclass
from typing import Callable, Mapping

Pair = tuple[str, str]

# direction used when two peers sit on the exact same point; fixed seed so
# simulations stay reproducible
_DEGENERATE_RNG_SEED = 0x5FC0


@dataclass(frozen=True)
class DelayCoord:
    """A point in delay space; both components are milliseconds-scaled."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("coordinate components must be finite")


@dataclass(frozen=True)
class EmbeddingParams:
    step_gain: float = 0.25
    rounds: int = 8
    neighbor_sample_size: int = 16

    def __post_init__(self) -> None:
        if not (0.0 < self.step_gain <= 1.0):
            raise ValueError("step_gain must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.neighbor_sample_size < 1:
            raise ValueError("neighbor_sample_size must be >= 1")


def distance(a: DelayCoord, b: DelayCoord) -> float:
    """Predicted one-way delay in ms between two coordinates."""
    return math.hypot(a.x - b.x, a.y - b.y)


def update_coordinate(
    self_coord: DelayCoord,
    remote: DelayCoord,
    measured_rtt_half: float,
    params: EmbeddingParams,
    rng: random.Random | None = None,
) -> DelayCoord:
    """One spring-relaxation step against a single measurement.

    Moves self along the line through self and remote by
    step_gain * (measured - predicted): away from remote when the link
    measured slower than predicted, toward it when faster. Coincident
    points with a nonzero error displace along a seeded random direction.
    """
    if measured_rtt_half < 0:
        raise ValueError("measured_rtt_half must be >= 0")
    predicted = distance(self_coord, remote)
    error = measured_rtt_half - predicted
    if error == 0.0:
        return self_coord
    if predicted == 0.0:
        if rng is None:
            rng = random.Random(_DEGENERATE_RNG_SEED)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        ux, uy = math.cos(angle), math.sin(angle)
    else:
        ux = (self_coord.x - remote.x) / predicted
        uy = (self_coord.y - remote.y) / predicted
    step = params.step_gain * error
    return DelayCoord(self_coord.x + step * ux, self_coord.y + step * uy)


def embedding_error(
    coords: Mapping[str, DelayCoord],
    true_delays: Mapping[Pair, float],
) -> float:
    """Median relative prediction error over measured pairs.

    Pairs whose true delay is zero are excluded; an empty set of usable
    pairs is an error.
    """
    errors = []
    for (a, b), true in true_delays.items():
        if true == 0.0:
            continue
        predicted = distance(coords[a], coords[b])
        errors.append(abs(predicted - true) / true)
    if not errors:
        raise ValueError("no pairs with nonzero true delay")
    return statistics.median(errors)


def relax_embedding(
    coords: dict[str, DelayCoord],
    true_delay: Callable[[str, str], float],
    params: EmbeddingParams,
    rng: random.Random,
    rounds: int | None = None,
) -> dict[str, DelayCoord]:
    """Run whole-network relaxation rounds and return updated coordinates.

    Each round every peer takes one step against a random sample of
    other peers. Serves both as the simulator's bootstrap embedding and
    as the convergence oracle for exactly-embeddable ground truths.
    """
    peers = sorted(coords)
    if len(peers) < 2:
        return dict(coords)
    out = dict(coords)
    for _ in range(rounds if rounds is not None else params.rounds):
        for pid in peers:
            k = min(params.neighbor_sample_size, len(peers) - 1)
            others = rng.sample([p for p in peers if p != pid], k)
            for other in others:
                out[pid] = update_coordinate(
                    out[pid], out[other], true_delay(pid, other), params, rng
                )
    return out


def embed_joiner(
    own: DelayCoord,
    landmarks: Mapping[str, DelayCoord],
    measure: Callable[[str], float],
    params: EmbeddingParams,
    rng: random.Random,
) -> DelayCoord:
    """Position a joining peer against fixed landmark coordinates."""
    coord = own
    ids = sorted(landmarks)
    for _ in range(params.rounds):
        for lid in ids:
            coord = update_coordinate(coord, landmarks[lid], measure(lid), params, rng)
    return coord
