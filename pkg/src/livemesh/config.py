"""Scenario configuration: YAML in, validated dataclasses out.

Every knob has an explicit default; loading materializes all of them so
a dumped config names the complete parameter set that actually ran.
Validation errors carry the dotted field path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bloom import BloomParams
from .doat import DoatParams
from .swarm import StreamParams, SwarmParams


class ConfigError(Exception):
    pass


@dataclass
class TopologyConfig:
    kind: str = "uniform_rectangle"
    consumers: int = 50
    ncps: int = 0
    max_delay_ms: float = 140.0
    noise_sigma: float = 0.0
    consumer_capacity: float = 1400.0
    ncp_capacity: float = 1400.0
    peercaster_capacity: float = 3500.0
    clusters: int = 2
    peers_per_cluster: int = 10
    spread_ms: float = 5.0
    inter_cluster_penalty_ms: float = 80.0
    extent_ms: float = 100.0


@dataclass
class StreamConfig:
    stream_id: str = "stream-1"
    rate_kbit_s: float = 350.0
    chunk_duration_ms: float = 250.0
    start_ms: float = 1000.0


@dataclass
class SwarmConfig:
    window_chunks: int = 40
    startup_threshold: int = 8
    k_short: int = 4
    k_jump: int = 2
    chunk_price: float = 1.0
    per_requester_concurrency: int = 4
    request_timeout_ms: float = 2000.0
    queue_penalty_ms: float = 60.0
    join_depth_chunks: int = 4
    startup_per_link_cap: int = 2
    max_parallel_uploads: int = 4
    # shallow: a full queue must bounce requesters toward relays quickly
    upload_queue_limit: int = 4
    have_interval_ms: float = 1000.0


@dataclass
class DoatConfig:
    curve_order: int = 8
    aggregation_interval_ms: float = 500.0
    rebuild_period_ms: float = 60_000.0
    record_ttl_ms: float = 120_000.0
    query_ttl_factor: int = 4
    refine_budget: int = 16
    bloom_m: int = 2048
    bloom_k: int = 5
    bloom_seed: int = 0


@dataclass
class TrackerConfig:
    load_high: int = 100
    load_low: int = 25
    refresh_interval_ms: float = 30_000.0
    registration_timeout_ms: float = 90_000.0


@dataclass
class TrustConfig:
    walk_ttl: int = 6
    advertisement_period_ms: float = 30_000.0
    staleness_horizon_ms: float = 120_000.0
    # per-stranger allowance; roughly one stream rate so a fresh swarm can
    # bootstrap (the module-level account rule keeps its own tight default)
    altruism_budget: float = 40.0
    altruism_interval_ms: float = 10_000.0
    shift_cooldown_ms: float = 5000.0
    signature_scheme: str = "keyed-hash"  # ed25519 for real deployments


@dataclass
class ChurnConfig:
    arrival_rate_per_s: float = 0.0
    lifetime: str = "exponential"
    mean_lifetime_s: float = 300.0
    pareto_shape: float = 1.5


@dataclass
class JoinConfig:
    ncp_order: str = "delay"  # delay | random
    ncp_start_ms: float = 1000.0
    ncp_stagger_ms: float = 100.0
    consumer_start_ms: float = 15_000.0
    consumer_window_ms: float = 15_000.0
    lt_query_retry_ms: float = 1000.0


@dataclass
class SimConfig:
    per_hop_processing_ms: float = 5.0
    jitter_ms: float = 0.0
    trace: bool = False


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 1
    duration_ms: float = 60_000.0
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    doat: DoatConfig = field(default_factory=DoatConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    trust: TrustConfig = field(default_factory=TrustConfig)
    churn: ChurnConfig = field(default_factory=ChurnConfig)
    join: JoinConfig = field(default_factory=JoinConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    # -- derived builders ---------------------------------------------------

    def stream_params(self) -> StreamParams:
        return StreamParams(
            stream_id=self.stream.stream_id,
            rate_kbit_s=self.stream.rate_kbit_s,
            chunk_duration_ms=self.stream.chunk_duration_ms,
        )

    def swarm_params(self) -> SwarmParams:
        return SwarmParams(
            window_chunks=self.swarm.window_chunks,
            startup_threshold=self.swarm.startup_threshold,
            k_short=self.swarm.k_short,
            k_jump=self.swarm.k_jump,
            chunk_price=self.swarm.chunk_price,
            per_requester_concurrency=self.swarm.per_requester_concurrency,
            request_timeout_ms=self.swarm.request_timeout_ms,
            queue_penalty_ms=self.swarm.queue_penalty_ms,
            join_depth_chunks=self.swarm.join_depth_chunks,
            startup_per_link_cap=self.swarm.startup_per_link_cap,
        )

    def doat_params(self) -> DoatParams:
        return DoatParams(
            aggregation_interval_ms=self.doat.aggregation_interval_ms,
            rebuild_period_ms=self.doat.rebuild_period_ms,
            record_ttl_ms=self.doat.record_ttl_ms,
            query_ttl_factor=self.doat.query_ttl_factor,
            refine_budget=self.doat.refine_budget,
            bloom=BloomParams(
                m=self.doat.bloom_m, k=self.doat.bloom_k, seed=self.doat.bloom_seed
            ),
        )

    def topology_params(self) -> dict:
        t = self.topology
        if t.kind == "uniform_rectangle":
            return {
                "consumers": t.consumers,
                "ncps": t.ncps,
                "max_delay_ms": t.max_delay_ms,
                "noise_sigma": t.noise_sigma,
                "consumer_capacity": t.consumer_capacity,
                "ncp_capacity": t.ncp_capacity,
                "peercaster_capacity": t.peercaster_capacity,
            }
        return {
            "clusters": t.clusters,
            "peers_per_cluster": t.peers_per_cluster,
            "spread_ms": t.spread_ms,
            "inter_cluster_penalty_ms": t.inter_cluster_penalty_ms,
            "extent_ms": t.extent_ms,
            "noise_sigma": t.noise_sigma,
            "consumer_capacity": t.consumer_capacity,
            "peercaster_capacity": t.peercaster_capacity,
        }


_SECTIONS = {
    "topology": TopologyConfig,
    "stream": StreamConfig,
    "swarm": SwarmConfig,
    "doat": DoatConfig,
    "tracker": TrackerConfig,
    "trust": TrustConfig,
    "churn": ChurnConfig,
    "join": JoinConfig,
    "sim": SimConfig,
}


def _coerce(section: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{section}.{key}: unknown field")
        want = fields[key].type
        if want in ("int", int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{key}: expected an integer")
        elif want in ("float", float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key}: expected a number")
            value = float(value)
        elif want in ("str", str):
            if not isinstance(value, str):
                raise ConfigError(f"{section}.{key}: expected a string")
        elif want in ("bool", bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key}: expected a boolean")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    cfg = ScenarioConfig()
    for key, value in raw.items():
        if key in ("name",):
            if not isinstance(value, str):
                raise ConfigError("name: expected a string")
            cfg.name = value
        elif key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError("seed: expected an integer")
            cfg.seed = value
        elif key == "duration_ms":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("duration_ms: expected a number")
            cfg.duration_ms = float(value)
        elif key in _SECTIONS:
            setattr(cfg, key, _coerce(key, _SECTIONS[key], value))
        else:
            raise ConfigError(f"{key}: unknown section")
    _validate(cfg)
    return cfg


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _validate(cfg: ScenarioConfig) -> None:
    _require(cfg.duration_ms > 0, "duration_ms", "must be > 0")
    t = cfg.topology
    _require(t.kind in ("uniform_rectangle", "clustered"), "topology.kind",
             "must be uniform_rectangle or clustered")
    _require(t.consumers >= 0, "topology.consumers", "must be >= 0")
    _require(t.ncps >= 0, "topology.ncps", "must be >= 0")
    _require(t.max_delay_ms > 0, "topology.max_delay_ms", "must be > 0")
    for fname in ("consumer_capacity", "ncp_capacity", "peercaster_capacity"):
        _require(getattr(t, fname) > 0, f"topology.{fname}", "must be > 0")
    _require(t.noise_sigma >= 0, "topology.noise_sigma", "must be >= 0")
    s = cfg.stream
    _require(s.rate_kbit_s > 0, "stream.rate_kbit_s", "must be > 0")
    _require(s.chunk_duration_ms > 0, "stream.chunk_duration_ms", "must be > 0")
    sw = cfg.swarm
    _require(1 <= sw.window_chunks <= 64, "swarm.window_chunks", "must be in [1, 64]")
    _require(sw.startup_threshold >= 1, "swarm.startup_threshold", "must be >= 1")
    _require(sw.startup_threshold <= sw.window_chunks, "swarm.startup_threshold",
             "cannot exceed the window")
    _require(sw.k_short >= 1, "swarm.k_short", "must be >= 1")
    _require(sw.k_jump >= 0, "swarm.k_jump", "must be >= 0")
    _require(sw.max_parallel_uploads >= 1, "swarm.max_parallel_uploads", "must be >= 1")
    d = cfg.doat
    _require(1 <= d.curve_order <= 14, "doat.curve_order", "must be in [1, 14]")
    _require(d.bloom_m >= 8 and d.bloom_m % 8 == 0, "doat.bloom_m",
             "must be a positive multiple of 8")
    _require(d.bloom_k >= 1, "doat.bloom_k", "must be >= 1")
    tr = cfg.tracker
    _require(tr.load_low < tr.load_high, "tracker.load_low", "must be below load_high")
    _require(cfg.trust.walk_ttl >= 1, "trust.walk_ttl", "must be >= 1")
    _require(cfg.trust.signature_scheme in ("keyed-hash", "ed25519"),
             "trust.signature_scheme", "must be keyed-hash or ed25519")
    _require(cfg.churn.arrival_rate_per_s >= 0, "churn.arrival_rate_per_s",
             "must be >= 0")
    _require(cfg.churn.lifetime in ("exponential", "pareto"), "churn.lifetime",
             "must be exponential or pareto")
    _require(cfg.join.ncp_order in ("delay", "random"), "join.ncp_order",
             "must be delay or random")


def load_config(path: str | Path) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out: dict = {"name": cfg.name, "seed": cfg.seed, "duration_ms": cfg.duration_ms}
    for section, cls in _SECTIONS.items():
        out[section] = dataclasses.asdict(getattr(cfg, section))
    return out


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
