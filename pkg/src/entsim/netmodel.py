"""
Network description and the physical layer of a linear repeater chain.

A chain of ``num_switches + 2`` nodes is joined by hops. Each hop carries
``num_memory_positions // 2`` quantum connections; connection ``j`` of hop
``k`` stores its left half at position ``2j`` of node ``k`` and its right half
at position ``2j + 1`` of node ``k + 1`` (even positions face forward, odd
positions face backward).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from statistics import NormalDist
from typing import TYPE_CHECKING, Any, Callable, Union

import numpy as np

from .bell import BellDiagonalState, apply_memory_decay, depolarized_state

if TYPE_CHECKING:
    from .engine import Engine, Event, EventHandle

# speed of light in fiber, shared by quantum and classical channels
FIBER_KM_PER_NS = 2.0e5 / 1e9


class ConfigError(ValueError):
    pass


def fiber_delay_ns(length_km: float) -> int:
    return int(round(length_km / FIBER_KM_PER_NS))


# -- noise models --------------------------------------------------------------


class Sampling(str, Enum):
    SAMPLE = "sample"  # binary destruction drawn per pair
    MEAN = "mean"  # deterministic ensemble average, depolarized_state(p)


@dataclass(frozen=True)
class NoNoise:
    kind: str = "none"


@dataclass(frozen=True)
class PmdDepolarization:
    pmd_coefficient: float  # ps / sqrt(km)
    tau_coh_ps: float = 1.6
    relative_std: float = 1.0
    sampling: Sampling = Sampling.SAMPLE
    kind: str = "pmd"

    def __post_init__(self):
        for name in ("pmd_coefficient", "tau_coh_ps", "relative_std"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"pmd {name} must be positive")

    @classmethod
    def calibrated(cls, length_km: float, destruction_probability: float = 0.5, **kw) -> "PmdDepolarization":
        """Pick ``pmd_coefficient`` so a link of ``length_km`` is destroyed with the given probability."""
        tau = kw.get("tau_coh_ps", 1.6)
        rel = kw.get("relative_std", 1.0)
        # P(mu + rel*mu*Z >= tau) = q  =>  tau/mu = 1 + rel * z_{1-q}
        z = NormalDist().inv_cdf(1.0 - destruction_probability)
        mean = tau / (1.0 + rel * z)
        if mean <= 0:
            raise ConfigError("destruction probability unreachable with this relative_std")
        return cls(pmd_coefficient=mean / math.sqrt(length_km), **kw)


@dataclass(frozen=True)
class LengthSquaredDepolarization:
    p_in: float
    eta: float  # dB / km^2
    sampling: Sampling = Sampling.SAMPLE
    kind: str = "length_squared"

    def __post_init__(self):
        if not 0.0 <= self.p_in <= 1.0 or self.eta < 0:
            raise ConfigError("length_squared needs p_in in [0, 1] and eta >= 0")


NoiseModel = Union[NoNoise, PmdDepolarization, LengthSquaredDepolarization]


@dataclass(frozen=True)
class LinkSpec:
    length_km: float
    noise: NoiseModel = field(default_factory=NoNoise)
    source_delay_ns: float = 0.0

    def __post_init__(self):
        if not self.length_km > 0:
            raise ConfigError(f"link length must be positive, got {self.length_km}")
        if self.source_delay_ns < 0:
            raise ConfigError("source delay must be >= 0")

    @property
    def quantum_delay_ns(self) -> int:
        return fiber_delay_ns(self.length_km)

    @property
    def classical_delay_ns(self) -> int:
        return fiber_delay_ns(self.length_km)

    @property
    def arrival_delay_ns(self) -> int:
        return int(round(self.source_delay_ns + self.length_km / FIBER_KM_PER_NS))


def pmd_mean_ps(link: LinkSpec) -> float:
    return link.noise.pmd_coefficient * math.sqrt(link.length_km)


def pmd_destruction_probability(link: LinkSpec) -> float:
    """Analytic P(tau_PMD >= tau_coh); clipping negative draws at 0 leaves this unchanged."""
    noise = link.noise
    mean = pmd_mean_ps(link)
    return 1.0 - NormalDist(mean, noise.relative_std * mean).cdf(noise.tau_coh_ps)


def sample_pmd_delays(link: LinkSpec, rng: np.random.Generator, size: int | None = None):
    """Dispersion times in ps; negative normal draws are clipped to 0."""
    noise = link.noise
    if not isinstance(noise, PmdDepolarization):
        raise ConfigError("PMD sampling needs a PMD link")
    mean = pmd_mean_ps(link)
    return np.maximum(0.0, rng.normal(mean, noise.relative_std * mean, size))


def sample_channel_depolarization(link: LinkSpec, rng: np.random.Generator) -> bool:
    """Draw tau_PMD for one photon; True means the pair is fully depolarized."""
    return bool(sample_pmd_delays(link, rng) >= link.noise.tau_coh_ps)


def length_squared_depolarization_probability(link: LinkSpec) -> float:
    noise = link.noise
    if not isinstance(noise, LengthSquaredDepolarization):
        raise ConfigError("length_squared_depolarization_probability needs a length_squared link")
    return 1.0 - (1.0 - noise.p_in) * 10.0 ** (-(link.length_km**2) * noise.eta / 10.0)


def depolarization_probability(link: LinkSpec) -> float:
    """Probability that a pair generated on ``link`` arrives fully depolarized."""
    if isinstance(link.noise, NoNoise):
        return 0.0
    if isinstance(link.noise, PmdDepolarization):
        return pmd_destruction_probability(link)
    return length_squared_depolarization_probability(link)


def expected_link_fidelity(link: LinkSpec) -> float:
    return 1.0 - 0.75 * depolarization_probability(link)


def sample_link_state(link: LinkSpec, rng: np.random.Generator) -> BellDiagonalState:
    noise = link.noise
    if isinstance(noise, NoNoise):
        return BellDiagonalState.perfect()
    if noise.sampling is Sampling.MEAN:
        return depolarized_state(depolarization_probability(link))
    if isinstance(noise, PmdDepolarization):
        destroyed = sample_channel_depolarization(link, rng)
    else:
        destroyed = rng.random() < length_squared_depolarization_probability(link)
    return BellDiagonalState.maximally_mixed() if destroyed else BellDiagonalState.perfect()


# -- configuration -------------------------------------------------------------


class Policy(str, Enum):
    OQF = "OQF"
    NQF = "NQF"
    BEST = "BEST"


class Ordering(str, Enum):
    PS = "PS"
    SP = "SP"


_REQUIRED = (
    "num_switches",
    "distances_km",
    "num_memory_positions",
    "source_delay_ns",
    "noise_model",
    "memory_decay_rate_per_ns",
    "coherence_time_ns",
    "seed",
    "runtime_ns",
)
_OPTIONAL = ("policy", "ordering", "distillation_rounds", "num_requests")
_NOISE_FIELDS = {
    "none": set(),
    "pmd": {"pmd_coefficient", "tau_coh_ps", "relative_std", "sampling", "calibrated_at_km", "destruction_probability"},
    "length_squared": {"p_in", "eta", "sampling"},
}


def parse_noise_model(raw: Any) -> NoiseModel:
    if raw is None or raw == "none":
        return NoNoise()
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError(f"noise_model must be 'none' or an object with 'kind', got {raw!r}")
    kind = raw["kind"]
    if kind not in _NOISE_FIELDS:
        raise ConfigError(f"unknown noise model {kind!r}")
    params = {k: v for k, v in raw.items() if k != "kind"}
    unknown = set(params) - _NOISE_FIELDS[kind]
    if unknown:
        raise ConfigError(f"unknown {kind} noise fields: {sorted(unknown)}")
    if "sampling" in params:
        try:
            params["sampling"] = Sampling(params["sampling"])
        except ValueError:
            raise ConfigError(f"sampling must be 'sample' or 'mean', got {params['sampling']!r}") from None
    try:
        if kind == "none":
            return NoNoise()
        if kind == "pmd":
            # either an explicit coefficient or a calibration point, not both
            calib = {k: params.pop(k) for k in ("calibrated_at_km", "destruction_probability") if k in params}
            if calib:
                if "pmd_coefficient" in params or "calibrated_at_km" not in calib:
                    raise ConfigError("pmd needs either pmd_coefficient or calibrated_at_km (+ destruction_probability)")
                return PmdDepolarization.calibrated(calib["calibrated_at_km"], calib.get("destruction_probability", 0.5), **params)
            return PmdDepolarization(**params)
        return LengthSquaredDepolarization(**params)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} noise parameters: {exc}") from None


def noise_to_dict(noise: NoiseModel) -> dict | str:
    if isinstance(noise, NoNoise):
        return "none"
    d = asdict(noise)
    d["sampling"] = noise.sampling.value
    return d


@dataclass(frozen=True)
class NetworkConfig:
    num_switches: int
    distances_km: tuple[float, ...]
    num_memory_positions: int
    source_delay_ns: float
    noise_model: NoiseModel
    memory_decay_rate_per_ns: float
    coherence_time_ns: int
    seed: int
    runtime_ns: int
    policy: Policy = Policy.OQF
    ordering: Ordering = Ordering.PS
    distillation_rounds: int = 0
    num_requests: int = 1

    def __post_init__(self):
        object.__setattr__(self, "distances_km", tuple(float(d) for d in self.distances_km))
        object.__setattr__(self, "policy", Policy(self.policy))
        object.__setattr__(self, "ordering", Ordering(self.ordering))
        if self.num_switches < 0:
            raise ConfigError("num_switches must be >= 0")
        if len(self.distances_km) != self.num_switches + 1:
            raise ConfigError(
                f"{self.num_switches} switches need {self.num_switches + 1} distances, got {len(self.distances_km)}"
            )
        if any(not d > 0 for d in self.distances_km):
            raise ConfigError("distances must be positive")
        m = self.num_memory_positions
        if m < 2 or m % 2:
            raise ConfigError(f"num_memory_positions must be even and >= 2, got {m}")
        if self.source_delay_ns < 0 or self.memory_decay_rate_per_ns < 0:
            raise ConfigError("source delay and decay rate must be >= 0")
        if self.coherence_time_ns <= 0 or self.runtime_ns <= 0:
            raise ConfigError("coherence_time_ns and runtime_ns must be positive")
        if self.distillation_rounds < 0 or self.num_requests < 1:
            raise ConfigError("distillation_rounds >= 0 and num_requests >= 1 required")
        need = 2**self.distillation_rounds
        if need > m // 2:
            raise ConfigError(
                f"{self.distillation_rounds} distillation round(s) need {need} connections per hop, "
                f"only {m // 2} available"
            )

    @property
    def num_nodes(self) -> int:
        return self.num_switches + 2

    @property
    def connections_per_hop(self) -> int:
        return self.num_memory_positions // 2

    @classmethod
    def from_dict(cls, raw: dict) -> "NetworkConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(_REQUIRED) - set(_OPTIONAL)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        missing = [k for k in _REQUIRED if k not in raw]
        if missing:
            raise ConfigError(f"missing config fields: {missing}")
        kw = dict(raw)
        kw["noise_model"] = parse_noise_model(raw["noise_model"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "NetworkConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _REQUIRED + _OPTIONAL}
        d["distances_km"] = list(self.distances_km)
        d["noise_model"] = noise_to_dict(self.noise_model)
        d["policy"] = self.policy.value
        d["ordering"] = self.ordering.value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "NetworkConfig":
        d = {k: getattr(self, k) for k in _REQUIRED + _OPTIONAL}
        d.update(changes)
        return NetworkConfig(**d)

    def link(self, hop: int) -> LinkSpec:
        return LinkSpec(self.distances_km[hop], self.noise_model, self.source_delay_ns)


# -- topology ------------------------------------------------------------------


class Role(str, Enum):
    END_NODE = "EndNode"
    SWITCH = "Switch"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    index: int
    role: Role
    num_memory_positions: int
    num_links: int
    request_buffer_size: int = 0


@dataclass(frozen=True)
class NetworkTopology:
    nodes: tuple[NodeSpec, ...]
    edges: tuple[LinkSpec, ...]
    edge_weight: tuple[float, ...]

    def neighbours(self, index: int) -> list[int]:
        return [j for j in (index - 1, index + 1) if 0 <= j < len(self.nodes)]


def build_topology(config: NetworkConfig) -> NetworkTopology:
    n = config.num_nodes
    nodes = []
    for i in range(n):
        end = i in (0, n - 1)
        nodes.append(
            NodeSpec(
                name=f"node{i}",
                index=i,
                role=Role.END_NODE if end else Role.SWITCH,
                num_memory_positions=config.num_memory_positions,
                num_links=1 if end else 2,
                request_buffer_size=config.num_requests if end else 0,
            )
        )
    edges = tuple(config.link(k) for k in range(n - 1))
    return NetworkTopology(tuple(nodes), edges, tuple(expected_link_fidelity(e) for e in edges))


# -- runtime entities ------------------------------------------------------------


@dataclass(eq=False)
class EntangledPair:
    """A shared pair whose halves sit in two memory slots.

    ``state`` is the physical state; ``frame`` is the Bell label of the Pauli
    correction still owed by the destination, so the corrected state is
    ``state.permuted(frame)``.
    """

    left: tuple[int, int]  # (node, position)
    right: tuple[int, int]
    state: BellDiagonalState
    updated_at: int
    created_at: int
    frame: int = 0
    rounds: int = 0
    links: int = 1
    busy: bool = False
    alive: bool = True
    owner: Any = None
    expiry: "EventHandle | None" = field(default=None, repr=False)
    pid: int = 0

    def advance(self, now: int, decay_rate: float) -> BellDiagonalState:
        """Bring the stored state up to ``now``; both halves decay while waiting."""
        dt = now - self.updated_at
        if dt > 0 and decay_rate > 0:
            s = apply_memory_decay(self.state, decay_rate, dt)
            self.state = apply_memory_decay(s, decay_rate, dt)
        self.updated_at = max(self.updated_at, now)
        return self.state

    def corrected_at(self, now: int, decay_rate: float) -> BellDiagonalState:
        """Corrected state at ``now`` without mutating the pair."""
        s = self.state
        dt = now - self.updated_at
        if dt > 0 and decay_rate > 0:
            s = apply_memory_decay(apply_memory_decay(s, decay_rate, dt), decay_rate, dt)
        return s.permuted(self.frame)

    @property
    def hops(self) -> int:
        return self.right[0] - self.left[0]


@dataclass(eq=False)
class MemorySlot:
    node: int
    position: int
    pair: EntangledPair | None = None
    reserved: bool = False
    stored_at: int = 0
    coherence_deadline: int = 0

    @property
    def free(self) -> bool:
        return self.pair is None and not self.reserved

    def usable(self, now: int) -> bool:
        return self.pair is not None and self.pair.alive and now < self.coherence_deadline


class Node:
    def __init__(self, spec: NodeSpec):
        self.spec = spec
        self.index = spec.index
        self.name = spec.name
        self.memory = [MemorySlot(spec.index, p) for p in range(spec.num_memory_positions)]


class QuantumConnection:
    """EPR source feeding one slot on each side of a hop; regenerates when both slots free."""

    def __init__(self, network: "Network", hop: int, index: int, link: LinkSpec):
        self.network = network
        self.hop = hop
        self.index = index
        self.link = link
        self.left_slot = network.nodes[hop].memory[2 * index]
        self.right_slot = network.nodes[hop + 1].memory[2 * index + 1]
        self.entity = f"hop{hop}.conn{index}"
        self.generated = 0

    def try_start(self) -> bool:
        if not (self.left_slot.free and self.right_slot.free):
            return False
        self.left_slot.reserved = self.right_slot.reserved = True
        self.network.engine.schedule(
            self.link.arrival_delay_ns, "pair_ready", f"hop{self.hop}", self.index, self._arrive
        )
        return True

    def _arrive(self, ev: "Event") -> None:
        net = self.network
        now = net.engine.now
        state = sample_link_state(self.link, net.engine.rng(self.entity))
        self.generated += 1
        deadline = now + net.config.coherence_time_ns
        for slot in (self.left_slot, self.right_slot):
            slot.reserved = False
            slot.stored_at = now
            slot.coherence_deadline = deadline
        pair = net.new_pair(
            left=(self.hop, self.left_slot.position),
            right=(self.hop + 1, self.right_slot.position),
            state=state,
        )
        if net.on_pair_generated is not None:
            net.on_pair_generated(self, pair)


class Network:
    """Runtime network inside one engine: nodes, memories, EPR sources."""

    def __init__(self, config: NetworkConfig, engine: "Engine"):
        self.config = config
        self.engine = engine
        self.topology = build_topology(config)
        self.nodes = [Node(spec) for spec in self.topology.nodes]
        self.connections: list[list[QuantumConnection]] = [
            [QuantumConnection(self, k, j, link) for j in range(config.connections_per_hop)]
            for k, link in enumerate(self.topology.edges)
        ]
        self.on_discard: list[Callable[[EntangledPair, str], None]] = []
        self.on_pair_generated: Callable[[QuantumConnection, EntangledPair], None] | None = None
        self._next_pid = 0

    @property
    def decay_rate(self) -> float:
        return self.config.memory_decay_rate_per_ns

    def start(self) -> None:
        for hop in self.connections:
            for conn in hop:
                conn.try_start()

    def slot(self, where: tuple[int, int]) -> MemorySlot:
        node, pos = where
        return self.nodes[node].memory[pos]

    def connection_of(self, where: tuple[int, int]) -> QuantumConnection | None:
        node, pos = where
        hop = node if pos % 2 == 0 else node - 1
        if not 0 <= hop < len(self.connections):
            return None
        return self.connections[hop][pos // 2]

    def new_pair(self, left, right, state, **kw) -> EntangledPair:
        """Create a pair occupying ``left`` and ``right`` and arm its expiry."""
        now = self.engine.now
        self._next_pid += 1
        pair = EntangledPair(left, right, state, updated_at=now, created_at=now, pid=self._next_pid, **kw)
        for where in (left, right):
            slot = self.slot(where)
            if slot.pair is not None and slot.pair.alive:
                raise RuntimeError(f"slot {where} already holds a qubit")
            slot.pair = pair
        deadline = min(self.slot(left).coherence_deadline, self.slot(right).coherence_deadline)
        pair.expiry = self.engine.schedule_at(
            max(deadline, now), "pair_expired", f"node{left[0]}", pair.pid, lambda e, p=pair: self.expire(p)
        )
        return pair

    def _retire(self, pair: EntangledPair) -> None:
        pair.alive = False
        pair.busy = False
        if pair.expiry is not None:
            pair.expiry.cancel()

    def _free_slots(self, pair: EntangledPair, slots) -> None:
        for where in slots:
            slot = self.slot(where)
            if slot.pair is pair:
                slot.pair = None
        for where in slots:
            conn = self.connection_of(where)
            if conn is not None:
                conn.try_start()

    def release(self, pair: EntangledPair) -> None:
        """Consume ``pair``: both slots are freed and their sources restart."""
        self._retire(pair)
        self._free_slots(pair, (pair.left, pair.right))

    def merge(self, back: EntangledPair, fwd: EntangledPair, state: BellDiagonalState, **kw) -> EntangledPair:
        """Replace two adjacent pairs by the swapped pair spanning their outer slots."""
        if back.right[0] != fwd.left[0]:
            raise RuntimeError("pairs to merge do not meet at one node")
        self._retire(back)
        self._retire(fwd)
        for where in (back.left, fwd.right):
            self.slot(where).pair = None
        merged = self.new_pair(back.left, fwd.right, state, **kw)
        self._free_slots(back, (back.right,))
        self._free_slots(fwd, (fwd.left,))
        return merged

    def discard(self, pair: EntangledPair, reason: str) -> None:
        if not pair.alive:
            return
        self.release(pair)
        for cb in list(self.on_discard):
            cb(pair, reason)

    def expire(self, pair: EntangledPair) -> None:
        self.discard(pair, "expired")

    def pairs_on(self, node: int, positions: list[int] | range) -> list[EntangledPair]:
        out = []
        for p in positions:
            slot = self.nodes[node].memory[p]
            if slot.pair is not None and slot.pair.alive and slot.usable(self.engine.now):
                out.append(slot.pair)
        return out


def setup_network(config: NetworkConfig, engine: "Engine") -> Network:
    return Network(config, engine)
