"""
Entanglement distribution protocols for a linear chain.

One :class:`RepeaterProtocol` serves a FIFO queue of :class:`SwapRequest`.
For each request it starts

* a :class:`SwapProtocol` per switch and lane (swaps run left to right; a
  switch acts once its left neighbour's Bell-measurement result has reached
  it over the classical channel),
* a :class:`CorrectProtocol` per lane at the destination, which consumes
  exactly one correction message per switch,
* :class:`DistilProtocol` instances: one per hop before swapping (PS), or one
  end-to-end after all lanes are corrected (SP).

A *lane* is one swap chain. PS and unpurified requests use one lane over all
connections; SP with ``r`` rounds builds ``2**r`` lanes over disjoint
connection subsets and purifies their end-to-end pairs.

Pairs store their physical state plus the Pauli frame still owed by the
destination, so a missing correction shows up as a wrong fidelity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

from .bell import BellDiagonalState, BellIndex, dejmps_round, swap_compose
from .engine import AllOf, Engine, Event, EventPattern, WaitCondition
from .netmodel import EntangledPair, Network, NetworkConfig, Ordering, Policy, setup_network

logger = logging.getLogger(__name__)


class NoPairAvailable(LookupError):
    pass


@dataclass(frozen=True)
class PauliCorrection:
    """Accumulated X/Z parities; only parity matters."""

    x_count: int = 0
    z_count: int = 0

    @property
    def label(self) -> int:
        return int(BellIndex.from_pauli(self.x_count, self.z_count))

    def then(self, other: "PauliCorrection") -> "PauliCorrection":
        return PauliCorrection((self.x_count + other.x_count) & 1, (self.z_count + other.z_count) & 1)

    @classmethod
    def from_label(cls, label: int) -> "PauliCorrection":
        x, z = BellIndex(label).pauli
        return cls(x, z)

    def apply(self, state: BellDiagonalState) -> BellDiagonalState:
        return state.permuted(self.label)


@dataclass(frozen=True)
class CorrectionMessage:
    request_id: int
    hop_index: int
    x_parity: int
    z_parity: int
    lane: int = 0

    def wire(self) -> str:
        return f"{self.request_id},{self.hop_index},{self.x_parity},{self.z_parity}"

    @classmethod
    def parse(cls, line: str, lane: int = 0) -> "CorrectionMessage":
        rid, hop, x, z = (int(v) for v in line.strip().split(","))
        if x not in (0, 1) or z not in (0, 1):
            raise ValueError(f"parities must be bits: {line!r}")
        return cls(rid, hop, x, z, lane)

    def __str__(self) -> str:
        return self.wire()

    @property
    def correction(self) -> PauliCorrection:
        return PauliCorrection(self.x_parity, self.z_parity)


@dataclass(frozen=True)
class SwapRequest:
    request_id: int
    source: int
    destination: int
    policy: Policy = Policy.OQF
    ordering: Ordering = Ordering.PS
    distillation_rounds: int = 0


@dataclass
class TrialRecord:
    request_id: int
    succeeded: bool
    end_to_end_fidelity: float
    completion_time_ns: int
    swaps_performed: int = 0
    distillation_attempts: int = 0
    distillation_successes: int = 0
    pairs_consumed: int = 0
    corrections_consumed: int = 0
    failure_reason: str = ""


def select_best_pair(candidates: Sequence[tuple[Hashable, float]]):
    """Key of the candidate with the highest estimated fidelity.

    Ties go to the smallest key, so with slot indices as keys the lowest slot
    wins.
    """
    if not candidates:
        raise NoPairAvailable("no candidate pairs")
    best_key, best_f = None, None
    for key, f in sorted(candidates, key=lambda c: c[0]):
        if best_f is None or f > best_f:
            best_key, best_f = key, f
    return best_key


# -- per-request bookkeeping -----------------------------------------------------


@dataclass(eq=False)
class Lane:
    index: int
    connections: list[int]
    e2e_pair: EntangledPair | None = None
    corrected: bool = False
    swapped_at: dict[int, bool] = field(default_factory=dict)

    @property
    def forward_positions(self) -> list[int]:
        return [2 * j for j in self.connections]

    @property
    def backward_positions(self) -> list[int]:
        return [2 * j + 1 for j in self.connections]


class Protocol:
    def __init__(self, run: "RequestRun", name: str):
        self.run = run
        self.name = name
        self._waiting = False

    @property
    def engine(self) -> Engine:
        return self.run.engine

    @property
    def network(self) -> Network:
        return self.run.network

    @property
    def active(self) -> bool:
        return self.run.active

    def start(self) -> None:
        self.poke()

    def poke(self) -> None:
        raise NotImplementedError

    def wait(self, condition: WaitCondition) -> None:
        if self._waiting or not self.active:
            return
        self._waiting = True
        self.engine.await_(condition, self._woken)

    def _woken(self, events: list[Event]) -> None:
        self._waiting = False
        if self.active:
            self.poke()


def _hop_changed(hop: int) -> WaitCondition:
    return EventPattern("pair_ready", f"hop{hop}") | EventPattern("distil_done", f"hop{hop}")


class SwapProtocol(Protocol):
    """Bell measurement at one switch for one lane."""

    def __init__(self, run: "RequestRun", node: int, lane: Lane):
        super().__init__(run, f"swap.node{node}.lane{lane.index}")
        self.node = node
        self.lane = lane
        self.left_notice = node == run.request.source + 1
        self.done = False

    def receive_notice(self, ev: Event) -> None:
        self.left_notice = True

    def poke(self) -> None:
        if self.done or not self.active:
            return
        run = self.run
        needed = []
        back = run.backward_candidates(self.node, self.lane)
        fwd = run.forward_candidates(self.node, self.lane)
        wait_all = run.request.policy is Policy.BEST and run.swap_rounds == 0
        if self.node == run.request.source + 1:
            if not back or (wait_all and not run.lane_filled(self.node - 1, self.lane)):
                needed.append(_hop_changed(self.node - 1))
        elif not self.left_notice:
            # the backward pair is produced by the left neighbour's swap
            needed.append(EventPattern("swap_notice", f"node{self.node}"))
        elif not back:
            raise RuntimeError(f"{self.name}: notified but no pair reaches the source")
        if not fwd or (wait_all and not run.lane_filled(self.node, self.lane)):
            needed.append(_hop_changed(self.node))
        if needed:
            self.wait(AllOf(*needed))
            return
        b, f = self.choose(back, fwd)
        self.perform(b, f)

    def choose(self, back: list[EntangledPair], fwd: list[EntangledPair]):
        run = self.run
        policy = run.request.policy
        if policy is Policy.BEST:
            now, rate = self.engine.now, self.network.decay_rate
            cands = []
            for b in back:
                for f in fwd:
                    est = swap_compose(b.corrected_at(now, rate), f.corrected_at(now, rate)).fidelity
                    cands.append(((b.right[1], f.left[1]), est))
            bpos, fpos = select_best_pair(cands)
            return (
                next(b for b in back if b.right[1] == bpos),
                next(f for f in fwd if f.left[1] == fpos),
            )
        return run.by_age(back, self.node), run.by_age(fwd, self.node)

    def perform(self, back: EntangledPair, fwd: EntangledPair) -> None:
        run, net, now = self.run, self.network, self.engine.now
        rate = net.decay_rate
        a = back.advance(now, rate).permuted(back.frame)
        b = fwd.advance(now, rate).permuted(fwd.frame)
        corrected = swap_compose(a, b)
        outcome = int(self.engine.rng(f"node{self.node}").integers(4))
        frame = back.frame ^ fwd.frame ^ outcome
        merged = net.merge(
            back,
            fwd,
            corrected.permuted(frame),
            frame=frame,
            rounds=max(back.rounds, fwd.rounds),
            links=back.links + fwd.links,
            owner=run,
        )
        self.done = True
        run.swaps += 1
        self.lane.swapped_at[self.node] = True
        if merged.right[0] == run.request.destination:
            self.lane.e2e_pair = merged
        bits = PauliCorrection.from_label(outcome)
        msg = CorrectionMessage(run.request.request_id, self.node, bits.x_count, bits.z_count, self.lane.index)
        run.send_correction(self.node, msg)
        nxt = self.node + 1
        if nxt != run.request.destination:
            peer = run.swappers[(nxt, self.lane.index)]
            self.engine.schedule(
                run.hop_delay(self.node), "swap_notice", f"node{nxt}", msg, peer.receive_notice
            )


class CorrectProtocol(Protocol):
    """Destination side: collect one correction per switch, then fix the Pauli frame."""

    def __init__(self, run: "RequestRun", lane: Lane):
        super().__init__(run, f"correct.lane{lane.index}")
        self.lane = lane
        self.messages: list[CorrectionMessage] = []
        self.expected = run.request.destination - run.request.source - 1

    def receive(self, ev: Event) -> None:
        if not self.active:
            return
        self.messages.append(ev.payload)
        self.run.log_message(ev.payload)

    def poke(self) -> None:
        if self.lane.corrected or not self.active:
            return
        run = self.run
        if self.expected == 0 and self.lane.e2e_pair is None:
            cands = run.forward_candidates(run.request.source, self.lane)
            wait_all = run.request.policy is Policy.BEST and run.swap_rounds == 0
            if not cands or (wait_all and not run.lane_filled(run.request.source, self.lane)):
                self.wait(_hop_changed(run.request.source))
                return
            pair = self.choose_direct(cands)
            pair.owner = run
            self.lane.e2e_pair = pair
        if len(self.messages) < self.expected:
            self.wait(EventPattern("correction", f"node{run.request.destination}"))
            return
        fix = PauliCorrection()
        for m in self.messages:
            fix = fix.then(m.correction)
        pair = self.lane.e2e_pair
        pair.state = fix.apply(pair.state)
        pair.frame ^= fix.label
        if pair.frame != 0:
            raise RuntimeError(f"request {run.request.request_id}: Pauli frame {pair.frame} left after correction")
        run.corrections_consumed += len(self.messages)
        self.lane.corrected = True
        run.lane_done(self.lane)

    def choose_direct(self, cands: list[EntangledPair]) -> EntangledPair:
        run = self.run
        if run.request.policy is Policy.BEST:
            now, rate = self.engine.now, self.network.decay_rate
            pos = select_best_pair([(p.left[1], p.corrected_at(now, rate).fidelity) for p in cands])
            return next(p for p in cands if p.left[1] == pos)
        return run.by_age(cands, run.request.source)


class DistilProtocol(Protocol):
    """DEJMPS rounds, either on one hop (PS) or on the end-to-end pairs (SP)."""

    def __init__(self, run: "RequestRun", hop: int | None, lane: Lane | None = None):
        super().__init__(run, f"distil.hop{hop}" if hop is not None else "distil.e2e")
        self.hop = hop
        self.lane = lane
        self.rounds = run.request.distillation_rounds
        self.e2e_pairs: list[EntangledPair] = []
        self.finished = False

    @property
    def source(self) -> str:
        return f"hop{self.hop}" if self.hop is not None else "e2e"

    def rtt(self) -> int:
        run = self.run
        if self.hop is not None:
            return 2 * run.hop_delay(self.hop)
        return 2 * sum(run.hop_delay(k) for k in range(run.request.source, run.request.destination))

    def pool(self) -> list[EntangledPair]:
        if self.hop is None:
            return [p for p in self.e2e_pairs if p.alive]
        return self.run.hop_pairs(self.hop, self.lane)

    def poke(self) -> None:
        if self.finished or not self.active:
            return
        run = self.run
        if self.hop is not None and run.hop_consumed(self.hop):
            self.finished = True
            return
        target = 2**self.rounds
        committed = [p for p in self.pool() if p.owner is run]
        if self.hop is not None:
            self.commit_raw(committed, target)
            committed = [p for p in self.pool() if p.owner is run]
        # combine equal-level pairs, highest level first
        for level in range(self.rounds - 1, -1, -1):
            cands = [p for p in committed if p.rounds == level and not p.busy]
            if len(cands) >= 2:
                ranked = run.rank(cands, self.node)
                self.perform(ranked[0], ranked[1])
                return self.poke()
        if self.hop is None:
            done = [p for p in committed if p.rounds == self.rounds and not p.busy]
            if len(committed) == 1 and done:
                self.finished = True
                run.succeed(done[0])
                return
            self.wait(EventPattern("distil_done", "e2e"))
        else:
            self.wait(_hop_changed(self.hop))

    @property
    def node(self) -> int:
        return self.hop if self.hop is not None else self.run.request.source

    def commit_raw(self, committed: list[EntangledPair], target: int) -> None:
        """Reserve fresh pairs on the hop until the committed ones embody ``target`` links."""
        run = self.run
        worth = sum(p.links for p in committed)
        if worth >= target:
            return
        raw = [p for p in self.pool() if p.owner is None and p.rounds == 0 and not p.busy]
        if run.request.policy is Policy.BEST and not run.lane_filled(self.hop, self.lane):
            return
        for p in run.rank(raw, self.hop)[: target - worth]:
            p.owner = run

    def perform(self, keep: EntangledPair, sac: EntangledPair) -> None:
        run, net, now = self.run, self.network, self.engine.now
        rate = net.decay_rate
        a = keep.advance(now, rate).permuted(keep.frame)
        b = sac.advance(now, rate).permuted(sac.frame)
        outcome = dejmps_round(a, b)
        success = self.engine.rng(f"distil.{self.source}").random() < outcome.success_probability
        run.distil_attempts += 1
        sacrificed_links = sac.links
        net.release(sac)
        if self.hop is None:
            self.e2e_pairs.remove(sac)
        keep.owner = run
        keep.busy = True
        if success:
            keep.state = outcome.post_state.permuted(keep.frame)
            keep.rounds += 1
        keep.links += sacrificed_links
        self.engine.schedule(self.rtt(), "distil_done", self.source, success, lambda ev, k=keep: self._done(k, ev.payload))

    def _done(self, keep: EntangledPair, success: bool) -> None:
        run = self.run
        if not keep.alive:
            return
        keep.busy = False
        if not run.active:
            return
        if success:
            run.distil_successes += 1
            return
        run.fail("distillation")


class RequestRun:
    """State of one request while it is being served."""

    def __init__(self, coordinator: "RepeaterProtocol", request: SwapRequest):
        self.coordinator = coordinator
        self.network = coordinator.network
        self.engine = coordinator.network.engine
        self.request = request
        self.active = False
        self.started_at = 0
        self.swaps = 0
        self.distil_attempts = 0
        self.distil_successes = 0
        self.corrections_consumed = 0
        self.lost_links = 0
        cfg = self.network.config
        rounds = request.distillation_rounds
        self.sp = request.ordering is Ordering.SP and rounds > 0
        self.ps = request.ordering is Ordering.PS and rounds > 0
        n_lanes = 2**rounds if self.sp else 1
        conns = range(cfg.connections_per_hop)
        self.lanes = [Lane(c, [j for j in conns if j % n_lanes == c]) for c in range(n_lanes)]
        self.swap_rounds = rounds if self.ps else 0
        self.swappers: dict[tuple[int, int], SwapProtocol] = {}
        self.correctors: list[CorrectProtocol] = []
        self.distillers: list[DistilProtocol] = []
        self.e2e_distiller: DistilProtocol | None = None

    # -- helpers used by the sub-protocols

    def hop_delay(self, hop: int) -> int:
        return self.network.topology.edges[hop].classical_delay_ns

    def send_correction(self, switch: int, msg: CorrectionMessage) -> None:
        dest = self.request.destination
        delay = sum(self.hop_delay(k) for k in range(switch, dest))
        self.engine.schedule(delay, "correction", f"node{dest}", msg, self.correctors[msg.lane].receive)

    def log_message(self, msg: CorrectionMessage) -> None:
        logger.debug("correction %s", msg.wire())

    def rank(self, pairs: list[EntangledPair], node: int) -> list[EntangledPair]:
        """Order candidates by the request policy; ties go to the lower slot."""

        def where(p: EntangledPair) -> tuple[int, int]:
            return p.left if p.left[0] == node else p.right

        if self.request.policy is Policy.BEST:
            now, rate = self.engine.now, self.network.decay_rate
            return sorted(pairs, key=lambda p: (-p.corrected_at(now, rate).fidelity, where(p)[1]))
        sign = 1 if self.request.policy is Policy.OQF else -1
        return sorted(pairs, key=lambda p: (sign * self.network.slot(where(p)).stored_at, where(p)[1]))

    def by_age(self, pairs: list[EntangledPair], node: int) -> EntangledPair:
        return self.rank(pairs, node)[0]

    def _ok(self, p: EntangledPair) -> bool:
        return p.alive and not p.busy and (p.owner is None or p.owner is self)

    def forward_candidates(self, node: int, lane: Lane) -> list[EntangledPair]:
        """Swap-ready pairs on the hop leaving ``node``."""
        out = []
        for p in self.network.pairs_on(node, lane.forward_positions):
            if p.left[0] == node and p.right[0] == node + 1 and p.rounds == self.swap_rounds and self._ok(p):
                out.append(p)
        return out

    def backward_candidates(self, node: int, lane: Lane) -> list[EntangledPair]:
        """Pairs ending at ``node`` whose other half is at the request source."""
        out = []
        for p in self.network.pairs_on(node, lane.backward_positions):
            if p.right[0] == node and p.left[0] == self.request.source and p.rounds == self.swap_rounds and self._ok(p):
                out.append(p)
        return out

    def hop_pairs(self, hop: int, lane: Lane) -> list[EntangledPair]:
        return [
            p
            for p in self.network.pairs_on(hop, lane.forward_positions)
            if p.left[0] == hop and p.right[0] == hop + 1 and (p.owner is None or p.owner is self)
        ]

    def lane_filled(self, hop: int, lane: Lane) -> bool:
        """Every lane slot on ``hop`` holds a live pair (BEST selection waits for this)."""
        net = self.network
        for j in lane.connections:
            a = net.nodes[hop].memory[2 * j]
            b = net.nodes[hop + 1].memory[2 * j + 1]
            if not (a.usable(self.engine.now) and b.usable(self.engine.now)):
                return False
        return True

    def hop_consumed(self, hop: int) -> bool:
        lane = self.lanes[0]
        if hop == self.request.source:
            return bool(lane.swapped_at.get(hop + 1)) or lane.e2e_pair is not None
        return bool(lane.swapped_at.get(hop))

    # -- lifecycle

    def start(self) -> None:
        self.active = True
        self.started_at = self.engine.now
        req = self.request
        for lane in self.lanes:
            self.correctors.append(CorrectProtocol(self, lane))
            for node in range(req.source + 1, req.destination):
                self.swappers[(node, lane.index)] = SwapProtocol(self, node, lane)
        if self.ps:
            self.distillers = [DistilProtocol(self, hop, self.lanes[0]) for hop in range(req.source, req.destination)]
        self.network.on_discard.append(self._on_discard)
        for proto in [*self.distillers, *self.swappers.values(), *self.correctors]:
            if self.active:
                proto.start()

    def _on_discard(self, pair: EntangledPair, reason: str) -> None:
        if self.active and pair.owner is self:
            self.lost_links += pair.links
            self.fail(reason)

    def lane_done(self, lane: Lane) -> None:
        if not all(l.corrected for l in self.lanes):
            return
        if not self.sp:
            self.succeed(lane.e2e_pair)
            return
        self.e2e_distiller = DistilProtocol(self, None)
        self.e2e_distiller.e2e_pairs = [l.e2e_pair for l in self.lanes]
        self.e2e_distiller.start()

    def _owned(self) -> list[EntangledPair]:
        seen = {}
        for node in self.network.nodes:
            for slot in node.memory:
                p = slot.pair
                if p is not None and p.alive and p.owner is self:
                    seen[p.pid] = p
        return [seen[k] for k in sorted(seen)]

    def _finish(self, record: TrialRecord) -> None:
        self.active = False
        self.network.on_discard.remove(self._on_discard)
        self.coordinator.record(record)

    def succeed(self, pair: EntangledPair) -> None:
        now = self.engine.now
        fidelity = pair.corrected_at(now, self.network.decay_rate).fidelity
        if pair.frame != 0:
            raise RuntimeError("delivered pair still carries an uncorrected Pauli frame")
        links = pair.links
        self.network.release(pair)
        for p in self._owned():
            self.network.release(p)
        self._finish(self._record(True, fidelity, links + self.lost_links))

    def fail(self, reason: str) -> None:
        if not self.active:
            return
        links = self.lost_links
        for p in self._owned():
            links += p.links
            self.network.release(p)
        self._finish(self._record(False, float("nan"), links, reason))

    def _record(self, ok: bool, fidelity: float, links: int, reason: str = "") -> TrialRecord:
        return TrialRecord(
            request_id=self.request.request_id,
            succeeded=ok,
            end_to_end_fidelity=fidelity,
            completion_time_ns=self.engine.now - self.started_at,
            swaps_performed=self.swaps,
            distillation_attempts=self.distil_attempts,
            distillation_successes=self.distil_successes,
            pairs_consumed=links,
            corrections_consumed=self.corrections_consumed,
            failure_reason=reason,
        )


class RepeaterProtocol:
    """Serves requests one at a time, in arrival order."""

    def __init__(self, network: Network, requests: Sequence[SwapRequest]):
        self.network = network
        self.queue = list(requests)
        self.records: list[TrialRecord] = []
        self.current: RequestRun | None = None
        self.on_record: Callable[[TrialRecord], None] | None = None
        ids = [r.request_id for r in requests]
        if len(set(ids)) != len(ids):
            raise ValueError("request ids must be unique")

    def start(self) -> None:
        self.network.start()
        self._next()

    def _next(self) -> None:
        if not self.queue:
            self.current = None
            self.network.engine.stop()
            return
        self.current = RequestRun(self, self.queue.pop(0))
        self.current.start()

    def record(self, rec: TrialRecord) -> None:
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)
        self._next()

    def close(self) -> None:
        """Mark whatever is still pending at the horizon as incomplete."""
        pending = ([self.current.request] if self.current is not None else []) + self.queue
        if self.current is not None and self.current.active:
            run = self.current
            run.active = False
            self.records.append(run._record(False, float("nan"), run.lost_links, "horizon"))
            pending = self.queue
        for req in pending:
            self.records.append(TrialRecord(req.request_id, False, float("nan"), 0, failure_reason="horizon"))
        self.queue = []
        self.current = None


def default_requests(config: NetworkConfig) -> list[SwapRequest]:
    return [
        SwapRequest(
            request_id=i,
            source=0,
            destination=config.num_nodes - 1,
            policy=config.policy,
            ordering=config.ordering,
            distillation_rounds=config.distillation_rounds,
        )
        for i in range(config.num_requests)
    ]


@dataclass
class TrialResult:
    records: list[TrialRecord]
    events_processed: int
    final_clock: int
    network: Network = field(repr=False)


def run_trial(config: NetworkConfig, seed: int | None = None, trace=None, requests=None) -> TrialResult:
    """Build a fresh network, serve the requests and return their records."""
    engine = Engine(config.seed if seed is None else seed, trace=trace)
    network = setup_network(config, engine)
    coordinator = RepeaterProtocol(network, requests if requests is not None else default_requests(config))
    coordinator.start()
    stats = engine.run_until(config.runtime_ns)
    coordinator.close()
    return TrialResult(coordinator.records, stats.events_processed, stats.clock, network)


def orchestrate(request: SwapRequest, config: NetworkConfig, seed: int | None = None) -> TrialRecord:
    return run_trial(config, seed, requests=[request]).records[0]
