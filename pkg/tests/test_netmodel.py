import json
import math

import numpy as np
import pytest

from conftest import chain_config
from entsim.bell import BellDiagonalState
from entsim.engine import Engine
from entsim.netmodel import (
    ConfigError,
    LengthSquaredDepolarization,
    LinkSpec,
    NetworkConfig,
    PmdDepolarization,
    Role,
    Sampling,
    build_topology,
    depolarization_probability,
    expected_link_fidelity,
    fiber_delay_ns,
    length_squared_depolarization_probability,
    pmd_destruction_probability,
    sample_channel_depolarization,
    sample_link_state,
    setup_network,
)

RAW = {
    "num_switches": 1,
    "distances_km": [10, 20],
    "num_memory_positions": 4,
    "source_delay_ns": 1,
    "noise_model": {"kind": "pmd", "pmd_coefficient": 0.1},
    "memory_decay_rate_per_ns": 1e-7,
    "coherence_time_ns": 1000000,
    "seed": 3,
    "runtime_ns": 10**9,
}


def test_fiber_delay():
    assert fiber_delay_ns(1.0) == 5000
    assert fiber_delay_ns(100.0) == 500000
    link = LinkSpec(10.0, source_delay_ns=3)
    assert link.arrival_delay_ns == 50003 and link.classical_delay_ns == 50000


def test_config_roundtrip(tmp_path):
    cfg = NetworkConfig.from_dict(RAW)
    assert cfg.num_nodes == 3 and cfg.connections_per_hop == 2
    path = tmp_path / "net.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = NetworkConfig.load(path)
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.replace(seed=4).digest() != cfg.digest()


@pytest.mark.parametrize(
    "change",
    [
        {"num_memory_positions": 3},
        {"num_memory_positions": 0},
        {"distances_km": [10]},
        {"distances_km": [10, -1]},
        {"coherence_time_ns": 0},
        {"distillation_rounds": 2},  # needs 4 connections, only 2
        {"policy": "RANDOM"},
        {"noise_model": {"kind": "pmd"}},
        {"noise_model": {"kind": "weird"}},
        {"noise_model": {"kind": "pmd", "pmd_coefficient": 0.1, "bogus": 1}},
        {"noise_model": {"kind": "pmd", "pmd_coefficient": 0.1, "calibrated_at_km": 5}},
        {"extra_field": 1},
    ],
)
def test_config_rejects(change):
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({**RAW, **change})


def test_config_missing_field():
    raw = dict(RAW)
    del raw["memory_decay_rate_per_ns"]
    with pytest.raises(ConfigError, match="memory_decay_rate_per_ns"):
        NetworkConfig.from_dict(raw)


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        NetworkConfig.load(p)


def test_calibrated_noise_from_config():
    cfg = NetworkConfig.from_dict({**RAW, "noise_model": {"kind": "pmd", "calibrated_at_km": 150, "destruction_probability": 0.3}})
    assert pmd_destruction_probability(LinkSpec(150, cfg.noise_model)) == pytest.approx(0.3, abs=1e-12)


@pytest.mark.parametrize("q", [0.1, 0.5, 0.8])
def test_pmd_calibration(q):
    noise = PmdDepolarization.calibrated(150.0, q)
    assert pmd_destruction_probability(LinkSpec(150.0, noise)) == pytest.approx(q, abs=1e-12)


def test_pmd_probability_grows_with_length():
    noise = PmdDepolarization.calibrated(150.0, 0.5)
    ps = [pmd_destruction_probability(LinkSpec(L, noise)) for L in (10, 50, 150, 300, 1000)]
    assert ps == sorted(ps) and ps[2] == pytest.approx(0.5)


def test_pmd_sampling_frequency():
    noise = PmdDepolarization.calibrated(100.0, 0.3)
    link = LinkSpec(100.0, noise)
    rng = np.random.default_rng(1)
    hits = sum(sample_channel_depolarization(link, rng) for _ in range(20000))
    assert hits / 20000 == pytest.approx(0.3, abs=0.015)


def test_length_squared_model():
    noise = LengthSquaredDepolarization(p_in=0.1, eta=0.001)
    link = LinkSpec(20.0, noise)
    expected = 1 - 0.9 * 10 ** (-400 * 0.001 / 10)
    assert length_squared_depolarization_probability(link) == pytest.approx(expected)
    assert depolarization_probability(link) == pytest.approx(expected)
    with pytest.raises(ConfigError):
        LengthSquaredDepolarization(p_in=1.5, eta=0)


def test_link_state_sampling_modes():
    rng = np.random.default_rng(0)
    assert sample_link_state(LinkSpec(10.0), rng) == BellDiagonalState.perfect()
    mean = PmdDepolarization.calibrated(10.0, 0.4, sampling=Sampling.MEAN)
    s = sample_link_state(LinkSpec(10.0, mean), rng)
    assert s.fidelity == pytest.approx(1 - 0.75 * 0.4)
    binary = PmdDepolarization.calibrated(10.0, 0.4)
    states = {sample_link_state(LinkSpec(10.0, binary), rng).coeffs for _ in range(50)}
    assert states == {(1.0, 0.0, 0.0, 0.0), (0.25, 0.25, 0.25, 0.25)}


def test_topology():
    cfg = chain_config(num_nodes=4, m=4, noise=PmdDepolarization.calibrated(20.0, 0.2))
    topo = build_topology(cfg)
    assert [n.role for n in topo.nodes] == [Role.END_NODE, Role.SWITCH, Role.SWITCH, Role.END_NODE]
    assert topo.neighbours(0) == [1] and topo.neighbours(2) == [1, 3]
    assert topo.edge_weight == pytest.approx([expected_link_fidelity(e) for e in topo.edges])
    assert topo.edge_weight[0] == pytest.approx(1 - 0.75 * 0.2)


def test_sources_fill_memories_and_regenerate():
    cfg = chain_config(num_nodes=3, m=4, distance_km=10.0)
    eng = Engine(1)
    net = setup_network(cfg, eng)
    net.start()
    eng.run_until(50001)
    pairs = net.pairs_on(0, [0, 2])
    assert len(pairs) == 2 and all(p.state == BellDiagonalState.perfect() for p in pairs)
    assert net.slot((1, 1)).pair is pairs[0]
    net.release(pairs[0])
    assert net.slot((0, 0)).reserved  # the source restarted
    eng.run_until(100002)
    assert net.slot((0, 0)).pair is not None and net.slot((0, 0)).pair.alive


def test_pairs_expire_and_notify():
    cfg = chain_config(num_nodes=2, m=2, distance_km=1.0, coherence_time_ns=1000)
    eng = Engine(1)
    net = setup_network(cfg, eng)
    reasons = []
    net.on_discard.append(lambda p, r: reasons.append((eng.now, r)))
    net.start()
    eng.run_until(5001 + 1000)
    assert reasons == [(6001, "expired")]


def test_merge_keeps_outer_slots():
    cfg = chain_config(num_nodes=3, m=2, distance_km=10.0)
    eng = Engine(1)
    net = setup_network(cfg, eng)
    net.start()
    eng.run_until(50001)
    back, fwd = net.pairs_on(0, [0])[0], net.pairs_on(1, [0])[0]
    merged = net.merge(back, fwd, BellDiagonalState.perfect(), owner="x")
    assert (merged.left, merged.right) == ((0, 0), (2, 1))
    assert not back.alive and not fwd.alive
    assert net.slot((0, 0)).pair is merged
    # the inner slots are free, but their sources also need the outer slots
    assert net.slot((1, 1)).free and net.slot((1, 0)).free


def test_pair_decay_applies_to_both_halves():
    cfg = chain_config(num_nodes=2, m=2, distance_km=1.0, memory_decay_rate_per_ns=1e-4)
    eng = Engine(1)
    net = setup_network(cfg, eng)
    net.start()
    eng.run_until(5001)
    pair = net.pairs_on(0, [0])[0]
    est = pair.corrected_at(5001 + 1000, 1e-4)
    assert est.fidelity == pytest.approx(0.25 + 0.75 * math.exp(-2 * 1e-4 * 1000))
    assert pair.state == BellDiagonalState.perfect()  # peeking does not mutate
