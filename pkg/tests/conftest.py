import numpy as np
import pytest
from hypothesis import strategies as st

from entsim.bell import BellDiagonalState
from entsim.netmodel import NetworkConfig, NoNoise


def random_bell(rng: np.random.Generator) -> BellDiagonalState:
    return BellDiagonalState.from_coeffs(rng.dirichlet(np.ones(4)))


@st.composite
def bell_states(draw):
    w = [draw(st.floats(0.0, 1.0, allow_nan=False)) for _ in range(4)]
    if sum(w) < 1e-6:
        w[0] = 1.0
    return BellDiagonalState.from_coeffs(w)


def chain_config(num_nodes=3, distance_km=20.0, m=2, noise=None, **kw) -> NetworkConfig:
    params = dict(
        num_switches=num_nodes - 2,
        distances_km=[distance_km] * (num_nodes - 1),
        num_memory_positions=m,
        source_delay_ns=1.0,
        noise_model=noise if noise is not None else NoNoise(),
        memory_decay_rate_per_ns=0.0,
        coherence_time_ns=10**9,
        seed=7,
        runtime_ns=10**10,
    )
    params.update(kw)
    return NetworkConfig(**params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fiber_ns(km: float) -> int:
    return int(round(km * 5000))


def decay_both_halves(s, rate, dt):
    from entsim.bell import apply_memory_decay

    return apply_memory_decay(apply_memory_decay(s, rate, dt), rate, dt)


def predicted_chain(link_states, distances_km, source_delay_ns, rate):
    """Closed-form sequential-swap timeline and the resulting fidelity.

    Every hop delivers its first pair at ``source_delay + L/c``. Switch ``i``
    swaps once both of its pairs exist and the previous switch's notice has
    travelled one hop; each correction then travels to the destination.
    Returns ``(fidelity, completion_ns)``.
    """
    from entsim.bell import swap_compose

    arrivals = [int(round(source_delay_ns + fiber_ns(d))) for d in distances_km]
    hops = [fiber_ns(d) for d in distances_km]
    n_hops = len(distances_km)
    if n_hops == 1:
        return link_states[0].fidelity, arrivals[0]
    t_prev = max(arrivals[0], arrivals[1])
    state = swap_compose(
        decay_both_halves(link_states[0], rate, t_prev - arrivals[0]),
        decay_both_halves(link_states[1], rate, t_prev - arrivals[1]),
    )
    done = t_prev + sum(hops[1:])
    for i in range(2, n_hops):
        t = max(t_prev + hops[i - 1], arrivals[i])
        state = swap_compose(
            decay_both_halves(state, rate, t - t_prev),
            decay_both_halves(link_states[i], rate, t - arrivals[i]),
        )
        done = max(done, t + sum(hops[i:]))
        t_prev = t
    return decay_both_halves(state, rate, done - t_prev).fidelity, done


def pmd_probability(coefficient, length_km, tau=1.6, rel=1.0):
    from statistics import NormalDist

    mu = coefficient * length_km**0.5
    return 1.0 - NormalDist(mu, rel * mu).cdf(tau)
