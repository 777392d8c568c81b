import io
import math

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import bell_states
from entsim.bell import (
    BellDiagonalState,
    BellIndex,
    DegenerateError,
    DomainError,
    apply_memory_decay,
    decay_factor,
    dejmps_round,
    depolarized_state,
    fidelity_to_phi_plus,
    purification_curve,
    swap_compose,
    write_curve_csv,
)

PERFECT = BellDiagonalState.perfect()
MIXED = BellDiagonalState.maximally_mixed()


def test_bell_index_pauli_roundtrip():
    for b in BellIndex:
        assert BellIndex.from_pauli(*b.pauli) is b
    assert BellIndex.PSI_MINUS.pauli == (1, 1)


def test_invalid_coefficients_rejected():
    with pytest.raises(DomainError):
        BellDiagonalState((0.5, 0.5, 0.5, -0.5))
    with pytest.raises(DomainError):
        BellDiagonalState.from_coeffs([0.5, 0.5, 0.1])
    with pytest.raises(DomainError):
        BellDiagonalState.from_coeffs([0.5, 0.5, -0.1, 0.1])
    with pytest.raises(DegenerateError):
        BellDiagonalState.from_coeffs([0, 0, 0, 0])
    with pytest.raises(DomainError):
        BellDiagonalState.from_coeffs([math.nan, 0, 0, 1])


def test_from_coeffs_clamps_roundoff():
    s = BellDiagonalState.from_coeffs([1.0, -1e-14, 0.0, 0.0])
    assert s.coeffs == (1.0, 0.0, 0.0, 0.0)


def test_depolarized_state_values():
    assert depolarized_state(0.0) == PERFECT
    assert depolarized_state(1.0).isclose(MIXED)
    s = depolarized_state(0.2)
    assert s.fidelity == pytest.approx(0.85)
    assert s.coeffs[1:] == pytest.approx((0.05, 0.05, 0.05))
    with pytest.raises(DomainError):
        depolarized_state(1.2)


def test_swap_of_two_depolarized_links():
    s = swap_compose(depolarized_state(0.2), depolarized_state(0.2))
    assert s.fidelity == pytest.approx(0.73, abs=1e-12)


def test_swap_identity_and_absorbing():
    s = depolarized_state(0.3)
    assert swap_compose(PERFECT, s).isclose(s)
    assert swap_compose(s, MIXED).isclose(MIXED)


@given(bell_states(), bell_states())
def test_swap_commutes(a, b):
    assert swap_compose(a, b).isclose(swap_compose(b, a), atol=1e-12)


@given(bell_states(), bell_states(), bell_states())
def test_swap_associates(a, b, c):
    left = swap_compose(swap_compose(a, b), c)
    right = swap_compose(a, swap_compose(b, c))
    assert left.isclose(right, atol=1e-12)


@given(bell_states(), bell_states())
def test_swap_output_normalised(a, b):
    s = swap_compose(a, b)
    assert sum(s.coeffs) == pytest.approx(1.0, abs=1e-12)
    assert min(s.coeffs) >= 0.0


@given(bell_states())
def test_pauli_relabel_is_involution(s):
    for label in range(4):
        assert s.permuted(label).permuted(label) == s


@given(bell_states(), bell_states())
def test_swap_with_pauli_frames(a, b):
    # a Pauli on either input shows up as the same relabel of the output
    for la in range(4):
        for lb in range(4):
            out = swap_compose(a.permuted(la), b.permuted(lb))
            assert out.isclose(swap_compose(a, b).permuted(la ^ lb), atol=1e-12)


def test_dejmps_spot_value():
    out = dejmps_round(depolarized_state(0.2), depolarized_state(0.2))
    assert out.success_probability == pytest.approx(0.82, abs=1e-12)
    assert out.post_state.fidelity == pytest.approx(0.725 / 0.82, abs=1e-12)


def test_dejmps_perfect_pairs_always_succeed():
    out = dejmps_round(PERFECT, PERFECT)
    assert out.success_probability == 1.0
    assert out.post_state == PERFECT


def test_dejmps_mixed_is_fixed_point():
    out = dejmps_round(MIXED, MIXED)
    assert out.success_probability == pytest.approx(0.5)
    assert out.post_state.isclose(MIXED)


def test_dejmps_degenerate_raises():
    # Phi+ kept with Psi+ sacrificed never yields matching outcomes
    with pytest.raises(DegenerateError):
        dejmps_round(PERFECT, BellDiagonalState((0.0, 1.0, 0.0, 0.0)))


@given(bell_states(), bell_states())
@settings(max_examples=200)
def test_dejmps_outputs_valid(a, b):
    try:
        out = dejmps_round(a, b)
    except DegenerateError:
        return
    assert 0.0 < out.success_probability <= 1.0
    assert sum(out.post_state.coeffs) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("p", [0.05, 0.2, 0.4, 0.6, 0.66])
def test_dejmps_improves_below_two_thirds(p):
    s = depolarized_state(p)
    assert dejmps_round(s, s).post_state.fidelity > s.fidelity


def test_memory_decay():
    s = depolarized_state(0.1)
    assert apply_memory_decay(s, 0.0, 1e9) == s
    assert apply_memory_decay(s, 1e-3, 0) == s
    half = apply_memory_decay(PERFECT, math.log(2), 1.0)
    assert half.fidelity == pytest.approx(0.5 + 0.5 * 0.25)
    assert apply_memory_decay(PERFECT, 1.0, 1e6).isclose(MIXED)
    with pytest.raises(DomainError):
        decay_factor(-1.0, 1.0)


@given(bell_states())
def test_decay_composes(s):
    once = apply_memory_decay(s, 1e-3, 300)
    twice = apply_memory_decay(apply_memory_decay(s, 1e-3, 100), 1e-3, 200)
    assert once.isclose(twice, atol=1e-12)


def test_fidelity_accessor():
    s = BellDiagonalState((0.7, 0.1, 0.1, 0.1))
    assert fidelity_to_phi_plus(s) == s.fidelity == s[0] == 0.7
    assert np.allclose(s.as_array(), [0.7, 0.1, 0.1, 0.1])


def test_purification_curve_rows_and_csv():
    rows = purification_curve([0.0, 0.2], 2)
    assert [(p, r) for p, r, _ in rows] == [(0.0, 0), (0.0, 1), (0.0, 2), (0.2, 0), (0.2, 1), (0.2, 2)]
    assert all(f == 1.0 for p, _, f in rows if p == 0.0)
    assert rows[4][2] == pytest.approx(0.725 / 0.82)
    buf = io.StringIO()
    write_curve_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "p,round,fidelity"
    assert lines[5] == "0.200000,1,0.884146"
    with pytest.raises(DomainError):
        purification_curve([0.1], -1)


def _gains(p):
    fs = [f for _, _, f in purification_curve([p], 3)]
    return fs[2] - fs[1], fs[3] - fs[2]


def test_two_rounds_from_085():
    fs = [f for _, _, f in purification_curve([0.2], 2)]
    assert fs[2] == pytest.approx(0.971627, abs=1e-6)


@pytest.mark.parametrize("p", [0.05, 0.2, 0.35, 0.45, 0.46])
def test_third_round_gain_smaller_for_good_inputs(p):
    g2, g3 = _gains(p)
    assert g3 < g2


@pytest.mark.parametrize("p", [0.4602, 0.5, 0.6, 0.65])
def test_third_round_gain_larger_near_threshold(p):
    # weak inputs climb slowly at first; the crossover sits at p ~= 0.4601
    g2, g3 = _gains(p)
    assert g3 > g2
