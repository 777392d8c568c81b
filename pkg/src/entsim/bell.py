"""
Closed-form algebra of Bell-diagonal two-qubit states.

A Bell-diagonal state is stored as four probabilities over the Bell basis in
the order (Phi+, Psi+, Phi-, Psi-). Every Bell state is ``(I (x) X^x Z^z)|Phi+>``
and its index is ``x + 2*z``, so XOR on indices is the Klein four-group
(Pauli label) product. All noise and protocol maps used by the simulator keep
states Bell-diagonal, which is why no density matrix appears here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

NORM_TOL = 1e-12
CLAMP_TOL = 1e-12


class DomainError(ValueError):
    """A parameter lies outside its physical range."""


class DegenerateError(ArithmeticError):
    """A normalisation constant vanished."""


class BellIndex(IntEnum):
    PHI_PLUS = 0
    PSI_PLUS = 1
    PHI_MINUS = 2
    PSI_MINUS = 3

    @property
    def pauli(self) -> tuple[int, int]:
        """(x, z) exponents of the Pauli that maps Phi+ onto this state."""
        return int(self) & 1, int(self) >> 1

    @classmethod
    def from_pauli(cls, x: int, z: int) -> "BellIndex":
        return cls((x & 1) | ((z & 1) << 1))


def _normalized(values: Iterable[float]) -> tuple[float, float, float, float]:
    v = np.asarray(list(values), dtype=float)
    if v.shape != (4,):
        raise DomainError(f"expected 4 Bell coefficients, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"non-finite Bell coefficients {v}")
    if np.any(v < -CLAMP_TOL):
        raise DomainError(f"negative Bell coefficient in {v}")
    v = np.clip(v, 0.0, None)
    total = v.sum()
    if total <= 0.0:
        raise DegenerateError("Bell coefficients sum to zero")
    v = v / total
    return tuple(float(x) for x in v)  # type: ignore[return-value]


@dataclass(frozen=True)
class BellDiagonalState:
    """Probabilities of (Phi+, Psi+, Phi-, Psi-) for one entangled pair."""

    coeffs: tuple[float, float, float, float]

    def __post_init__(self):
        c = self.coeffs
        if len(c) != 4 or any(x < 0.0 for x in c) or abs(sum(c) - 1.0) > NORM_TOL:
            raise DomainError(f"invalid Bell-diagonal coefficients {c}")

    @classmethod
    def from_coeffs(cls, values: Iterable[float]) -> "BellDiagonalState":
        """Build a state after clamping round-off negatives and renormalising."""
        return cls(_normalized(values))

    @classmethod
    def perfect(cls) -> "BellDiagonalState":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def maximally_mixed(cls) -> "BellDiagonalState":
        return cls((0.25, 0.25, 0.25, 0.25))

    def __getitem__(self, index: int) -> float:
        return self.coeffs[int(index)]

    def as_array(self) -> np.ndarray:
        return np.array(self.coeffs)

    @property
    def fidelity(self) -> float:
        return self.coeffs[0]

    def permuted(self, label: int) -> "BellDiagonalState":
        """State after a Pauli with Bell label ``label`` acts on one qubit."""
        label = int(label) & 3
        if label == 0:
            return self
        return BellDiagonalState(tuple(self.coeffs[k ^ label] for k in range(4)))

    def isclose(self, other: "BellDiagonalState", atol: float = 1e-12) -> bool:
        return all(abs(a - b) <= atol for a, b in zip(self.coeffs, other.coeffs))


@dataclass(frozen=True)
class PurificationOutcome:
    success_probability: float
    post_state: BellDiagonalState


def fidelity_to_phi_plus(s: BellDiagonalState) -> float:
    return s.coeffs[0]


def depolarized_state(p: float) -> BellDiagonalState:
    """Phi+ after one qubit passed a depolarizing channel of probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"depolarizing probability {p} not in [0, 1]")
    q = p / 4.0
    return BellDiagonalState.from_coeffs((1.0 - 3.0 * q, q, q, q))


def decay_factor(rate_per_ns: float, elapsed_ns: float) -> float:
    if rate_per_ns < 0 or elapsed_ns < 0:
        raise DomainError(f"decay rate {rate_per_ns} and time {elapsed_ns} must be >= 0")
    return math.exp(-rate_per_ns * elapsed_ns)


def apply_memory_decay(s: BellDiagonalState, rate_per_ns: float, elapsed_ns: float) -> BellDiagonalState:
    """Depolarise one stored half of the pair for ``elapsed_ns`` at ``rate_per_ns``.

    For a Bell-diagonal pair the single-qubit channel mixes the whole state
    towards I/4 with weight ``1 - exp(-rate * t)``.
    """
    keep = decay_factor(rate_per_ns, elapsed_ns)
    if keep == 1.0:
        return s
    mix = (1.0 - keep) * 0.25
    return BellDiagonalState.from_coeffs(keep * c + mix for c in s.coeffs)


def swap_compose(a: BellDiagonalState, b: BellDiagonalState) -> BellDiagonalState:
    """Pair left after a perfect Bell measurement on the inner halves of ``a`` and ``b``.

    The heralded Pauli correction is assumed applied, so the result is the
    group convolution ``out[k] = sum_i a[i] * b[i ^ k]``.
    """
    ac, bc = a.coeffs, b.coeffs
    return BellDiagonalState.from_coeffs(
        sum(ac[i] * bc[i ^ k] for i in range(4)) for k in range(4)
    )


def dejmps_round(keep: BellDiagonalState, sacrifice: BellDiagonalState) -> PurificationOutcome:
    """One DEJMPS round; ``post_state`` is the kept pair conditioned on success.

    The map was read off a dense simulation of the Rx(+pi/2) / Rx(-pi/2),
    bilateral CNOT, measure-and-compare circuit. Phi+ pairs with Psi-, and
    Psi+ pairs with Phi-.
    """
    A, C, D, B = keep.coeffs  # Phi+, Psi+, Phi-, Psi-
    a, c, d, b = sacrifice.coeffs
    norm = (A + B) * (a + b) + (C + D) * (c + d)
    if norm <= 0.0:
        raise DegenerateError("DEJMPS success probability is zero")
    post = BellDiagonalState.from_coeffs(
        (
            (A * a + B * b) / norm,
            (C * c + D * d) / norm,
            (A * b + B * a) / norm,
            (C * d + D * c) / norm,
        )
    )
    return PurificationOutcome(min(1.0, norm), post)


def purification_curve(p_grid: Sequence[float], rounds: int) -> list[tuple[float, int, float]]:
    """Fidelity after 0..``rounds`` DEJMPS rounds on identical depolarized copies.

    Returns rows ``(p, round, fidelity)``, ordered by ``p`` as given and then
    by round.
    """
    if rounds < 0:
        raise DomainError(f"rounds must be >= 0, got {rounds}")
    rows = []
    for p in p_grid:
        state = depolarized_state(p)
        rows.append((float(p), 0, state.fidelity))
        for r in range(1, rounds + 1):
            state = dejmps_round(state, state).post_state
            rows.append((float(p), r, state.fidelity))
    return rows


def write_curve_csv(rows: Iterable[tuple[float, int, float]], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["p", "round", "fidelity"])
    for p, r, f in rows:
        writer.writerow([f"{p:.6f}", r, f"{f:.6f}"])
