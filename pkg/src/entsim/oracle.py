"""Small explicit density-matrix simulator used to cross-check the Bell calculus.

Qubit 0 is the most significant tensor factor (big-endian), so the basis
state ``|q0 q1 ... q_{n-1}>`` has index ``sum(q_k << (n - 1 - k))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import reduce
from typing import Sequence

import numpy as np

from .bell import BellDiagonalState, BellIndex

MAX_QUBITS = 4
EIG_CLAMP = -1e-10

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
P0 = np.diag([1, 0]).astype(complex)
P1 = np.diag([0, 1]).astype(complex)

_PHI_PLUS = np.array([1, 0, 0, 1], dtype=complex) / np.sqrt(2)


def bell_ket(index: int) -> np.ndarray:
    x, z = BellIndex(index).pauli
    return np.kron(I2, np.linalg.matrix_power(X, x) @ np.linalg.matrix_power(Z, z)) @ _PHI_PLUS


BELL_KETS = [bell_ket(k) for k in range(4)]


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class DenseState:
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        dim = m.shape[0]
        if m.shape != (dim, dim) or dim < 2 or dim & (dim - 1) or dim > 2**MAX_QUBITS:
            raise OracleError(f"bad density matrix shape {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_qubits(self) -> int:
        return self.dim.bit_length() - 1

    def check(self, atol: float = 1e-12) -> None:
        """Raise if the matrix is not a density operator within tolerance."""
        m = self.matrix
        if not np.allclose(m, m.conj().T, atol=atol):
            raise OracleError("matrix is not Hermitian")
        if abs(np.trace(m).real - 1.0) > atol:
            raise OracleError(f"trace {np.trace(m).real} != 1")
        if np.linalg.eigvalsh(m).min() < EIG_CLAMP:
            raise OracleError("matrix is not positive semidefinite")

    @classmethod
    def from_ket(cls, ket: np.ndarray) -> "DenseState":
        ket = np.asarray(ket, dtype=complex)
        return cls(np.outer(ket, ket.conj()))

    def tensor(self, other: "DenseState") -> "DenseState":
        return DenseState(np.kron(self.matrix, other.matrix))

    def dump(self, precision: int = 4) -> str:
        return np.array2string(self.matrix, precision=precision, suppress_small=True, max_line_width=200)


def bell_diagonal_dense(s: BellDiagonalState) -> DenseState:
    return DenseState(sum(c * np.outer(k, k.conj()) for c, k in zip(s.coeffs, BELL_KETS)))


def maximally_mixed(num_qubits: int) -> DenseState:
    d = 2**num_qubits
    return DenseState(np.eye(d, dtype=complex) / d)


class GateKind(Enum):
    RX = "rx"
    CNOT = "cnot"
    HADAMARD = "h"
    PAULI_X = "x"
    PAULI_Z = "z"


@dataclass(frozen=True)
class GateSpec:
    kind: GateKind
    targets: tuple[int, ...]
    theta: float = 0.0

    def __post_init__(self):
        want = 2 if self.kind is GateKind.CNOT else 1
        if len(self.targets) != want:
            raise OracleError(f"{self.kind.value} takes {want} target(s), got {self.targets}")
        if len(set(self.targets)) != len(self.targets):
            raise OracleError("CNOT control and target must differ")


def rx(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def _embed(ops: dict[int, np.ndarray], n: int) -> np.ndarray:
    return reduce(np.kron, [ops.get(q, I2) for q in range(n)])


def gate_unitary(gate: GateSpec, n: int) -> np.ndarray:
    if any(not 0 <= t < n for t in gate.targets):
        raise OracleError(f"gate targets {gate.targets} out of range for {n} qubits")
    if gate.kind is GateKind.CNOT:
        c, t = gate.targets
        return _embed({c: P0}, n) + _embed({c: P1, t: X}, n)
    single = {
        GateKind.RX: lambda: rx(gate.theta),
        GateKind.HADAMARD: lambda: H,
        GateKind.PAULI_X: lambda: X,
        GateKind.PAULI_Z: lambda: Z,
    }[gate.kind]()
    return _embed({gate.targets[0]: single}, n)


def apply_gate(state: DenseState, gate: GateSpec) -> DenseState:
    u = gate_unitary(gate, state.num_qubits)
    return DenseState(u @ state.matrix @ u.conj().T)


def apply_kraus(state: DenseState, kraus: Sequence[np.ndarray], qubit: int) -> DenseState:
    n = state.num_qubits
    out = np.zeros_like(state.matrix)
    for k in kraus:
        full = _embed({qubit: k}, n)
        out += full @ state.matrix @ full.conj().T
    return DenseState(out)


def depolarizing_kraus(keep: float) -> list[np.ndarray]:
    """Kraus operators of rho -> keep*rho + (1 - keep)*I/2."""
    p = 1.0 - keep
    Y = 1j * X @ Z
    return [np.sqrt(1 - 3 * p / 4) * I2] + [np.sqrt(p / 4) * P for P in (X, Y, Z)]


def partial_trace(state: DenseState, keep: Sequence[int]) -> DenseState:
    n = state.num_qubits
    keep = list(keep)
    drop = [q for q in range(n) if q not in keep]
    t = state.matrix.reshape([2] * (2 * n))
    for q in sorted(drop, reverse=True):
        cur = t.ndim // 2
        t = np.trace(t, axis1=q, axis2=q + cur)
    # remaining axes are kept qubits in ascending order
    order = sorted(keep)
    perm = [order.index(q) for q in keep]
    m = len(keep)
    t = t.transpose(perm + [p + m for p in perm])
    return DenseState(t.reshape(2**m, 2**m))


def _projector(n: int, qubit: int, bit: int) -> np.ndarray:
    return _embed({qubit: P1 if bit else P0}, n)


def measure_qubit(state: DenseState, qubit: int) -> list[tuple[int, float, DenseState | None]]:
    """Computational-basis measurement; post-states are renormalised (None if p=0)."""
    n = state.num_qubits
    if not 0 <= qubit < n:
        raise OracleError(f"qubit {qubit} out of range")
    results = []
    for bit in (0, 1):
        proj = _projector(n, qubit, bit)
        m = proj @ state.matrix @ proj
        p = float(np.trace(m).real)
        results.append((bit, p, DenseState(m / p) if p > 1e-15 else None))
    return results


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.conj().T) / 2)
    if w.min() < EIG_CLAMP:
        raise OracleError("matrix has a negative eigenvalue")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def general_fidelity(rho: DenseState, sigma: DenseState, squared: bool = False) -> float:
    """Uhlmann fidelity ``Tr sqrt(sqrt(rho) sigma sqrt(rho))``; squared on request."""
    if rho.dim != sigma.dim:
        raise OracleError(f"dimension mismatch {rho.dim} vs {sigma.dim}")
    s = _sqrtm_psd(rho.matrix)
    inner = _sqrtm_psd(s @ sigma.matrix @ s)
    f = float(np.clip(np.trace(inner).real, 0.0, 1.0))
    return f * f if squared else f


def bell_projector_on(n: int, qubits: tuple[int, int], index: int) -> np.ndarray:
    """Projector onto Bell state ``index`` of two adjacent qubits in an n-qubit register."""
    a, b = qubits
    if b != a + 1:
        raise OracleError("Bell projection expects adjacent qubits")
    k = BELL_KETS[index]
    proj2 = np.outer(k, k.conj())
    left = np.eye(2**a, dtype=complex)
    right = np.eye(2 ** (n - b - 1), dtype=complex)
    return np.kron(np.kron(left, proj2), right)


def bell_measurement_with_correction(
    state: DenseState, qubits: tuple[int, int] = (1, 2), correction_target: int = 3
) -> DenseState:
    """Entanglement swap: BSM on ``qubits``, Pauli fix-up, measured qubits traced out.

    Returns the outcome-averaged (heralded and corrected) state of the two
    remaining qubits.
    """
    if state.num_qubits != 4:
        raise OracleError(f"swap expects 4 qubits, got {state.num_qubits}")
    rest = [q for q in range(4) if q not in qubits]
    if correction_target not in rest:
        raise OracleError("correction target must be an unmeasured qubit")
    out = np.zeros((4, 4), dtype=complex)
    for outcome in range(4):
        proj = bell_projector_on(4, qubits, outcome)
        branch = proj @ state.matrix @ proj
        if np.trace(branch).real < 1e-15:
            continue
        x, z = BellIndex(outcome).pauli
        for kind, bit in ((GateKind.PAULI_X, x), (GateKind.PAULI_Z, z)):
            if bit:
                u = gate_unitary(GateSpec(kind, (correction_target,)), 4)
                branch = u @ branch @ u.conj().T
        out += partial_trace(DenseState(branch), rest).matrix
    return DenseState(out)


def project_bell_diagonal(state: DenseState) -> tuple[BellDiagonalState, float]:
    """Bell-basis diagonal of a two-qubit state and the off-diagonal residual norm."""
    if state.num_qubits != 2:
        raise OracleError("Bell projection needs a 2-qubit state")
    basis = np.column_stack(BELL_KETS)
    in_bell = basis.conj().T @ state.matrix @ basis
    diag = np.real(np.diag(in_bell))
    residual = float(np.linalg.norm(in_bell - np.diag(np.diag(in_bell))))
    return BellDiagonalState.from_coeffs(diag), residual


def swap_oracle(a: BellDiagonalState, b: BellDiagonalState) -> BellDiagonalState:
    """Swap two Bell-diagonal pairs through the explicit 4-qubit BSM."""
    joint = bell_diagonal_dense(a).tensor(bell_diagonal_dense(b))
    return project_bell_diagonal(bell_measurement_with_correction(joint))[0]


def dejmps_oracle(keep: BellDiagonalState, sacrifice: BellDiagonalState) -> tuple[float, BellDiagonalState]:
    """Run the DEJMPS circuit on qubits (A0, B0, A1, B1).

    Alice holds A0/A1 and applies Rx(pi/2); Bob applies Rx(-pi/2). The
    bilateral CNOT uses the kept pair as control; A1 and B1 are measured and
    the round succeeds when the outcomes agree.
    """
    state = bell_diagonal_dense(keep).tensor(bell_diagonal_dense(sacrifice))
    gates = [
        GateSpec(GateKind.RX, (0,), np.pi / 2),
        GateSpec(GateKind.RX, (1,), -np.pi / 2),
        GateSpec(GateKind.RX, (2,), np.pi / 2),
        GateSpec(GateKind.RX, (3,), -np.pi / 2),
        GateSpec(GateKind.CNOT, (0, 2)),
        GateSpec(GateKind.CNOT, (1, 3)),
    ]
    for g in gates:
        state = apply_gate(state, g)
    kept = np.zeros((16, 16), dtype=complex)
    p_success = 0.0
    for bit_a, p_a, post_a in measure_qubit(state, 2):
        if post_a is None:
            continue
        for bit_b, p_b, post_b in measure_qubit(post_a, 3):
            if bit_a == bit_b and post_b is not None:
                p_success += p_a * p_b
                kept += p_a * p_b * post_b.matrix
    if p_success <= 0.0:
        raise OracleError("DEJMPS never succeeds on this input")
    reduced = partial_trace(DenseState(kept / p_success), [0, 1])
    return p_success, project_bell_diagonal(reduced)[0]
