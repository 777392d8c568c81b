"""Discrete-event simulation of entanglement distribution over repeater chains."""

__version__ = "0.1.0"

from .bell import (  # noqa: E402
    BellDiagonalState,
    BellIndex,
    DegenerateError,
    DomainError,
    PurificationOutcome,
    apply_memory_decay,
    dejmps_round,
    depolarized_state,
    fidelity_to_phi_plus,
    purification_curve,
    swap_compose,
)
from .engine import Engine  # noqa: E402
from .netmodel import ConfigError, NetworkConfig, Ordering, Policy  # noqa: E402
from .protocols import SwapRequest, TrialRecord, run_trial  # noqa: E402

__all__ = [
    "BellDiagonalState",
    "BellIndex",
    "ConfigError",
    "DegenerateError",
    "DomainError",
    "Engine",
    "NetworkConfig",
    "Ordering",
    "Policy",
    "PurificationOutcome",
    "SwapRequest",
    "TrialRecord",
    "apply_memory_decay",
    "dejmps_round",
    "depolarized_state",
    "fidelity_to_phi_plus",
    "purification_curve",
    "run_trial",
    "swap_compose",
]
