"""Ising energy of a coalition, cooling schedule, Gibbs weights and payoff."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .coalition import ACTIVATION_FLOOR, ConfigurationState, NeighborhoodSystem, neighbor_pairs
from .tensor import logsumexp

BOLTZMANN = 1.38e-23
PROB_CLAMP = 1.0 - 1e-12


@dataclass(frozen=True)
class EnergyParams:
    alpha: float = 0.0  # external-field coefficient
    beta: float = 1.0  # bonding coefficient
    c: float = 1.0  # temperature constant
    k1: float = 1.0  # payoff control

    @property
    def kB(self) -> float:
        return BOLTZMANN

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError("k1 must be positive")
        if self.c <= 0:
            raise ValueError("c must be positive")


@dataclass
class EnergyMap:
    """Per-coalition energies, Gibbs probabilities and payoffs of one map."""

    energies: np.ndarray
    log_gibbs: np.ndarray
    gibbs: np.ndarray
    payoffs: np.ndarray
    log_partition: float
    temperature: float
    iteration: float

    @property
    def partition(self) -> float:
        """Q itself; may under/overflow for extreme energies, use ``log_partition``."""
        with np.errstate(over="ignore", under="ignore"):
            return float(np.exp(self.log_partition))

    def __len__(self) -> int:
        return len(self.energies)


def energy(state: ConfigurationState, pairs: NeighborhoodSystem, params: EnergyParams) -> float:
    """``alpha * sum 1/a_p + beta * sum_<p,q> 1/(a_p a_q)``, each pair once."""
    a = state.values
    if a.min() < ACTIVATION_FLOOR:
        raise ValueError("activation below floor")
    return induced_energy(1.0 / a, pairs.index_pairs, params)


def induced_energy(inv, index_pairs, params: EnergyParams, members=None) -> float:
    """Energy restricted to ``members`` (all when None), from reciprocal activations."""
    keep = range(len(inv)) if members is None else sorted(members)
    field = sum(inv[p] for p in keep)
    if members is None:
        bond = sum(inv[p] * inv[q] for p, q in index_pairs)
    else:
        bond = sum(inv[p] * inv[q] for p, q in index_pairs if p in members and q in members)
    return float(params.alpha * field + params.beta * bond)


def temperature(i: float, params: EnergyParams = EnergyParams()) -> float:
    if i < 1:
        raise ValueError(f"iteration must be >= 1, got {i}")
    return params.c * 1e23 / math.log1p(i)


def thermal_energy(i: float, params: EnergyParams = EnergyParams()) -> float:
    """k_B * T(i)."""
    return BOLTZMANN * temperature(i, params)


def log_gibbs(energies: Sequence[float], i: float, params: EnergyParams = EnergyParams()) -> tuple[np.ndarray, float]:
    """Log Gibbs probabilities and log partition function."""
    e = np.asarray(energies, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty energy list")
    if not np.all(np.isfinite(e)):
        raise ValueError("non-finite energy")
    logits = -e / thermal_energy(i, params)
    log_q = float(logsumexp(logits))
    return logits - log_q, log_q


def gibbs_layer(energies: Sequence[float], i: float, params: EnergyParams = EnergyParams()) -> tuple[np.ndarray, float]:
    """Gibbs probabilities over a layer's states and the partition function Q.

    The probabilities are evaluated with a min-energy shift, so they stay
    normalised even when Q itself under/overflows (Q is returned as computed
    from ``exp(log Q)``).
    """
    logp, log_q = log_gibbs(energies, i, params)
    with np.errstate(over="ignore", under="ignore"):
        return np.exp(logp), float(np.exp(log_q))


def payoff(p, params: EnergyParams = EnergyParams()):
    """``ln(k1 / (1 - P))`` with P clamped to ``1 - 1e-12``."""
    p = np.minimum(np.asarray(p, dtype=np.float64), PROB_CLAMP)
    out = math.log(params.k1) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def payoff_from_log(logp, params: EnergyParams = EnergyParams()):
    """Payoff of a probability given in log space; logp > 0 is clamped like P > 1."""
    logp = np.minimum(np.asarray(logp, dtype=np.float64), 0.0)
    with np.errstate(under="ignore"):
        return payoff(np.exp(logp), params)


def score_layer(
    states: Sequence[ConfigurationState],
    i: float,
    params: EnergyParams = EnergyParams(),
    kind: str = "plus4",
) -> EnergyMap:
    if not states:
        raise ValueError("score_layer needs at least one configuration state")
    e = np.array([energy(s, neighbor_pairs(s, kind), params) for s in states])
    logp, log_q = log_gibbs(e, i, params)
    with np.errstate(under="ignore"):
        p = np.exp(logp)
    return EnergyMap(
        energies=e,
        log_gibbs=logp,
        gibbs=p,
        payoffs=payoff_from_log(logp, params),
        log_partition=log_q,
        temperature=temperature(i, params),
        iteration=i,
    )


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
