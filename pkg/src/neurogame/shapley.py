"""Shapley values of coalition members, the dynamic threshold, strong coalitions.

Subsets of players are encoded as integer bitmasks (bit ``k`` set means
member ``k`` is in the subset) internally; callables handed to the public
estimators receive a ``frozenset`` of member indices.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .coalition import ConfigurationState, block_pairs
from .statmech import EnergyMap, EnergyParams, induced_energy, payoff_from_log, thermal_energy

CharacteristicFunction = Callable[[frozenset], float]

EXACT_MAX_PLAYERS = 12
TIE_RTOL = 1e-9


# ---------------------------------------------------------------------------
# exact


@lru_cache(maxsize=None)
def shapley_weights(n: int) -> np.ndarray:
    """``w[k] = k! (n-k-1)! / n!`` for k = 0..n-1, without forming factorials."""
    return np.array([1.0 / (n * math.comb(n - 1, k)) for k in range(n)])


@lru_cache(maxsize=None)
def shapley_matrix(n: int) -> np.ndarray:
    """Matrix ``W`` of shape ``(2**n, n)`` with ``phi = v_table @ W``.

    Row ``S`` carries ``+w(|S|-1)`` for members of S and ``-w(|S|)`` for
    non-members, which regroups the subset sum by the subset evaluated.
    """
    w = shapley_weights(n)
    full = (1 << n) - 1
    mat = np.zeros((1 << n, n))
    for mask in range(1 << n):
        size = bin(mask).count("1")
        for i in range(n):
            if mask >> i & 1:
                mat[mask, i] = w[size - 1]
            elif mask != full:
                mat[mask, i] = -w[size]
    mat.setflags(write=False)
    return mat


def subset_table(n: int, v: CharacteristicFunction) -> np.ndarray:
    """Evaluate ``v`` once on every subset; index = bitmask."""
    return np.array([float(v(_members(mask))) for mask in range(1 << n)])


def _members(mask: int) -> frozenset:
    return frozenset(k for k in range(mask.bit_length()) if mask >> k & 1)


def shapley_from_table(table: np.ndarray) -> np.ndarray:
    """Exact Shapley values from subset values, vectorised over leading axes."""
    table = np.asarray(table, dtype=np.float64)
    n = int(table.shape[-1]).bit_length() - 1
    if 1 << n != table.shape[-1]:
        raise ValueError("last axis must have length 2**n")
    return table @ shapley_matrix(n)


def shapley_exact(n: int, v: CharacteristicFunction, max_players: int = EXACT_MAX_PLAYERS) -> np.ndarray:
    """Exact Shapley value of each of ``n`` players by subset enumeration."""
    if n < 1:
        raise ValueError("need at least one player")
    if n > max_players:
        raise ValueError(f"{n} players exceeds the exact-enumeration guard ({max_players}); use monte carlo or raise max_players")
    return shapley_from_table(subset_table(n, v))


# ---------------------------------------------------------------------------
# sampling


def shapley_monte_carlo(
    n: int,
    v: CharacteristicFunction,
    samples: int,
    seed=0,
    exhaustive: bool = False,
    return_stderr: bool = False,
):
    """Permutation-sampling estimate of the Shapley values.

    Each sampled ordering contributes every player's marginal gain when it
    joins its predecessors. With ``exhaustive=True`` all ``n!`` orderings are
    visited once instead, giving the exact values.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    cache: dict[int, float] = {}

    def value(mask: int) -> float:
        if mask not in cache:
            cache[mask] = float(v(_members(mask)))
        return cache[mask]

    if exhaustive:
        orders: Iterable[Sequence[int]] = itertools.permutations(range(n))
    else:
        rng = np.random.default_rng(seed)
        orders = (rng.permutation(n) for _ in range(samples))

    total = np.zeros(n)
    total_sq = np.zeros(n)
    count = 0
    for order in orders:
        mask = 0
        prev = value(0)
        gains = np.empty(n)
        for player in order:
            mask |= 1 << int(player)
            cur = value(mask)
            gains[player] = cur - prev
            prev = cur
        total += gains
        total_sq += gains * gains
        count += 1

    phi = total / count
    if not return_stderr:
        return phi
    var = np.maximum(total_sq / count - phi * phi, 0.0)
    stderr = np.sqrt(var / max(count - 1, 1))
    return phi, stderr


# ---------------------------------------------------------------------------
# characteristic function built from the energy model


class SubsetPayoff:
    """Payoff of any sub-configuration of a coalition, against a frozen Q.

    Subsets with fewer than two members are worth zero. Otherwise the subset's
    energy (its own activations and the neighbour pairs it fully contains) is
    turned into a Gibbs probability using the layer's log partition function,
    then into a payoff.
    """

    def __init__(
        self,
        state: ConfigurationState,
        log_partition: float,
        i: float,
        params: EnergyParams = EnergyParams(),
        kind: str = "plus4",
    ):
        self.state = state
        self.log_partition = log_partition
        self.i = i
        self.params = params
        self.kind = kind
        self._inv = 1.0 / state.values
        self._pairs = block_pairs(tuple(state.block_shape), kind)
        self._kT = thermal_energy(i, params)

    @property
    def n(self) -> int:
        return self.state.size

    def energy(self, subset: Iterable[int]) -> float:
        return induced_energy(self._inv, self._pairs, self.params, frozenset(subset))

    def __call__(self, subset: Iterable[int]) -> float:
        members = frozenset(subset)
        bad = [k for k in members if not 0 <= k < self.n]
        if bad:
            raise IndexError(f"members {bad} out of range for a coalition of {self.n}")
        if len(members) < 2:
            return 0.0
        logp = -self.energy(members) / self._kT - self.log_partition
        return float(payoff_from_log(logp, self.params))


def subset_payoff(
    state: ConfigurationState,
    subset: Iterable[int],
    energy_map: EnergyMap,
    params: EnergyParams = EnergyParams(),
    kind: str = "plus4",
) -> float:
    """Characteristic function value of ``subset`` of ``state``'s members."""
    return SubsetPayoff(state, energy_map.log_partition, energy_map.iteration, params, kind)(subset)


# ---------------------------------------------------------------------------
# threshold and strong coalitions


def quartile_q1(values, axis: int = -1):
    """First quartile at 1-indexed position (n+1)/4, linearly interpolated.

    Positions outside ``[1, n]`` clamp to the nearest order statistic.
    """
    s = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    n = s.shape[axis]
    if n == 0:
        raise ValueError("quartile of an empty list")
    pos = min(max((n + 1) / 4.0, 1.0), float(n))
    lo = math.floor(pos)
    hi = math.ceil(pos)
    a = np.take(s, lo - 1, axis=axis)
    b = np.take(s, hi - 1, axis=axis)
    q = a + (pos - lo) * (b - a)
    return float(q) if np.ndim(q) == 0 else q


def threshold_rho(shapley_values, i: float, axis: int = -1):
    """``Q1(values) * ln(1 + i)``."""
    if i < 1:
        raise ValueError(f"iteration must be >= 1, got {i}")
    return quartile_q1(shapley_values, axis=axis) * math.log1p(i)


def strong_flags(phi, rho) -> tuple[np.ndarray, np.ndarray]:
    """Keep flags ``phi > rho`` along the last axis, never empty.

    When nothing clears the threshold the largest value is kept; values within
    a relative 1e-9 of the maximum count as tied and the lowest index wins.
    Returns ``(keep, fallback_fired)``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    keep = phi > rho[..., None]
    fired = ~keep.any(axis=-1)
    if fired.any():
        top = phi.max(axis=-1, keepdims=True)
        tol = TIE_RTOL * np.abs(phi).max(axis=-1, keepdims=True)
        first = np.argmax(phi >= top - tol, axis=-1)
        fallback = np.zeros_like(keep)
        np.put_along_axis(fallback, first[..., None], True, axis=-1)
        keep = np.where(fired[..., None], fallback, keep)
    return keep, fired


@dataclass
class ShapleyReport:
    coalition_id: int
    shapley: np.ndarray
    rho: float
    keep: np.ndarray
    fallback: bool
    method: str = "exact"
    samples: int | None = None
    seed: object = None

    def to_dict(self) -> dict:
        d = {
            "coalition_id": int(self.coalition_id),
            "shapley": [float(x) for x in self.shapley],
            "rho": float(self.rho),
            "keep": [bool(x) for x in self.keep],
            "fallback": bool(self.fallback),
            "method": self.method,
        }
        if self.method == "monte_carlo":
            d["samples"] = self.samples
        return d


def shapley_report(
    state: ConfigurationState,
    v: CharacteristicFunction,
    i: float,
    method: str = "exact",
    samples: int = 200,
    seed=0,
) -> ShapleyReport:
    if method == "exact":
        phi = shapley_exact(state.size, v)
    elif method == "monte_carlo":
        phi = shapley_monte_carlo(state.size, v, samples, seed)
    else:
        raise ValueError(f"unknown shapley method {method!r}")
    rho = threshold_rho(phi, i)
    keep, fired = strong_flags(phi, np.asarray(rho))
    return ShapleyReport(state.coalition_id, phi, float(rho), keep, bool(fired), method,
                         samples if method == "monte_carlo" else None, seed)


def extract_strong(
    map_shape: tuple[int, int],
    winning: Sequence[tuple[ConfigurationState, ShapleyReport]],
) -> np.ndarray:
    """Binary mask over a 2-D map: 1 at kept members of winning coalitions."""
    mask = np.zeros(map_shape, dtype=np.uint8)
    for state, report in winning:
        if state.coalition_id != report.coalition_id:
            raise ValueError("state / report coalition mismatch")
        for coord, keep in zip(state.coords, report.keep):
            if not (0 <= coord.row < map_shape[0] and 0 <= coord.col < map_shape[1]):
                raise ValueError(f"coordinate {coord} outside map {map_shape}")
            if keep:
                mask[coord] = 1
    return mask
