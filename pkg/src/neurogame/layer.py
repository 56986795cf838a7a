"""The NEUROGAME layer: coalition scoring, Shapley filtering, masked transmission.

For every sample and channel the activation map is tiled into coalitions,
each coalition is scored by its Ising energy through a Gibbs distribution,
the top fraction by payoff are kept as winning coalitions, and inside each
winner only members whose Shapley value beats the dynamic threshold pass
their activation forward. Everything else transmits zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .coalition import ACTIVATION_FLOOR, ConfigurationState, GridCoord, KINDS, block_pairs
from .shapley import (
    EXACT_MAX_PLAYERS,
    SubsetPayoff,
    quartile_q1,
    shapley_matrix,
    shapley_monte_carlo,
    strong_flags,
)
from .statmech import EnergyMap, EnergyParams, payoff_from_log, thermal_energy
from .tensor import logsumexp

# cap on float64 elements of the per-subset energy tensor built per chunk
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class NeurogameLayerConfig:
    block: tuple[int, int] = (2, 2)
    top_p: float | int = 0.85
    neighborhood: str = "plus4"
    energy: EnergyParams = field(default_factory=EnergyParams)
    shapley_method: str = "exact"
    shapley_samples: int = 200
    rescale_kept: bool = False
    infer_identity: bool = False
    partition_scope: str = "map"  # "map": one Q per channel; "layer": one Q over all channels
    rho_override: float | None = None  # test hook: fixed threshold instead of Q1*ln(1+i)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block", tuple(int(b) for b in self.block))
        if len(self.block) != 2 or min(self.block) < 1:
            raise ValueError(f"block dims must be >= 1, got {self.block}")
        if isinstance(self.top_p, bool):
            raise ValueError("top_p must be a fraction in (0,1] or a positive integer count")
        if isinstance(self.top_p, int):
            if self.top_p < 1:
                raise ValueError("integer top_p must be >= 1")
        elif not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.neighborhood not in KINDS:
            raise ValueError(f"neighborhood must be one of {KINDS}")
        if self.shapley_method not in ("exact", "monte_carlo"):
            raise ValueError("shapley_method must be 'exact' or 'monte_carlo'")
        if self.shapley_method == "exact" and self.block[0] * self.block[1] > EXACT_MAX_PLAYERS:
            raise ValueError(
                f"block {self.block} has more than {EXACT_MAX_PLAYERS} members; use shapley_method='monte_carlo'"
            )
        if self.shapley_samples < 1:
            raise ValueError("shapley_samples must be >= 1")
        if self.partition_scope not in ("map", "layer"):
            raise ValueError("partition_scope must be 'map' or 'layer'")

    @property
    def size(self) -> int:
        return self.block[0] * self.block[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block"] = list(self.block)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NeurogameLayerConfig":
        d = dict(d)
        if "energy" in d and isinstance(d["energy"], dict):
            d["energy"] = EnergyParams(**d["energy"])
        if "block" in d:
            d["block"] = tuple(d["block"])
        return cls(**d)


def winning_count(m: int, top_p: float | int) -> int:
    """Number of winning coalitions out of ``m``."""
    if isinstance(top_p, int) and not isinstance(top_p, bool):
        return max(1, min(m, top_p))
    # the epsilon absorbs float noise such as 0.7 * 10 = 7.000000000000001
    return max(1, min(m, math.ceil(top_p * m - 1e-9)))


def select_winning(energy_map: EnergyMap, top_p: float | int) -> list[int]:
    """Ids of the winning coalitions, best payoff first (ties: lower id).

    Coalitions are ranked on the log Gibbs probability, an order-preserving
    transform of the payoff that does not underflow.
    """
    m = len(energy_map)
    if m < 1:
        raise ValueError("empty energy map")
    order = np.argsort(-np.asarray(energy_map.log_gibbs), kind="stable")
    return [int(k) for k in order[: winning_count(m, top_p)]]


@dataclass
class LayerMask:
    mask: np.ndarray  # uint8, shaped like the layer input
    iteration: float
    winning: np.ndarray  # (N, C, p) coalition ids


@dataclass
class _Scored:
    """Per-(sample, channel, coalition) intermediate results of one forward."""

    blocks: np.ndarray  # (N, C, M, n) floored activations
    log_gibbs: np.ndarray  # (N, C, M)
    payoffs: np.ndarray
    energies: np.ndarray
    shapley: np.ndarray  # (N, C, M, n)
    rho: np.ndarray  # (N, C, M)
    keep: np.ndarray  # (N, C, M, n) bool, already restricted to winners
    fallback: np.ndarray  # (N, C, M) bool
    winning: np.ndarray  # (N, C, p)
    log_partition: np.ndarray


@lru_cache(maxsize=None)
def _subset_tables(block: tuple[int, int], kind: str):
    n = block[0] * block[1]
    pairs = block_pairs(block, kind)
    masks = np.arange(1 << n)
    members = ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)  # (2^n, n)
    if pairs:
        p, q = np.array(pairs).T
        pair_in = members[:, p] * members[:, q]  # (2^n, n_pairs)
    else:
        p = q = np.zeros(0, dtype=int)
        pair_in = np.zeros((1 << n, 0))
    sizes = members.sum(axis=1)
    return members, pair_in, p, q, sizes


def to_blocks(x: np.ndarray, block: tuple[int, int]) -> np.ndarray:
    """(N, H, W, C) -> (N, C, M, n): coalitions in row-major order, members row-major."""
    n, h, w, c = x.shape
    r, k = block
    hb, wb = h // r, w // k
    t = x[:, : hb * r, : wb * k, :].reshape(n, hb, r, wb, k, c)
    return t.transpose(0, 5, 1, 3, 2, 4).reshape(n, c, hb * wb, r * k)


def from_blocks(blocks: np.ndarray, shape: tuple, block: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`to_blocks`; positions outside the tiling are zero."""
    n, h, w, c = shape
    r, k = block
    hb, wb = h // r, w // k
    t = blocks.reshape(n, c, hb, wb, r, k).transpose(0, 2, 4, 3, 5, 1).reshape(n, hb * r, wb * k, c)
    out = np.zeros(shape, dtype=blocks.dtype)
    out[:, : hb * r, : wb * k, :] = t
    return out


def feature_vector(maps: np.ndarray) -> np.ndarray:
    """Flatten (N, H, W, C) channel-major then row-major into (N, C*H*W)."""
    single = maps.ndim == 3
    if single:
        maps = maps[None]
    out = maps.transpose(0, 3, 1, 2).reshape(maps.shape[0], -1)
    return out[0] if single else out


class NeurogameLayer:
    """Parameter-free filtering layer; see the module docstring."""

    def __init__(self, config: NeurogameLayerConfig = NeurogameLayerConfig(), name: str = "neurogame"):
        self.config = config
        self.params: dict = {}
        self.name = name
        self.frozen = False
        self.collect_diagnostics = False
        self.diagnostics: list[dict] = []
        self.last_mask: LayerMask | None = None
        self.grads: dict = {}

    # -- scoring ------------------------------------------------------------

    def score(self, x: np.ndarray, iteration: float) -> _Scored:
        cfg = self.config
        if iteration < 1:
            raise ValueError(f"iteration must be >= 1, got {iteration}")
        n_batch, h, w, c = x.shape
        if h < cfg.block[0] or w < cfg.block[1]:
            raise ValueError(f"map {h}x{w} smaller than block {cfg.block}")

        blocks = np.maximum(to_blocks(x.astype(np.float64), cfg.block), ACTIVATION_FLOOR)
        members, pair_in, p_idx, q_idx, sizes = _subset_tables(cfg.block, cfg.neighborhood)
        params = cfg.energy
        kT = thermal_energy(iteration, params)
        m = blocks.shape[2]
        n_sub = members.shape[0]

        inv = 1.0 / blocks
        per_sample = c * m * n_sub
        step = max(1, _CHUNK_ELEMENTS // max(per_sample, 1))
        sub_e = np.empty((n_batch, c, m, n_sub))
        for s in range(0, n_batch, step):
            chunk = inv[s : s + step]
            e = params.beta * ((chunk[..., p_idx] * chunk[..., q_idx]) @ pair_in.T)
            if params.alpha != 0:
                e = e + params.alpha * (chunk @ members.T)
            sub_e[s : s + step] = e
        energies = sub_e[..., -1]  # the full coalition is the all-ones mask

        logits = -energies / kT
        if cfg.partition_scope == "map":
            log_q = logsumexp(logits, axis=2, keepdims=True)  # (N, C, 1)
        else:
            log_q = logsumexp(logits.reshape(n_batch, -1), axis=1, keepdims=True)[:, :, None]  # (N, 1, 1)
        logp = logits - log_q
        payoffs = payoff_from_log(logp, params)

        p_count = winning_count(m, cfg.top_p)
        order = np.argsort(-logp, axis=2, kind="stable")
        winning = order[..., :p_count]
        is_winner = np.zeros((n_batch, c, m), dtype=bool)
        np.put_along_axis(is_winner, winning, True, axis=2)

        if cfg.shapley_method == "exact":
            sub_logp = -sub_e / kT - log_q[..., None]
            v = payoff_from_log(sub_logp, params)
            v[..., sizes < 2] = 0.0
            phi = v @ shapley_matrix(cfg.size)
        else:
            phi = self._monte_carlo(blocks, is_winner, np.broadcast_to(log_q, logp.shape), iteration)

        if cfg.rho_override is not None:
            rho = np.full((n_batch, c, m), float(cfg.rho_override))
        else:
            rho = quartile_q1(phi, axis=-1) * math.log1p(iteration)
        keep, fired = strong_flags(phi, rho)
        keep &= is_winner[..., None]
        fired &= is_winner
        return _Scored(blocks, logp, payoffs, energies, phi, rho, keep, fired, winning, log_q)

    def _monte_carlo(self, blocks, is_winner, log_q, iteration) -> np.ndarray:
        cfg = self.config
        n_batch, c, m, n = blocks.shape
        phi = np.zeros(blocks.shape)
        coords = tuple(GridCoord(r, k) for r in range(cfg.block[0]) for k in range(cfg.block[1]))
        for b, ch, cid in zip(*np.nonzero(is_winner)):
            state = ConfigurationState(int(cid), coords, tuple(blocks[b, ch, cid]), cfg.block)
            v = SubsetPayoff(state, float(log_q[b, ch, cid]), iteration, cfg.energy, cfg.neighborhood)
            # one independent stream per coalition
            seed = np.random.SeedSequence([cfg.seed, int(iteration), int(b), int(ch), int(cid)])
            phi[b, ch, cid] = shapley_monte_carlo(n, v, cfg.shapley_samples, seed)
        return phi

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False, iteration: float = 1) -> np.ndarray:
        cfg = self.config
        if not training and cfg.infer_identity:
            self._mask = np.ones(x.shape, dtype=x.dtype)
            return x
        if self.frozen and self.last_mask is not None and self.last_mask.mask.shape == x.shape:
            mask = self.last_mask.mask
        else:
            scored = self.score(x, iteration)
            mask = from_blocks(scored.keep.astype(np.uint8), x.shape, cfg.block)
            self.last_mask = LayerMask(mask, iteration, scored.winning)
            if self.collect_diagnostics:
                self.diagnostics = diagnostics_records(scored, iteration, self.name)
        factor = mask.astype(x.dtype)
        if cfg.rescale_kept:
            kept = factor.sum(axis=(1, 2), keepdims=True)
            factor = factor * (x.shape[1] * x.shape[2] / np.maximum(kept, 1)).astype(x.dtype)
        self._mask = factor
        return x * factor

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if grad.shape != self._mask.shape:
            raise ValueError(f"gradient shape {grad.shape} != mask shape {self._mask.shape}")
        return grad * self._mask

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape


def masked_backward(upstream_grad: np.ndarray, mask: LayerMask | np.ndarray) -> np.ndarray:
    """Straight-through gradient of the masking: ``upstream * mask``."""
    m = mask.mask if isinstance(mask, LayerMask) else mask
    if upstream_grad.shape != m.shape:
        raise ValueError(f"gradient shape {upstream_grad.shape} != mask shape {m.shape}")
    return upstream_grad * m.astype(upstream_grad.dtype)


def diagnostics_records(scored: _Scored, iteration: float, layer: str, samples=None) -> list[dict]:
    """JSON-ready per (sample, channel) summaries of one scoring pass."""
    out = []
    n_batch, c = scored.log_gibbs.shape[:2]
    for b in range(n_batch) if samples is None else samples:
        for ch in range(c):
            win = [int(k) for k in scored.winning[b, ch]]
            out.append(
                {
                    "layer": layer,
                    "sample": int(b),
                    "channel": int(ch),
                    "iteration": float(iteration),
                    "payoffs": [float(x) for x in scored.payoffs[b, ch]],
                    "energies": [float(x) for x in scored.energies[b, ch]],
                    "winning": win,
                    "shapley": {str(k): [float(x) for x in scored.shapley[b, ch, k]] for k in win},
                    "rho": {str(k): float(scored.rho[b, ch, k]) for k in win},
                    "keep": {str(k): [bool(x) for x in scored.keep[b, ch, k]] for k in win},
                    "fallback": {str(k): bool(scored.fallback[b, ch, k]) for k in win},
                    "kept_count": int(scored.keep[b, ch].sum()),
                }
            )
    return out


def passthrough_config(config: NeurogameLayerConfig) -> NeurogameLayerConfig:
    """Config whose layer keeps every neuron (top_p = 1, threshold = -inf)."""
    return replace(config, top_p=1.0, rho_override=float("-inf"))
