"""Sub-connected hybrid precoding: RF chain/antenna mapping, the heuristic masked-ManNet
search and the masked network (subManNet)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .channel import ChannelTensor
from .mannet import (HybridPrecoder, TrainConfig, UnfoldedNet, fc_hbf_design, random_analog,
                     run_unfolded, train)
from .precoding import realify, spectral_efficiency, waterfilling_digital


@dataclass(frozen=True, eq=False)
class MappingMatrix:
    """Binary N_t x N_RF connection matrix: one chain per antenna, M antennas per chain."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c)
        if c.ndim != 2 or not np.isin(c, (0, 1)).all():
            raise ValueError("mapping matrix must be a binary 2-D array")
        n_tx, n_rf = c.shape
        if n_tx % n_rf:
            raise ValueError(f"N_t={n_tx} is not a multiple of N_RF={n_rf}")
        if not (c.sum(axis=1) == 1).all():
            raise ValueError("every antenna must connect to exactly one RF chain")
        if not (c.sum(axis=0) == n_tx // n_rf).all():
            raise ValueError(f"every RF chain must connect to exactly M={n_tx // n_rf} antennas")
        object.__setattr__(self, "c", c.astype(float))

    @property
    def m(self) -> int:
        return self.c.shape[0] // self.c.shape[1]

    def mask_vector(self) -> np.ndarray:
        """Real mask c = V(C + jC) applied to the network's state vector."""
        return realify(self.c + 1j * self.c)


def _gain_matrix(h_k: np.ndarray, n_rf: int) -> np.ndarray:
    """|entries| of the N_RF strongest rows of H[k], transposed to antennas x chains."""
    h_k = np.asarray(h_k)
    if h_k.shape[0] < n_rf:
        raise ValueError(f"channel has {h_k.shape[0]} rows, need at least N_RF={n_rf}")
    norms = np.linalg.norm(h_k, axis=1)
    rows = np.sort(np.argsort(-norms, kind="stable")[:n_rf])
    return np.abs(h_k[rows]).T


def assign_antennas(gains: np.ndarray) -> MappingMatrix:
    """Connection maximizing the total matched gain sum_{m,n} C[m,n] gains[m,n].

    Each chain is replicated M times so the capacity-constrained problem becomes a
    square assignment; equal gains resolve to the block-diagonal layout.
    """
    n_tx, n_rf = gains.shape
    if n_tx % n_rf:
        raise ValueError(f"N_t={n_tx} is not a multiple of N_RF={n_rf}")
    m = n_tx // n_rf
    cost = -np.repeat(gains, m, axis=1)
    rows, cols = linear_sum_assignment(cost)
    c = np.zeros((n_tx, n_rf))
    c[rows, cols // m] = 1
    return MappingMatrix(c)


def paper_mapping(gains: np.ndarray) -> MappingMatrix:
    """Literal round-robin elimination for two RF chains.

    Each round, for each chain, the weakest still-unprocessed antenna is cut from that chain
    (and keeps the other one).  Only well defined for N_RF = 2.
    """
    n_tx, n_rf = gains.shape
    if n_rf != 2:
        raise ValueError("the elimination mapping is only consistent for N_RF = 2")
    g = gains.astype(float).copy()
    c = np.ones((n_tx, n_rf))
    for _ in range(n_tx // n_rf):
        for n in range(n_rf):
            m0 = int(np.argmin(g[:, n]))
            c[m0, n] = 0
            g[m0, :] = np.inf
    return MappingMatrix(c)


def dynamic_mapping(h_k: np.ndarray, n_rf: int, method: str = "optimal") -> MappingMatrix:
    """Channel-dependent RF chain/antenna mapping from one subcarrier's channel."""
    h_k = np.asarray(h_k)
    if h_k.shape[1] % n_rf:
        raise ValueError(f"N_t={h_k.shape[1]} is not a multiple of N_RF={n_rf}")
    if n_rf == 1:
        return MappingMatrix(np.ones((h_k.shape[1], 1)))
    gains = _gain_matrix(h_k, n_rf)
    if method == "optimal":
        return assign_antennas(gains)
    if method == "paper":
        return paper_mapping(gains)
    raise ValueError(f"unknown mapping method {method!r}")


def fixed_mapping(n_tx: int, n_rf: int) -> MappingMatrix:
    """Chain n drives antennas n*M .. (n+1)*M - 1."""
    if n_tx % n_rf:
        raise ValueError(f"N_t={n_tx} is not a multiple of N_RF={n_rf}")
    return MappingMatrix(np.kron(np.eye(n_rf), np.ones((n_tx // n_rf, 1))))


def select_best_subcarrier(channel) -> int:
    """0-based index of the subcarrier with the largest Frobenius norm (first on ties)."""
    h = channel.h if isinstance(channel, ChannelTensor) else np.asarray(channel)
    return int(np.argmax(np.linalg.norm(h, axis=(1, 2))))


def default_candidates(n_subcarriers: int) -> list[int]:
    # 1-based {1, 3, 5, ..., K-1} in 0-based indexing
    return list(range(0, max(n_subcarriers - 1, 1), 2))


@dataclass
class SubConnectedPrecoder(HybridPrecoder):
    mapping: MappingMatrix | None = None
    candidate_se: dict | None = None


def masked_design(h: np.ndarray, f_rf_full: np.ndarray, mapping: MappingMatrix, snr: float,
                  n_streams: int) -> SubConnectedPrecoder:
    f_rf = mapping.c * f_rf_full
    f_bb = waterfilling_digital(h, f_rf, snr, n_streams)
    return SubConnectedPrecoder(f_rf, f_bb, spectral_efficiency(h, f_rf, f_bb, snr), mapping)


def heuristic_sc_hbf(net: UnfoldedNet, channel, f_opt: np.ndarray, snr: float, n_iters: int = 10,
                     subcarriers=None, rng: np.random.Generator | None = None,
                     method: str = "optimal") -> SubConnectedPrecoder:
    """Mask a fully connected ManNet design with the mapping of each candidate subcarrier and
    keep the candidate with the highest SE (smallest subcarrier index wins ties)."""
    h = channel.h if isinstance(channel, ChannelTensor) else np.asarray(channel)
    n_streams = f_opt.shape[-1]
    full = fc_hbf_design(net, h, f_opt, snr, n_iters, rng)
    if subcarriers is None:
        subcarriers = default_candidates(h.shape[0])
    best = None
    scores = {}
    for k in subcarriers:
        cand = masked_design(h, full.f_rf, dynamic_mapping(h[k], net.n_rf, method), snr, n_streams)
        scores[k] = cand.se
        if best is None or cand.se > best.se:
            best = cand
    best.candidate_se = scores
    return best


def fixed_sc_hbf(net: UnfoldedNet, channel, f_opt: np.ndarray, snr: float, n_iters: int = 10,
                 rng: np.random.Generator | None = None) -> SubConnectedPrecoder:
    h = channel.h if isinstance(channel, ChannelTensor) else np.asarray(channel)
    full = fc_hbf_design(net, h, f_opt, snr, n_iters, rng)
    return masked_design(h, full.f_rf, fixed_mapping(net.n_tx, net.n_rf), snr, f_opt.shape[-1])


def submannet_mapping(h_batch: np.ndarray, n_rf: int, method: str = "optimal") -> np.ndarray:
    """Training mask for a batch, built from the best subcarrier of its first realization."""
    first = h_batch[0]
    return dynamic_mapping(first[select_best_subcarrier(first)], n_rf, method).c


def submannet_train(dataset, n_rf: int, n_streams: int, config: TrainConfig, method: str = "optimal",
                    callback=None):
    return train(dataset, n_rf, n_streams, config,
                 mask_fn=lambda hb: submannet_mapping(hb, n_rf, method), callback=callback)


def sc_hbf_design(net: UnfoldedNet, channel, f_opt: np.ndarray, snr: float, n_iters: int = 10,
                  rng: np.random.Generator | None = None, method: str = "optimal") -> SubConnectedPrecoder:
    """Masked-network design: mapping from the strongest subcarrier, then masked unfolding."""
    h = channel.h if isinstance(channel, ChannelTensor) else np.asarray(channel)
    rng = np.random.default_rng(0) if rng is None else rng
    mapping = dynamic_mapping(h[select_best_subcarrier(h)], net.n_rf, method)
    f_rf0 = mapping.c * random_analog(rng, net.n_tx, net.n_rf)
    res = run_unfolded(net, h, f_opt, snr, n_iters, f_rf0, mask=mapping.c)
    return SubConnectedPrecoder(res.f_rf, res.f_bb, res.se, mapping)
