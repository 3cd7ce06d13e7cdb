"""Reference designs: the fully digital upper bound, OMP hybrid precoding, and the
closed-form operation counts of every scheme."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelTensor, array_response
from .mannet import HybridPrecoder
from .precoding import ls_digital, spectral_efficiency, waterfilling_digital

SCHEMES = ("mannet-fc", "heuristic-sc", "submannet-sc", "fixed-sc", "omp")


def dbf_se(channel, f_opt: np.ndarray, snr: float) -> float:
    """SE of the unconstrained digital precoder (F_RF = I)."""
    h = channel.h if isinstance(channel, ChannelTensor) else np.asarray(channel)
    return spectral_efficiency(h, np.eye(h.shape[-1]), f_opt, snr)


def path_codebook(channel: ChannelTensor) -> np.ndarray:
    """Transmit array responses at the center frequency, one unit-norm column per path."""
    p = channel.paths
    return array_response(*channel.tx_shape, p.aod_az, p.aod_el, channel.center_freq, channel.center_freq)


@dataclass
class OMPResult(HybridPrecoder):
    selected: list | None = None
    residual_norms: list | None = None


def omp_hbf(channel: ChannelTensor, f_opt: np.ndarray, snr: float, n_rf: int,
            codebook: np.ndarray | None = None) -> OMPResult:
    """Wideband OMP: one analog selection shared by all subcarriers.

    At each step the atom with the largest correlation energy summed over subcarriers and
    streams is added; the digital part is refit by LS, and finally by water-filling.
    """
    h = channel.h
    atoms = path_codebook(channel) if codebook is None else np.asarray(codebook)
    if atoms.shape[1] < n_rf:
        raise ValueError(f"codebook has {atoms.shape[1]} atoms, fewer than N_RF={n_rf}")
    residual = f_opt.copy()
    selected: list[int] = []
    norms = [float(np.linalg.norm(residual))]
    for _ in range(n_rf):
        corr = np.einsum("tp,kts->kps", atoms.conj(), residual)
        score = np.sum(np.abs(corr) ** 2, axis=(0, 2))
        score[selected] = -np.inf
        selected.append(int(np.argmax(score)))
        f_rf = np.exp(1j * np.angle(atoms[:, selected]))
        f_bb = ls_digital(f_rf, f_opt)
        residual = f_opt - f_rf @ f_bb
        norms.append(float(np.linalg.norm(residual)))
    f_bb = waterfilling_digital(h, f_rf, snr, f_opt.shape[-1])
    return OMPResult(f_rf, f_bb, spectral_efficiency(h, f_rf, f_bb, snr), selected, norms)


def complexity_estimate(scheme: str, n_tx: int, n_rf: int, n_streams: int, n_subcarriers: int,
                        n_layers: int = 4, n_iters: int = 10, n_rx: int = 2, n_paths: int = 4,
                        n_candidates: int | None = None) -> float:
    """Approximate operation counts of the closed-form complexity expressions."""
    Nt, Nrf, Ns, K, L, I = n_tx, n_rf, n_streams, n_subcarriers, n_layers, n_iters
    if min(Nt, Nrf, Ns, K, L, I, n_rx, n_paths) < 1:
        raise ValueError("all dimensions must be positive")
    outer = (I - 1) * Nt * K * Nrf**2 + Nt * K * Nrf
    if scheme == "mannet-fc":
        return float(outer + I * (2 * K * Nrf**2 * Ns + L * (3 * Nt * Nrf + 2 * K * Nrf * Ns)))
    if scheme in ("heuristic-sc", "fixed-sc"):
        if scheme == "fixed-sc":
            n_candidates = 1
        elif n_candidates is None:
            n_candidates = max(K // 2, 1)
        fc = complexity_estimate("mannet-fc", Nt, Nrf, Ns, K, L, I, n_rx, n_paths)
        return float(fc + n_candidates * 2 * Nt * n_rx * Nrf)
    if scheme == "submannet-sc":
        return float(outer + I * (2 * K * Nrf**2 * Ns + L * (3 * Nt + 2 * K * Ns)))
    if scheme == "omp":
        return float(Nt * K * Nrf**2 + 2 * Nt * n_paths * Ns + 4 * Nt * Nrf**2 + 4 * Nt * Nrf * Ns)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def layer_cost(scheme: str, n_tx: int, n_rf: int, n_streams: int, n_subcarriers: int) -> float:
    """Per-layer network cost term of the unfolded schemes."""
    if scheme == "mannet-fc":
        return float(3 * n_tx * n_rf + 2 * n_subcarriers * n_rf * n_streams)
    if scheme == "submannet-sc":
        return float(3 * n_tx + 2 * n_subcarriers * n_streams)
    raise ValueError(f"no layer cost for scheme {scheme!r}")
