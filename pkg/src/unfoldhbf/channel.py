"""Wideband Saleh-Valenzuela channels with beam squint, optimal digital
precoders and the binary channel dataset format."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"HBFC"
DATASET_VERSION = 1


def upa_shape(n: int) -> tuple[int, int]:
    """Most-square (horizontal, vertical) factorization with horizontal >= vertical."""
    if n < 1:
        raise ValueError(f"antenna count must be positive, got {n}")
    n_v = int(math.isqrt(n))
    while n % n_v:
        n_v -= 1
    return n // n_v, n_v


@dataclass(frozen=True)
class SystemDims:
    n_tx: int = 16
    n_rx: int = 2
    n_rf: int = 2
    n_streams: int = 2
    n_subcarriers: int = 16
    center_freq: float = 300e9
    bandwidth: float = 30e9
    n_paths: int = 4
    tx_shape: tuple[int, int] | None = None
    rx_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.tx_shape is None:
            object.__setattr__(self, "tx_shape", upa_shape(self.n_tx))
        if self.rx_shape is None:
            object.__setattr__(self, "rx_shape", upa_shape(self.n_rx))
        if not 1 <= self.n_streams <= self.n_rf <= self.n_tx:
            raise ValueError(
                f"need 1 <= N_s <= N_RF <= N_t, got N_s={self.n_streams}, "
                f"N_RF={self.n_rf}, N_t={self.n_tx}")
        if self.n_streams > self.n_rx:
            raise ValueError(f"N_s={self.n_streams} exceeds N_r={self.n_rx}")
        if self.n_tx % self.n_rf:
            raise ValueError(f"N_t={self.n_tx} is not a multiple of N_RF={self.n_rf}")
        if self.tx_shape[0] * self.tx_shape[1] != self.n_tx:
            raise ValueError(f"tx_shape {self.tx_shape} does not factor N_t={self.n_tx}")
        if self.rx_shape[0] * self.rx_shape[1] != self.n_rx:
            raise ValueError(f"rx_shape {self.rx_shape} does not factor N_r={self.n_rx}")
        if self.n_subcarriers < 1 or self.n_paths < 1:
            raise ValueError("K and P must be positive")
        if not (self.bandwidth > 0 and self.center_freq > 0):
            raise ValueError("bandwidth and center frequency must be positive")

    @property
    def antennas_per_rf(self) -> int:
        return self.n_tx // self.n_rf

    @property
    def cyclic_prefix(self) -> float:
        return self.n_subcarriers / 4

    @property
    def max_delay(self) -> float:
        # tau_max = Q * T_s with T_s = 1 / BW
        return self.cyclic_prefix / self.bandwidth


@dataclass(frozen=True)
class PathSet:
    gains: np.ndarray
    toas: np.ndarray
    aod_az: np.ndarray
    aod_el: np.ndarray
    aoa_az: np.ndarray
    aoa_el: np.ndarray

    def __post_init__(self):
        n = len(self.gains)
        for name in ("toas", "aod_az", "aod_el", "aoa_az", "aoa_el"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"path field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.gains)

    def angles(self) -> np.ndarray:
        return np.stack([self.aod_az, self.aod_el, self.aoa_az, self.aoa_el])


@dataclass(frozen=True, eq=False)
class ChannelTensor:
    """One channel realization: ``h[k]`` is the N_r x N_t matrix of subcarrier k."""

    h: np.ndarray
    paths: PathSet
    center_freq: float
    bandwidth: float
    tx_shape: tuple[int, int] = field(default=None)

    def __post_init__(self):
        if self.h.ndim != 3:
            raise ValueError(f"channel tensor must be (K, N_r, N_t), got shape {self.h.shape}")
        if self.tx_shape is None:
            object.__setattr__(self, "tx_shape", upa_shape(self.h.shape[2]))

    @property
    def n_subcarriers(self) -> int:
        return self.h.shape[0]

    @property
    def n_rx(self) -> int:
        return self.h.shape[1]

    @property
    def n_tx(self) -> int:
        return self.h.shape[2]

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def equals(self, other: "ChannelTensor") -> bool:
        """Exact, element-wise equality (used for round-trip checks)."""
        return (
            np.array_equal(self.h, other.h)
            and np.array_equal(self.paths.gains, other.paths.gains)
            and np.array_equal(self.paths.toas, other.paths.toas)
            and np.array_equal(self.paths.angles(), other.paths.angles())
            and self.center_freq == other.center_freq
            and self.bandwidth == other.bandwidth
        )


def subcarrier_frequencies(dims: SystemDims) -> np.ndarray:
    """f_k = f_c + BW (2k - 1 - K) / (2K) for k = 1..K."""
    K = dims.n_subcarriers
    k = np.arange(1, K + 1)
    return dims.center_freq + dims.bandwidth * (2 * k - 1 - K) / (2 * K)


def array_response(n_h: int, n_v: int, az, el, f, f_c) -> np.ndarray:
    """Half-wavelength UPA steering vector.

    The element for index pair (i_h, i_v) sits at flat position ``i_h * n_v + i_v``.
    ``az``/``el`` may be arrays of equal length, in which case the result has one
    column per angle pair.
    """
    if n_h < 1 or n_v < 1:
        raise ValueError("array dimensions must be positive")
    az = np.asarray(az, dtype=float)
    el = np.asarray(el, dtype=float)
    scalar = az.ndim == 0
    az, el = np.atleast_1d(az), np.atleast_1d(el)
    i_h = np.repeat(np.arange(n_h), n_v)
    i_v = np.tile(np.arange(n_v), n_h)
    phase = np.outer(i_h, np.sin(az) * np.sin(el)) + np.outer(i_v, np.cos(el))
    a = np.exp(1j * np.pi * (f / f_c) * phase) / np.sqrt(n_h * n_v)
    return a[:, 0] if scalar else a


def sample_paths(dims: SystemDims, rng: np.random.Generator) -> PathSet:
    P = dims.n_paths
    gains = (rng.standard_normal(P) + 1j * rng.standard_normal(P)) / np.sqrt(2)
    toas = rng.uniform(0.0, dims.max_delay, P)
    aod_az = rng.uniform(0.0, 2 * np.pi, P)
    aod_el = rng.uniform(-np.pi / 2, np.pi / 2, P)
    aoa_az = rng.uniform(0.0, 2 * np.pi, P)
    aoa_el = rng.uniform(-np.pi / 2, np.pi / 2, P)
    return PathSet(gains, toas, aod_az, aod_el, aoa_az, aoa_el)


def channel_from_paths(dims: SystemDims, paths: PathSet) -> ChannelTensor:
    xi = np.sqrt(dims.n_rx * dims.n_tx / len(paths))
    freqs = subcarrier_frequencies(dims)
    h = np.empty((dims.n_subcarriers, dims.n_rx, dims.n_tx), dtype=complex)
    for k, f in enumerate(freqs):
        a_t = array_response(*dims.tx_shape, paths.aod_az, paths.aod_el, f, dims.center_freq)
        a_r = array_response(*dims.rx_shape, paths.aoa_az, paths.aoa_el, f, dims.center_freq)
        coef = xi * paths.gains * np.exp(-2j * np.pi * paths.toas * f)
        h[k] = (a_r * coef) @ a_t.conj().T
    return ChannelTensor(h, paths, dims.center_freq, dims.bandwidth, dims.tx_shape)


def generate_channel(dims: SystemDims, rng: np.random.Generator) -> ChannelTensor:
    return channel_from_paths(dims, sample_paths(dims, rng))


def realization_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for realization ``index`` of substream ``stream``."""
    return np.random.default_rng([seed, stream, index])


def generate_dataset(dims: SystemDims, count: int, seed: int, stream: int = 0) -> list[ChannelTensor]:
    return [generate_channel(dims, realization_rng(seed, i, stream)) for i in range(count)]


# -- optimal fully digital precoding ---------------------------------------

def water_filling(gains, budget: float) -> np.ndarray:
    """Powers maximizing sum(log(1 + p_i g_i)) subject to sum(p_i) = budget, p_i >= 0.

    Channels with zero gain get zero power.
    """
    gains = np.asarray(gains, dtype=float)
    p = np.zeros_like(gains)
    live = np.flatnonzero(gains > 0)
    if live.size == 0 or budget <= 0:
        return p
    order = live[np.argsort(-gains[live], kind="stable")]
    inv = 1.0 / gains[order]
    for n in range(len(order), 0, -1):
        level = (budget + inv[:n].sum()) / n
        if level - inv[n - 1] > 0:
            p[order[:n]] = level - inv[:n]
            break
    return p


@dataclass(frozen=True, eq=False)
class DigitalOptimal:
    f_opt: np.ndarray       # (K, N_t, N_s)
    powers: np.ndarray      # (K, N_s)
    singular_values: np.ndarray  # (K, N_s)
    snr: float              # rho / sigma_n^2


def optimal_digital_precoder(channel: ChannelTensor | np.ndarray, snr: float, n_streams: int) -> DigitalOptimal:
    """Per-subcarrier SVD precoder with water-filling across the N_s streams.

    ``snr`` is rho / sigma_n^2 (linear). Each subcarrier gets budget N_s.
    """
    h = channel.h if isinstance(channel, ChannelTensor) else np.asarray(channel)
    K, n_rx, n_tx = h.shape
    if n_streams > min(n_rx, n_tx):
        raise ValueError(f"N_s={n_streams} exceeds min(N_r, N_t)={min(n_rx, n_tx)}")
    _, s, vh = np.linalg.svd(h)
    s = s[:, :n_streams]
    v = vh[:, :n_streams, :].conj().transpose(0, 2, 1)
    cutoff = 1e-12 * np.maximum(s[:, :1], np.finfo(float).tiny)
    gains = np.where(s > cutoff, snr / n_streams * s**2, 0.0)
    powers = np.stack([water_filling(g, n_streams) for g in gains])
    return DigitalOptimal(v * np.sqrt(powers)[:, None, :], powers, s, snr)


# -- dataset file -----------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIdd")


def dataset_write(path, channels: list[ChannelTensor], center_freq: float | None = None,
                  bandwidth: float | None = None) -> None:
    if channels:
        first = channels[0]
        shape = first.h.shape
        n_paths = first.n_paths
        for ch in channels[1:]:
            if ch.h.shape != shape or ch.n_paths != n_paths:
                raise ValueError("dataset realizations must share dimensions")
        K, n_rx, n_tx = shape
        center_freq, bandwidth = first.center_freq, first.bandwidth
    else:
        K = n_rx = n_tx = n_paths = 0
        center_freq = center_freq or 0.0
        bandwidth = bandwidth or 0.0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n_tx, n_rx, K, n_paths,
                              len(channels), center_freq, bandwidth))
        for ch in channels:
            p = ch.paths
            fh.write(np.ascontiguousarray(p.gains, dtype="<c16").tobytes())
            fh.write(np.ascontiguousarray(p.toas, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.angles(), dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ch.h, dtype="<c16").tobytes())


def dataset_read(path) -> list[ChannelTensor]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: file shorter than dataset header")
    magic, version, n_tx, n_rx, K, P, count, f_c, bw = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    per = 16 * P + 8 * P + 32 * P + 16 * K * n_rx * n_tx
    if len(data) != _HEADER.size + count * per:
        raise ValueError(
            f"{path}: payload length {len(data) - _HEADER.size} does not match header "
            f"({count} realizations x {per} bytes)")
    channels = []
    off = _HEADER.size
    for _ in range(count):
        gains = np.frombuffer(data, "<c16", P, off).astype(complex)
        off += 16 * P
        toas = np.frombuffer(data, "<f8", P, off).astype(float)
        off += 8 * P
        ang = np.frombuffer(data, "<f8", 4 * P, off).astype(float).reshape(4, P)
        off += 32 * P
        h = np.frombuffer(data, "<c16", K * n_rx * n_tx, off).astype(complex).reshape(K, n_rx, n_tx)
        off += 16 * K * n_rx * n_tx
        paths = PathSet(gains, toas, *ang)
        channels.append(ChannelTensor(h, paths, f_c, bw))
    return channels
