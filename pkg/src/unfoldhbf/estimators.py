"""scikit-learn style wrappers.

``fit`` takes a sequence of :class:`ChannelTensor` (or a (n, K, N_r, N_t) array),
``predict`` returns one hybrid precoder per channel and ``score`` the mean SE.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import dbf_se, omp_hbf
from .channel import ChannelTensor, optimal_digital_precoder
from .mannet import HybridPrecoder, TrainConfig, fc_hbf_design, train
from .subnet import fixed_sc_hbf, heuristic_sc_hbf, sc_hbf_design, submannet_train


def check_channels(channels, n_tx: int | None = None) -> list:
    """Validate a channel collection; returns a list of (K, N_r, N_t) arrays or ChannelTensors."""
    if isinstance(channels, ChannelTensor):
        channels = [channels]
    elif isinstance(channels, np.ndarray):
        if channels.ndim == 3:
            channels = channels[None]
        if channels.ndim != 4:
            raise ValueError(f"expected a (n, K, N_r, N_t) array, got shape {channels.shape}")
        channels = list(channels)
    channels = list(channels)
    if not channels:
        raise ValueError("no channels given")
    shape = None
    for ch in channels:
        h = ch.h if isinstance(ch, ChannelTensor) else np.asarray(ch)
        if h.ndim != 3:
            raise ValueError(f"each channel must be (K, N_r, N_t), got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("channel contains non-finite values")
        if shape is None:
            shape = h.shape
        elif h.shape != shape:
            raise ValueError(f"inconsistent channel shapes {shape} and {h.shape}")
    if n_tx is not None and shape[2] != n_tx:
        raise ValueError(f"channels have N_t={shape[2]}, estimator was fitted with N_t={n_tx}")
    return channels


def _h(ch) -> np.ndarray:
    return ch.h if isinstance(ch, ChannelTensor) else np.asarray(ch)


class _HBFBase(BaseEstimator):
    def _snr(self) -> float:
        return 10 ** (self.snr_db / 10)

    def _f_opt(self, ch):
        return optimal_digital_precoder(_h(ch), self._snr(), self.n_streams).f_opt

    def _design(self, ch, f_opt, rng):
        raise NotImplementedError

    def predict(self, channels) -> list[HybridPrecoder]:
        check_is_fitted(self, getattr(self, "_fitted_attr", "n_tx_"))
        channels = check_channels(channels, getattr(self, "n_tx_", None))
        return [self._design(ch, self._f_opt(ch), np.random.default_rng([self.seed, i]))
                for i, ch in enumerate(channels)]

    def score(self, channels, y=None) -> float:
        return float(np.mean([p.se for p in self.predict(channels)]))


class ManNetHBF(_HBFBase):
    """Fully connected hybrid precoding with a trained unfolded network."""

    _fitted_attr = "net_"

    def __init__(self, n_rf=2, n_streams=2, n_layers=4, epochs=30, batch_size=8, inner_iters=3,
                 learning_rate=1e-4, t=0.1, init_std=0.1, train_snr_db=10.0, snr_db=10.0,
                 n_iters=10, seed=0):
        self.n_rf = n_rf
        self.n_streams = n_streams
        self.n_layers = n_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.inner_iters = inner_iters
        self.learning_rate = learning_rate
        self.t = t
        self.init_std = init_std
        self.train_snr_db = train_snr_db
        self.snr_db = snr_db
        self.n_iters = n_iters
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(n_layers=self.n_layers, epochs=self.epochs, batch_size=self.batch_size,
                           inner_iters=self.inner_iters, learning_rate=self.learning_rate, t=self.t,
                           init_std=self.init_std, train_snr_db=self.train_snr_db, seed=self.seed)

    def _train(self, channels):
        return train(channels, self.n_rf, self.n_streams, self._config())

    def fit(self, channels, y=None):
        channels = check_channels(channels)
        self.n_tx_ = _h(channels[0]).shape[2]
        if self.n_tx_ % self.n_rf:
            raise ValueError(f"N_t={self.n_tx_} is not a multiple of N_RF={self.n_rf}")
        self.net_, self.history_ = self._train(channels)
        return self

    def set_net(self, net):
        """Use an already trained network instead of calling ``fit``."""
        self.net_, self.n_tx_, self.history_ = net, net.n_tx, []
        return self

    def _design(self, ch, f_opt, rng):
        return fc_hbf_design(self.net_, _h(ch), f_opt, self._snr(), self.n_iters, rng)


class SubManNetHBF(ManNetHBF):
    """Sub-connected design with the masked network and a channel-dependent mapping."""

    def __init__(self, n_rf=2, n_streams=2, n_layers=4, epochs=30, batch_size=8, inner_iters=3,
                 learning_rate=1e-4, t=0.1, init_std=0.1, train_snr_db=10.0, snr_db=10.0,
                 n_iters=10, seed=0, mapping_method="optimal"):
        super().__init__(n_rf, n_streams, n_layers, epochs, batch_size, inner_iters, learning_rate,
                         t, init_std, train_snr_db, snr_db, n_iters, seed)
        self.mapping_method = mapping_method

    def _train(self, channels):
        return submannet_train(channels, self.n_rf, self.n_streams, self._config(), self.mapping_method)

    def _design(self, ch, f_opt, rng):
        return sc_hbf_design(self.net_, _h(ch), f_opt, self._snr(), self.n_iters, rng, self.mapping_method)


class HeuristicSCHBF(ManNetHBF):
    """Masks a fully connected ManNet design with the best of several candidate mappings."""

    def __init__(self, n_rf=2, n_streams=2, n_layers=4, epochs=30, batch_size=8, inner_iters=3,
                 learning_rate=1e-4, t=0.1, init_std=0.1, train_snr_db=10.0, snr_db=10.0,
                 n_iters=10, seed=0, mapping_method="optimal", subcarriers=None):
        super().__init__(n_rf, n_streams, n_layers, epochs, batch_size, inner_iters, learning_rate,
                         t, init_std, train_snr_db, snr_db, n_iters, seed)
        self.mapping_method = mapping_method
        self.subcarriers = subcarriers

    def _design(self, ch, f_opt, rng):
        return heuristic_sc_hbf(self.net_, _h(ch), f_opt, self._snr(), self.n_iters, self.subcarriers,
                                rng, self.mapping_method)


class FixedSCHBF(ManNetHBF):
    """Masks a fully connected ManNet design with the block-diagonal mapping."""

    def _design(self, ch, f_opt, rng):
        return fixed_sc_hbf(self.net_, _h(ch), f_opt, self._snr(), self.n_iters, rng)


class OMPHBF(_HBFBase):
    """Codebook OMP over the transmit path responses; needs channels with path metadata."""

    def __init__(self, n_rf=2, n_streams=2, snr_db=10.0, seed=0):
        self.n_rf = n_rf
        self.n_streams = n_streams
        self.snr_db = snr_db
        self.seed = seed

    def fit(self, channels=None, y=None):
        self.n_tx_ = None if channels is None else _h(check_channels(channels)[0]).shape[2]
        return self

    def _design(self, ch, f_opt, rng):
        if not isinstance(ch, ChannelTensor):
            raise TypeError("OMP needs ChannelTensor inputs carrying path angles")
        return omp_hbf(ch, f_opt, self._snr(), self.n_rf)


class DigitalBF(_HBFBase):
    """Unconstrained digital precoding (F_RF = I), the SE upper bound."""

    def __init__(self, n_streams=2, snr_db=10.0, seed=0):
        self.n_streams = n_streams
        self.snr_db = snr_db
        self.seed = seed

    def fit(self, channels=None, y=None):
        self.n_tx_ = None if channels is None else _h(check_channels(channels)[0]).shape[2]
        return self

    def _design(self, ch, f_opt, rng):
        h = _h(ch)
        return HybridPrecoder(np.eye(h.shape[2], dtype=complex), f_opt, dbf_se(h, f_opt, self._snr()))
