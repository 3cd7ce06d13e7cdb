"""ManNet: an unfolded projected-gradient network for the analog precoder.

Layer l computes ``x_l = psi_t(w_l1 * x_{l-1} + w_l2 * u_{l-1})`` with
``u = -z_bar + sum_k B_bar[k] x``.  Everything here is batched over channel
realizations on the leading axis and the reverse pass is written by hand.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import ChannelTensor, optimal_digital_precoder
from .precoding import (derealify, ls_digital, pinv, realify, spectral_efficiency,
                        unit_modulus_project, waterfilling_digital)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"MNET"
MODEL_VERSION = 1


def psi(x: np.ndarray, t: float) -> np.ndarray:
    """-1 + (relu(x + t) - relu(x - t)) / t, evaluated as clip(x / t, -1, 1).

    The two forms are equal; the clipped one never rounds past +-1.
    """
    if t <= 0:
        raise ValueError(f"activation parameter t must be positive, got {t}")
    return np.clip(x / t, -1.0, 1.0)


def psi_grad(x: np.ndarray, t: float) -> np.ndarray:
    # derivative taken as 0 at the kinks |x| = t
    return np.where(np.abs(x) < t, 1.0 / t, 0.0)


@dataclass
class UnfoldedNet:
    """Per-layer element-wise weights; ``weights[l, 0]`` acts on x, ``weights[l, 1]`` on u."""

    weights: np.ndarray
    t: float
    n_tx: int
    n_rf: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        n = 2 * self.n_tx * self.n_rf
        if self.weights.ndim != 3 or self.weights.shape[1:] != (2, n):
            raise ValueError(f"weights must have shape (L, 2, {n}), got {self.weights.shape}")
        if self.n_layers < 2:
            raise ValueError("an unfolded net needs L >= 2 (the layer-1 loss weight ln(1) is zero)")
        if not self.t > 0:
            raise ValueError(f"activation parameter t must be positive, got {self.t}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights contain non-finite values")

    @classmethod
    def random(cls, n_layers: int, n_tx: int, n_rf: int, t: float = 0.5, std: float = 0.1,
               rng: np.random.Generator | None = None) -> "UnfoldedNet":
        rng = np.random.default_rng() if rng is None else rng
        w = rng.normal(0.0, std, size=(n_layers, 2, 2 * n_tx * n_rf))
        return cls(w, t, n_tx, n_rf)

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return 2 * self.n_tx * self.n_rf


@dataclass
class Problem:
    """Inputs the network sees for a batch: z_bar (b, N), Gram coefficients S (b, N_RF, N_RF)
    with sum_k B_bar[k] x = realify(V^{-1}(x) S), and sum_k ||z[k]||^2 per realization."""

    z_bar: np.ndarray
    gram: np.ndarray
    z_energy: np.ndarray
    n_subcarriers: int
    n_tx: int

    @classmethod
    def from_precoders(cls, f_opt: np.ndarray, f_bb: np.ndarray) -> "Problem":
        """``f_opt`` (b, K, N_t, N_s), ``f_bb`` (b, K, N_RF, N_s)."""
        f_opt = np.asarray(f_opt)
        f_bb = np.asarray(f_bb)
        if f_opt.ndim == 3:
            f_opt, f_bb = f_opt[None], f_bb[None]
        z_bar = realify(np.einsum("bkts,bkrs->btr", f_opt, f_bb.conj()))
        gram = np.einsum("bkrs,bkqs->brq", f_bb, f_bb.conj())
        z_energy = np.sum(np.abs(f_opt) ** 2, axis=(1, 2, 3))
        return cls(z_bar, gram, z_energy, f_opt.shape[1], f_opt.shape[2])

    @property
    def n_rf(self) -> int:
        return self.gram.shape[-1]

    def b_bar(self, x: np.ndarray) -> np.ndarray:
        return realify(derealify(x, self.n_tx, self.n_rf) @ self.gram)

    def compute_u(self, x: np.ndarray) -> np.ndarray:
        return self.b_bar(x) - self.z_bar

    def objective(self, x: np.ndarray) -> np.ndarray:
        """sum_k ||z[k] - B[k] x||^2 per realization via the quadratic expansion."""
        return self.z_energy + np.sum(x * (self.b_bar(x) - 2.0 * self.z_bar), axis=-1)


def compute_u(x: np.ndarray, z_bar: np.ndarray, gram: np.ndarray, n_tx: int) -> np.ndarray:
    """u = -z_bar + sum_k B_bar[k] x using the structured product."""
    n_rf = gram.shape[-1]
    return realify(derealify(x, n_tx, n_rf) @ gram) - z_bar


@dataclass
class ForwardTrace:
    xs: list = field(default_factory=list)      # x_0 .. x_L
    us: list = field(default_factory=list)      # u_0 .. u_{L-1} (masked when a mask is used)
    x_hats: list = field(default_factory=list)  # pre-activations of layers 1 .. L
    mask: np.ndarray | None = None

    @property
    def output(self) -> np.ndarray:
        return self.xs[-1]


def forward(net: UnfoldedNet, problem: Problem, mask: np.ndarray | None = None) -> ForwardTrace:
    """Run all layers from x_0 = 0.  With ``mask`` (the real vector c) both the input u and the
    activation are multiplied by c, as in subManNet."""
    x = np.zeros_like(problem.z_bar)
    trace = ForwardTrace(mask=mask)
    trace.xs.append(x)
    for w in net.weights:
        u = problem.compute_u(x)
        if mask is not None:
            u = mask * u
        x_hat = w[0] * x + w[1] * u
        x = psi(x_hat, net.t)
        if mask is not None:
            x = mask * x
        trace.us.append(u)
        trace.x_hats.append(x_hat)
        trace.xs.append(x)
    return trace


def layer_weights(n_layers: int) -> np.ndarray:
    return np.log(np.arange(1, n_layers + 1))


def loss(trace: ForwardTrace, problem: Problem) -> float:
    """sum_l ln(l) * (1 / (K |batch|)) * sum_b sum_k ||z[k] - B[k] x_l||^2."""
    n_batch = problem.z_bar.shape[0]
    scale = 1.0 / (problem.n_subcarriers * n_batch)
    lw = layer_weights(len(trace.xs) - 1)
    return float(sum(c * scale * np.sum(problem.objective(x)) for c, x in zip(lw, trace.xs[1:])))


def backward(trace: ForwardTrace, net: UnfoldedNet, problem: Problem) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to ``net.weights``."""
    n_batch = problem.z_bar.shape[0]
    scale = 1.0 / (problem.n_subcarriers * n_batch)
    lw = layer_weights(net.n_layers)
    mask = trace.mask
    grads = np.zeros_like(net.weights)
    # d objective / dx = 2 (B_bar x - z_bar); the unmasked u is needed here
    upstream = np.zeros_like(trace.xs[0])
    for layer in range(net.n_layers, 0, -1):
        x_l = trace.xs[layer]
        g_x = 2.0 * scale * lw[layer - 1] * problem.compute_u(x_l) + upstream
        g_hat = g_x * psi_grad(trace.x_hats[layer - 1], net.t)
        if mask is not None:
            g_hat = mask * g_hat
        w = net.weights[layer - 1]
        grads[layer - 1, 0] = np.sum(g_hat * trace.xs[layer - 1], axis=0)
        grads[layer - 1, 1] = np.sum(g_hat * trace.us[layer - 1], axis=0)
        through_u = w[1] * g_hat
        if mask is not None:
            through_u = mask * through_u
        upstream = w[0] * g_hat + problem.b_bar(through_u)
    return grads


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.step_count = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads * grads
        m_hat = self.m / (1 - self.beta1 ** self.step_count)
        v_hat = self.v / (1 - self.beta2 ** self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    n_layers: int = 4
    epochs: int = 30
    batch_size: int = 8
    inner_iters: int = 3
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: float = 0.1
    init_std: float = 0.1
    train_snr_db: float = 10.0
    project_between_iters: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "epochs", "batch_size", "inner_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.learning_rate > 0 and self.t > 0 and self.init_std > 0):
            raise ValueError("learning_rate, t and init_std must be positive")


@dataclass
class LossRecord:
    epoch: int
    batch: int
    inner_iter: int
    loss: float


class TrainingDiverged(RuntimeError):
    pass


def _channel_array(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        h = dataset
    else:
        h = np.stack([ch.h if isinstance(ch, ChannelTensor) else np.asarray(ch) for ch in dataset])
    if h.ndim != 4:
        raise ValueError(f"expected a stack of (K, N_r, N_t) channels, got shape {h.shape}")
    return h


def random_analog(rng: np.random.Generator, n_tx: int, n_rf: int, batch: int | None = None) -> np.ndarray:
    shape = (n_tx, n_rf) if batch is None else (batch, n_tx, n_rf)
    return np.exp(1j * rng.uniform(0.0, 2 * np.pi, shape))


def train(dataset, n_rf: int, n_streams: int, config: TrainConfig,
          mask_fn=None, callback=None) -> tuple[UnfoldedNet, list[LossRecord]]:
    """Unsupervised training of the unfolded network (alternating LS / network updates).

    ``mask_fn(h_batch) -> C`` (N_t x N_RF) switches on masked (subManNet) training; the mask
    is rebuilt for every batch.
    """
    h = _channel_array(dataset)
    n_data = h.shape[0]
    if n_data == 0:
        raise ValueError("training set is empty")
    n_tx = h.shape[3]
    snr = 10 ** (config.train_snr_db / 10)
    f_opt = np.stack([optimal_digital_precoder(hi, snr, n_streams).f_opt for hi in h])

    rng = np.random.default_rng(config.seed)
    net = UnfoldedNet.random(config.n_layers, n_tx, n_rf, config.t, config.init_std, rng)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    n_batches = math.ceil(n_data / config.batch_size)
    history: list[LossRecord] = []

    for epoch in range(config.epochs):
        batches = np.array_split(rng.permutation(n_data), n_batches)
        for b, idx in enumerate(batches):
            fopt_b = f_opt[idx]
            c = mask_vec = None
            if mask_fn is not None:
                c = np.asarray(mask_fn(h[idx]), dtype=float)
                mask_vec = realify(c + 1j * c)
            f_rf = random_analog(rng, n_tx, n_rf, len(idx))
            if c is not None:
                f_rf = f_rf * c
            f_bb = pinv(f_rf)[:, None] @ fopt_b
            for i in range(config.inner_iters):
                problem = Problem.from_precoders(fopt_b, f_bb)
                trace = forward(net, problem, mask_vec)
                value = loss(trace, problem)
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, iteration {i}")
                grads = backward(trace, net, problem)
                net.weights = opt.step(net.weights, grads)
                history.append(LossRecord(epoch, b, i, value))
                x_out = trace.output
                if config.project_between_iters:
                    f_rf = unit_modulus_project(x_out, n_tx, n_rf, c)
                else:
                    f_rf = derealify(x_out, n_tx, n_rf)
                f_bb = pinv(f_rf)[:, None] @ fopt_b
        if callback is not None:
            callback(epoch, net, history)
        logger.debug("epoch %d mean loss %.6g", epoch,
                     np.mean([r.loss for r in history if r.epoch == epoch]))
    return net, history


def validation_loss(net: UnfoldedNet, dataset, n_rf: int, n_streams: int, snr: float,
                    seed: int = 0, mask_fn=None) -> float:
    """Mean weighted loss of ``net`` on held-out channels from a random analog start."""
    h = _channel_array(dataset)
    n_tx = h.shape[3]
    f_opt = np.stack([optimal_digital_precoder(hi, snr, n_streams).f_opt for hi in h])
    rng = np.random.default_rng(seed)
    f_rf = random_analog(rng, n_tx, n_rf, h.shape[0])
    mask_vec = None
    if mask_fn is not None:
        c = np.asarray(mask_fn(h), dtype=float)
        f_rf = f_rf * c
        mask_vec = realify(c + 1j * c)
    problem = Problem.from_precoders(f_opt, pinv(f_rf)[:, None] @ f_opt)
    return loss(forward(net, problem, mask_vec), problem)


def select_t(train_set, val_set, n_rf: int, n_streams: int, config: TrainConfig,
             candidates=(0.1, 0.25, 0.5, 1.0), mask_fn=None):
    """Train once per activation parameter and keep the lowest validation loss.

    Returns ``(best_t, {t: validation loss})``.
    """
    snr = 10 ** (config.train_snr_db / 10)
    scores = {}
    for t in candidates:
        net, _ = train(train_set, n_rf, n_streams, replace(config, t=t), mask_fn=mask_fn)
        scores[t] = validation_loss(net, val_set, n_rf, n_streams, snr, config.seed, mask_fn)
    return min(scores, key=scores.get), scores


@dataclass
class HybridPrecoder:
    f_rf: np.ndarray   # (N_t, N_RF)
    f_bb: np.ndarray   # (K, N_RF, N_s)
    se: float


def run_unfolded(net: UnfoldedNet, h: np.ndarray, f_opt: np.ndarray, snr: float, n_iters: int,
                 f_rf0: np.ndarray, mask: np.ndarray | None = None) -> HybridPrecoder:
    """Alternate network analog updates with LS digital updates; the final F_BB is water-filled."""
    if n_iters < 1:
        raise ValueError("need at least one design iteration")
    n_tx, n_rf = f_rf0.shape
    n_streams = f_opt.shape[-1]
    mask_vec = None if mask is None else realify(mask + 1j * mask)
    f_rf = f_rf0
    f_bb = ls_digital(f_rf, f_opt)
    for i in range(n_iters):
        problem = Problem.from_precoders(f_opt, f_bb)
        trace = forward(net, problem, mask_vec)
        f_rf = unit_modulus_project(trace.output[0], n_tx, n_rf, mask)
        if i < n_iters - 1:
            f_bb = ls_digital(f_rf, f_opt)
        else:
            f_bb = waterfilling_digital(h, f_rf, snr, n_streams)
    return HybridPrecoder(f_rf, f_bb, spectral_efficiency(h, f_rf, f_bb, snr))


def fc_hbf_design(net: UnfoldedNet, channel, f_opt: np.ndarray, snr: float, n_iters: int = 10,
                  rng: np.random.Generator | None = None) -> HybridPrecoder:
    """Fully connected hybrid design from a random unit-modulus start."""
    h = channel.h if isinstance(channel, ChannelTensor) else np.asarray(channel)
    rng = np.random.default_rng(0) if rng is None else rng
    f_rf0 = random_analog(rng, net.n_tx, net.n_rf)
    return run_unfolded(net, h, f_opt, snr, n_iters, f_rf0)


# -- model file ---------------------------------------------------------------

_MODEL_HEADER = struct.Struct("<4sIIIId")


def model_write(path, net: UnfoldedNet) -> None:
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, net.n_tx, net.n_rf, net.n_layers, net.t))
        fh.write(np.ascontiguousarray(net.weights, dtype="<f8").tobytes())


def model_read(path, n_tx: int | None = None, n_rf: int | None = None) -> UnfoldedNet:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise ValueError(f"{path}: file shorter than model header")
    magic, version, m_tx, m_rf, n_layers, t = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    if (n_tx is not None and n_tx != m_tx) or (n_rf is not None and n_rf != m_rf):
        raise ValueError(f"{path}: model is for N_t={m_tx}, N_RF={m_rf}; expected N_t={n_tx}, N_RF={n_rf}")
    count = n_layers * 2 * 2 * m_tx * m_rf
    if len(data) != _MODEL_HEADER.size + 8 * count:
        raise ValueError(f"{path}: weight payload has {len(data) - _MODEL_HEADER.size} bytes, expected {8 * count}")
    w = np.frombuffer(data, "<f8", count, _MODEL_HEADER.size).astype(float)
    return UnfoldedNet(w.reshape(n_layers, 2, 2 * m_tx * m_rf), t, m_tx, m_rf)
