"""Matrix-factorization view of hybrid precoding.

The analog precoder F_RF is carried as the real vector ``x = [Re vec(F_RF); Im vec(F_RF)]``
(column-major ``vec``).  For a digital precoder F_BB[k] the linear map
``x -> B[k] x`` is the real form of ``vec(F_RF) -> vec(F_RF F_BB[k])``, so the
Kronecker-structured matrix never has to be stored: :class:`StructuredB` keeps
only the N_RF x N_s coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import water_filling

PINV_RCOND = 1e-12
MAX_CONDITION = 1e12


class ConditioningError(np.linalg.LinAlgError):
    """F_RF^H F_RF is too close to singular for a stable Q^{-1/2}."""


def realify(f: np.ndarray) -> np.ndarray:
    """Complex (..., rows, cols) matrix -> real (..., 2*rows*cols) vector."""
    f = np.asarray(f)
    v = np.swapaxes(f, -1, -2).reshape(*f.shape[:-2], -1)
    return np.concatenate([v.real, v.imag], axis=-1)


def derealify(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = rows * cols
    if x.shape[-1] != 2 * n:
        raise ValueError(f"vector length {x.shape[-1]} does not match 2*{rows}*{cols}")
    v = x[..., :n] + 1j * x[..., n:]
    return np.swapaxes(v.reshape(*x.shape[:-1], cols, rows), -1, -2)


def unit_modulus_project(x: np.ndarray, rows: int, cols: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Map every entry of V^{-1}(x) to exp(j arg(entry)); zero entries become 1.

    With ``mask`` (N_t x N_RF binary), entries outside the mask are forced to 0.
    """
    f = derealify(x, rows, cols)
    out = np.exp(1j * np.angle(f))
    if mask is not None:
        out = np.where(np.asarray(mask) != 0, out, 0)
    return out


class StructuredB:
    """Real block-sparse matrix B[k] = realform(F_BB[k]^T kron I_{N_t}).

    Row ``(part, s, m)`` couples only to columns ``(part', r, m)`` through the
    scalar F_BB[k][r, s], so each row has 2 N_RF nonzeros and each column 2 N_s.
    """

    def __init__(self, f_bb: np.ndarray, n_tx: int):
        self.f_bb = np.asarray(f_bb, dtype=complex)
        self.n_tx = n_tx
        self.n_rf, self.n_streams = self.f_bb.shape

    @property
    def shape(self) -> tuple[int, int]:
        return 2 * self.n_tx * self.n_streams, 2 * self.n_tx * self.n_rf

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return realify(derealify(x, self.n_tx, self.n_rf) @ self.f_bb)

    def rmatvec(self, z: np.ndarray) -> np.ndarray:
        return realify(derealify(z, self.n_tx, self.n_streams) @ self.f_bb.conj().T)

    def gram(self) -> np.ndarray:
        """Coefficient matrix S with B^T B x = realify(V^{-1}(x) @ S)."""
        return self.f_bb @ self.f_bb.conj().T

    def to_dense(self) -> np.ndarray:
        """Dense materialization, for cross-checks only."""
        bt = np.kron(self.f_bb.T, np.eye(self.n_tx))
        return np.block([[bt.real, -bt.imag], [bt.imag, bt.real]])


def build_B(f_bb_k: np.ndarray, n_tx: int) -> StructuredB:
    return StructuredB(f_bb_k, n_tx)


@dataclass(frozen=True, eq=False)
class RealStack:
    """Real-valued quantities of one channel realization for a fixed F_BB set.

    ``gram`` is sum_k F_BB[k] F_BB[k]^H, which determines sum_k B[k]^T B[k].
    """

    x: np.ndarray
    z: np.ndarray          # (K, 2 N_t N_s)
    z_bar: np.ndarray      # (2 N_t N_RF,)
    gram: np.ndarray       # (N_RF, N_RF) Hermitian
    z_energy: float        # sum_k ||z[k]||^2
    f_bb: np.ndarray       # (K, N_RF, N_s)
    n_tx: int

    @property
    def b(self) -> list[StructuredB]:
        return [StructuredB(f, self.n_tx) for f in self.f_bb]

    def b_bar_matvec(self, x: np.ndarray) -> np.ndarray:
        """sum_k B[k]^T B[k] x."""
        return realify(derealify(x, self.n_tx, self.gram.shape[0]) @ self.gram)

    def objective(self, x: np.ndarray) -> float:
        """sum_k ||z[k] - B[k] x||^2, evaluated per subcarrier."""
        return float(sum(np.sum((zk - bk.matvec(x)) ** 2) for zk, bk in zip(self.z, self.b)))


def real_stack(f_opt: np.ndarray, f_rf: np.ndarray, f_bb: np.ndarray) -> RealStack:
    f_opt = np.asarray(f_opt)
    f_bb = np.asarray(f_bb)
    n_tx = f_opt.shape[-2]
    z_bar = realify(np.einsum("kts,krs->tr", f_opt, f_bb.conj()))
    gram = np.einsum("krs,kqs->rq", f_bb, f_bb.conj())
    return RealStack(realify(f_rf), realify(f_opt), z_bar, gram,
                     float(np.sum(np.abs(f_opt) ** 2)), f_bb, n_tx)


def residual_objective(f_opt: np.ndarray, f_rf: np.ndarray, f_bb: np.ndarray) -> float:
    """sum_k ||F_opt[k] - F_RF F_BB[k]||_F^2."""
    r = np.asarray(f_opt) - np.asarray(f_rf) @ np.asarray(f_bb)
    return float(np.sum(np.abs(r) ** 2))


def pinv(a: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Minimum-norm pseudo-inverse (stack-aware); singular values below rcond * max are dropped."""
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    keep = s > rcond * s[..., :1]
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vh.conj().swapaxes(-1, -2) * s_inv[..., None, :]) @ u.conj().swapaxes(-1, -2)


def ls_digital(f_rf: np.ndarray, f_opt: np.ndarray) -> np.ndarray:
    """F_BB = F_RF^dagger F_opt; ``f_opt`` may be one matrix or a (K, N_t, N_s) stack."""
    return pinv(f_rf) @ f_opt


def inv_sqrt_hermitian(q: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(q)
    if w.min() <= 0 or w.max() / w.min() > MAX_CONDITION:
        raise ConditioningError(
            f"F_RF^H F_RF condition number {w.max() / max(w.min(), 1e-300):.3g} exceeds {MAX_CONDITION:.0e}")
    return (v / np.sqrt(w)) @ v.conj().T


def waterfilling_digital(h: np.ndarray, f_rf: np.ndarray, snr: float, n_streams: int) -> np.ndarray:
    """SE-maximizing F_BB[k] = Q^{-1/2} U~ Gamma~ for a fixed analog precoder.

    ``h`` is one N_r x N_t matrix or a (K, N_r, N_t) stack; ``snr`` = rho / sigma_n^2.
    The result satisfies ||F_RF F_BB[k]||_F^2 = N_s.
    """
    h = np.asarray(h)
    single = h.ndim == 2
    hs = h[None] if single else h
    q_isqrt = inv_sqrt_hermitian(f_rf.conj().T @ f_rf)
    eff = hs @ f_rf @ q_isqrt
    _, s, vh = np.linalg.svd(eff)
    if s.shape[-1] < n_streams:
        raise ValueError(f"effective channel supports at most {s.shape[-1]} streams, N_s={n_streams}")
    s = s[:, :n_streams]
    u = vh[:, :n_streams, :].conj().transpose(0, 2, 1)
    p = np.stack([water_filling(snr / n_streams * sk**2, n_streams) for sk in s])
    f_bb = q_isqrt @ (u * np.sqrt(p)[:, None, :])
    return f_bb[0] if single else f_bb


def spectral_efficiency(h: np.ndarray, f_rf: np.ndarray, f_bb: np.ndarray, snr: float) -> float:
    """Average per-subcarrier SE with the optimal fully digital combiner.

    V[k] holds the top-N_s left singular vectors of H[k] F_RF F_BB[k].
    """
    h = np.asarray(h)
    f_bb = np.asarray(f_bb)
    n_streams = f_bb.shape[-1]
    g = h @ f_rf @ f_bb
    u, _, _ = np.linalg.svd(g)
    v = u[..., :n_streams]
    m = v.conj().swapaxes(-1, -2) @ g
    a = np.eye(n_streams) + snr / n_streams * (m @ m.conj().swapaxes(-1, -2))
    _, logdet = np.linalg.slogdet(a)
    return float(np.mean(logdet) / np.log(2))


def analog_se(h: np.ndarray, c: np.ndarray, f_rf: np.ndarray, snr: float, n_streams: int) -> float:
    """SE of the masked analog precoder alone: mean_k log2 det(I + snr/N_s H A A^H H^H)."""
    h = np.asarray(h)
    a = np.asarray(c) * f_rf
    g = h @ a
    m = np.eye(h.shape[-2]) + snr / n_streams * (g @ g.conj().swapaxes(-1, -2))
    _, logdet = np.linalg.slogdet(m)
    return float(np.mean(logdet) / np.log(2))
