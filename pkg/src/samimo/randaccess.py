"""Grant-free random access: preambles, received signal, features, detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from samimo.chansim import UplinkChannelSet
from samimo.kernels import amp_mmv_kernel, somp_kernel
from samimo.rng import RandomSource

QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2.0)


@dataclass
class PreambleBook:
    """K x L_max unit-modulus QPSK signatures (one row per user)."""

    p: np.ndarray

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def L_max(self) -> int:
        return self.p.shape[1]

    def sliced(self, L: int) -> np.ndarray:
        """The L x K measurement matrix ``P_L^T`` of the first L samples."""
        return self.p[:, :L].T


@dataclass
class ActivityPattern:
    lam: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam).astype(np.int8)
        if np.any((self.lam != 0) & (self.lam != 1)):
            raise ValueError("activity entries must be 0 or 1")

    @property
    def K(self) -> int:
        return self.lam.size

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.lam)


@dataclass
class ReceivedPreambleBlock:
    """L x M received samples (time x antenna)."""

    y: np.ndarray
    L: int


@dataclass
class StopRule:
    """OMP stopping: at most ``max_support`` picks and/or until the residual
    energy drops to ``residual_ratio * ||Y||^2``."""

    max_support: int | None = None
    residual_ratio: float | None = None

    def __post_init__(self):
        if self.max_support is None and self.residual_ratio is None:
            raise ValueError("StopRule needs max_support and/or residual_ratio")
        if self.max_support is not None and self.max_support < 0:
            raise ValueError("max_support must be nonnegative")
        if self.residual_ratio is not None and self.residual_ratio < 0:
            raise ValueError("residual_ratio must be nonnegative")

    @classmethod
    def default(cls, K: int, p_active: float, snr_db: float) -> "StopRule":
        return cls(max_support=math.ceil(2 * p_active * K), residual_ratio=10.0 ** (-snr_db / 10.0))


def generate_qpsk_preambles(K: int, L_max: int, rng: RandomSource) -> PreambleBook:
    if K < 1 or L_max < 1:
        raise ValueError(f"K and L_max must be positive, got K={K}, L_max={L_max}")
    if K > 4**L_max:
        raise ValueError("cannot draw K unique QPSK rows of this length")
    idx = rng.gen.integers(0, 4, size=(K, L_max))
    while True:
        _, first = np.unique(idx, axis=0, return_index=True)
        if first.size == K:
            break
        dup = np.setdiff1d(np.arange(K), first)
        idx[dup] = rng.gen.integers(0, 4, size=(dup.size, L_max))
    return PreambleBook(QPSK[idx])


def draw_activity(K: int, p_active: float, rng: RandomSource) -> ActivityPattern:
    if not 0.0 <= p_active <= 1.0:
        raise ValueError(f"p_active must lie in [0, 1], got {p_active}")
    if K < 1:
        raise ValueError("K must be positive")
    return ActivityPattern(rng.gen.random(K) < p_active)


def noise_variance(snr_db: float) -> float:
    """Per-sample noise variance under the single-active-user SNR convention.

    With unit-modulus preambles and CN(0,1) channels a lone active user
    delivers unit mean power per (sample, antenna), so sigma^2 = 10^(-snr/10).
    """
    return 10.0 ** (-snr_db / 10.0)


def synthesize_received(
    book: PreambleBook,
    act: ActivityPattern,
    ch: UplinkChannelSet,
    L: int,
    snr_db: float,
    rng: RandomSource,
) -> ReceivedPreambleBlock:
    """``Y = P_L^T diag(lambda) H + N``.

    Noise is always drawn for L_max rows and sliced, so a fixed stream gives
    nested noise realisations across preamble lengths (paired sweeps).
    """
    if not 1 <= L <= book.L_max:
        raise ValueError(f"L must lie in [1, {book.L_max}], got {L}")
    if ch.K != book.K or act.K != book.K:
        raise ValueError("book, activity and channel disagree on K")
    M = ch.M
    s = np.sqrt(noise_variance(snr_db) / 2.0)
    z = rng.gen.standard_normal((book.L_max, M, 2))
    noise = s * (z[:L, :, 0] + 1j * z[:L, :, 1])
    X = act.lam[:, None] * ch.gains
    return ReceivedPreambleBlock(book.sliced(L) @ X + noise, L)


def zero_pad(y: ReceivedPreambleBlock, L_max: int) -> np.ndarray:
    if y.L > L_max:
        raise ValueError("block longer than L_max")
    out = np.zeros((L_max, y.y.shape[1]), dtype=complex)
    out[: y.L] = y.y
    return out


def covariance(y_p: np.ndarray) -> np.ndarray:
    """Sample autocorrelation ``Y_p Y_p^H / M`` across antennas."""
    y_p = np.asarray(y_p)
    M = y_p.shape[-1]
    if M == 0:
        raise ValueError("covariance needs at least one antenna")
    return y_p @ np.swapaxes(y_p.conj(), -1, -2) / M


def omp_detect(y: ReceivedPreambleBlock, book: PreambleBook, stop: StopRule) -> ActivityPattern:
    """Simultaneous OMP activity detection."""
    if y.L < 1:
        raise ValueError("empty received block")
    A = np.ascontiguousarray(book.sliced(y.L), dtype=np.complex128)
    Y = np.ascontiguousarray(y.y, dtype=np.complex128)
    max_support = book.K if stop.max_support is None else stop.max_support
    max_support = min(max_support, y.L, book.K)
    ratio = 0.0 if stop.residual_ratio is None else stop.residual_ratio
    stop_energy = ratio * float(np.sum(np.abs(Y) ** 2))
    sel = somp_kernel(A, Y, int(max_support), stop_energy)
    lam = np.zeros(book.K, dtype=np.int8)
    lam[sel] = 1
    return ActivityPattern(lam)


def amp_detect(
    y: ReceivedPreambleBlock,
    book: PreambleBook,
    n_iter: int,
    p_active: float,
    noise_var: float,
    channel_var: float = 1.0,
) -> tuple[ActivityPattern, np.ndarray]:
    """MMV-AMP activity detection; returns the hard decision and the posterior
    activity probability of every user."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    A = book.sliced(y.L).astype(np.complex128)
    norms = np.linalg.norm(A, axis=0)
    A = np.ascontiguousarray(A / norms)
    Y = np.ascontiguousarray(y.y, dtype=np.complex128)
    # column scaling moves the preamble energy into the row prior
    gain = channel_var * float(np.mean(norms**2))
    scale = float(np.sum(np.abs(Y) ** 2)) / Y.size
    tau_floor = max(noise_var, 1e-12 * scale, 1e-300)
    pi, _ = amp_mmv_kernel(A, Y, int(n_iter), float(p_active), gain, tau_floor)
    pi = np.clip(pi, 0.0, 1.0)
    return ActivityPattern(pi >= 0.5), pi


def error_probability(est: ActivityPattern, truth: ActivityPattern) -> float:
    """Per-user Hamming error rate."""
    a = np.asarray(getattr(est, "lam", est))
    b = np.asarray(getattr(truth, "lam", truth))
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(a != b))
