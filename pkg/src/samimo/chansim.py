"""Channel generation and the physical signal chain.

Conventions
-----------
* ``CN(0, v)`` has variance ``v/2`` per real component.
* Angle-delay transforms use unitary (``1/sqrt(N)``) DFTs on both axes so
  Frobenius norms are preserved exactly; delay truncation keeps the
  lowest-index taps.
* The analog feedback link (IQ mapping, power normalisation, OFDM mapping
  with ideal per-subcarrier equalisation) collapses to a unit-power AWGN
  channel per complex symbol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from samimo.rng import RandomSource


@dataclass
class UplinkChannelSet:
    """K x M small-scale fading gains between users and BS antennas."""

    gains: np.ndarray

    @property
    def K(self) -> int:
        return self.gains.shape[0]

    @property
    def M(self) -> int:
        return self.gains.shape[1]


@dataclass
class ClusteredEnvironment:
    """Shared scattering geometry for a group of nearby UEs.

    Every cluster contributes ``rays_per_cluster`` rays spread over
    ``+-angle_spread`` around the cluster angle.  Ray geometry is common to all
    UEs (up to the per-UE jitter); ray gains are drawn independently per UE.
    """

    cluster_angles: np.ndarray
    cluster_delays: np.ndarray
    cluster_powers: np.ndarray
    per_ue_angle_jitter: float = 0.0
    per_ue_delay_jitter: float = 0.0
    guard_window: float = 1.0 / 30e3 / 4
    rays_per_cluster: int = 4
    angle_spread: float = 0.05

    def __post_init__(self):
        self.cluster_angles = np.atleast_1d(np.asarray(self.cluster_angles, dtype=float))
        self.cluster_delays = np.atleast_1d(np.asarray(self.cluster_delays, dtype=float))
        self.cluster_powers = np.atleast_1d(np.asarray(self.cluster_powers, dtype=float))

    @property
    def n_clusters(self) -> int:
        return self.cluster_angles.size

    def validate(self, carrier_spacing: float | None = None) -> None:
        n = self.n_clusters
        if n < 1:
            raise ValueError("environment needs at least one cluster")
        if self.cluster_delays.size != n or self.cluster_powers.size != n:
            raise ValueError("cluster angle/delay/power arrays must have equal length")
        if np.any(self.cluster_powers < 0) or abs(self.cluster_powers.sum() - 1.0) > 1e-9:
            raise ValueError("cluster powers must be nonnegative and sum to 1")
        if self.guard_window <= 0:
            raise ValueError("guard window must be positive")
        if carrier_spacing is not None and self.guard_window > 1.0 / carrier_spacing:
            raise ValueError("guard window cannot exceed the OFDM symbol duration")
        if np.any(self.cluster_delays < 0) or np.any(self.cluster_delays >= self.guard_window):
            raise ValueError(
                f"cluster delays must lie in [0, {self.guard_window:g}) s, got {self.cluster_delays}"
            )
        if self.rays_per_cluster < 1:
            raise ValueError("rays_per_cluster must be >= 1")
        if self.per_ue_angle_jitter < 0 or self.per_ue_delay_jitter < 0:
            raise ValueError("jitter standard deviations must be nonnegative")


@dataclass
class DownlinkCsi:
    """N_t x N_sub spatial-frequency channel of one UE."""

    h: np.ndarray
    carrier_spacing: float = 30e3

    def __post_init__(self):
        n_sub = self.h.shape[-1]
        if n_sub & (n_sub - 1):
            raise ValueError(f"number of subcarriers must be a power of two, got {n_sub}")


@dataclass
class AngleDelayCsi:
    """N_t x N_c truncated angle-delay channel."""

    h_ad: np.ndarray
    n_sub: int = field(default=0)


def _check_dims(**dims):
    for name, v in dims.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")


def draw_rayleigh_channels(K: int, M: int, rng: RandomSource) -> UplinkChannelSet:
    """i.i.d. CN(0, 1) user-to-antenna gains."""
    _check_dims(K=K, M=M)
    return UplinkChannelSet(rng.complex_normal((K, M)))


def random_environment(
    rng: RandomSource,
    n_clusters: int = 3,
    carrier_spacing: float = 30e3,
    n_sub: int = 64,
    delay_taps: tuple[float, float] = (4.0, 12.0),
    guard_taps: float | None = None,
    angle_range: float = np.pi / 3,
    per_ue_angle_jitter: float = 0.02,
    per_ue_delay_jitter_taps: float = 0.2,
    rays_per_cluster: int = 4,
    angle_spread: float = 0.05,
) -> ClusteredEnvironment:
    """Draw a random UMi-like clustered geometry.

    Delays are specified in units of delay taps ``1/(n_sub*carrier_spacing)``.
    Keeping them away from tap 0 limits circular leakage past the truncation
    boundary.
    """
    _check_dims(n_clusters=n_clusters, n_sub=n_sub)
    tap = 1.0 / (n_sub * carrier_spacing)
    lo, hi = delay_taps
    if guard_taps is None:
        guard_taps = hi + 4.0
    g = rng.gen
    angles = g.uniform(-angle_range, angle_range, n_clusters)
    delays = np.sort(g.uniform(lo, hi, n_clusters)) * tap
    powers = g.exponential(1.0, n_clusters)
    powers /= powers.sum()
    return ClusteredEnvironment(
        cluster_angles=angles,
        cluster_delays=delays,
        cluster_powers=powers,
        per_ue_angle_jitter=per_ue_angle_jitter,
        per_ue_delay_jitter=per_ue_delay_jitter_taps * tap,
        guard_window=guard_taps * tap,
        rays_per_cluster=rays_per_cluster,
        angle_spread=angle_spread,
    )


def steering_vector(n_t: int, angle) -> np.ndarray:
    """Half-wavelength ULA response; ``angle`` may be an array (last axis = antennas)."""
    n = np.arange(n_t)
    return np.exp(-1j * np.pi * np.multiply.outer(np.sin(angle), n))


def generate_clustered_csi(
    env: ClusteredEnvironment,
    n_t: int,
    n_sub: int,
    n_ues: int,
    rng: RandomSource,
    carrier_spacing: float = 30e3,
) -> list[DownlinkCsi]:
    """Correlated downlink CSI for ``n_ues`` UEs sharing ``env``."""
    _check_dims(n_t=n_t, n_sub=n_sub, n_ues=n_ues)
    env.validate(carrier_spacing)
    g = rng.gen
    R = env.rays_per_cluster
    offsets = np.linspace(-1.0, 1.0, R) * env.angle_spread if R > 1 else np.zeros(1)
    freqs = np.arange(n_sub) * carrier_spacing
    out = []
    for _ in range(n_ues):
        ang = env.cluster_angles + env.per_ue_angle_jitter * g.standard_normal(env.n_clusters)
        dly = env.cluster_delays + env.per_ue_delay_jitter * g.standard_normal(env.n_clusters)
        dly = np.clip(dly, 0.0, np.nextafter(env.guard_window, 0.0))
        gains = rng.complex_normal((env.n_clusters, R)) * np.sqrt(env.cluster_powers / R)[:, None]
        ray_angles = ang[:, None] + offsets[None, :]
        a = steering_vector(n_t, ray_angles)  # (C, R, n_t)
        spatial = np.einsum("cr,crn->cn", gains, a)  # (C, n_t)
        freq = np.exp(-2j * np.pi * np.outer(dly, freqs))  # (C, n_sub)
        out.append(DownlinkCsi(spatial.T @ freq, carrier_spacing))
    return out


def _as_array(x, attr):
    return np.asarray(getattr(x, attr, x))


def angle_delay_transform(csi, n_c: int) -> AngleDelayCsi:
    """Unitary 2-D DFT to the angle-delay domain, keeping the first ``n_c`` taps.

    ``csi`` is a :class:`DownlinkCsi` or an array whose last two axes are
    (antenna, subcarrier); leading batch axes are carried through.
    """
    h = _as_array(csi, "h")
    n_sub = h.shape[-1]
    if n_c < 1 or n_c > n_sub:
        raise ValueError(f"n_c must be in [1, {n_sub}], got {n_c}")
    # delays map to positive taps under the +j kernel on the frequency axis
    h_ad = np.fft.ifft(np.fft.ifft(h, axis=-2, norm="ortho"), axis=-1, norm="ortho")
    return AngleDelayCsi(h_ad[..., :n_c], n_sub)


def inverse_angle_delay_transform(h_ad, n_sub: int | None = None) -> DownlinkCsi:
    """Zero-pad the delay axis to ``n_sub`` and undo both unitary DFTs."""
    x = _as_array(h_ad, "h_ad")
    if n_sub is None:
        n_sub = getattr(h_ad, "n_sub", 0) or x.shape[-1]
    n_c = x.shape[-1]
    if n_c > n_sub:
        raise ValueError("delay axis longer than n_sub")
    pad = np.zeros(x.shape[:-1] + (n_sub,), dtype=complex)
    pad[..., :n_c] = x
    h = np.fft.fft(np.fft.fft(pad, axis=-1, norm="ortho"), axis=-2, norm="ortho")
    return DownlinkCsi(h)


def awgn(x: np.ndarray, snr_db: float, rng: RandomSource) -> np.ndarray:
    """Add CN(0, s2) noise with ``s2 = mean(|x|^2) / 10^(snr_db/10)``."""
    x = np.asarray(x)
    p = np.mean(np.abs(x) ** 2)
    if not p > 0:
        raise ValueError("awgn: input has zero average power, SNR undefined")
    s2 = p / 10.0 ** (snr_db / 10.0)
    return x + rng.complex_normal(x.shape, s2)


def power_normalize(x: np.ndarray) -> np.ndarray:
    """Scale so the mean per-symbol power is exactly one."""
    x = np.asarray(x)
    e = np.sum(np.abs(x) ** 2)
    if not e > 0:
        raise ValueError("power_normalize: zero input")
    return x * np.sqrt(x.size / e)


def analog_link(x: np.ndarray, snr_db: float, rng: RandomSource) -> np.ndarray:
    """Analog feedback link: power normalisation followed by AWGN.

    OFDM mapping/demapping with ideal per-subcarrier equalisation is the
    identity on the symbol stream, so it is not modelled explicitly.
    """
    return awgn(power_normalize(x), snr_db, rng)
