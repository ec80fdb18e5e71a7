import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from samimo import chansim as cs
from samimo.rng import RandomSource


def test_rayleigh_seed_determinism():
    a = cs.draw_rayleigh_channels(1, 1, RandomSource(11)).gains
    b = cs.draw_rayleigh_channels(1, 1, RandomSource(11)).gains
    assert a == b


def test_rayleigh_moment():
    g = cs.draw_rayleigh_channels(128, 64, RandomSource(0)).gains
    assert g.shape == (128, 64)
    assert 0.95 <= np.mean(np.abs(g) ** 2) <= 1.05


@pytest.mark.parametrize("K,M", [(0, 4), (3, 0), (-1, 2)])
def test_rayleigh_bad_dims(K, M):
    with pytest.raises(ValueError):
        cs.draw_rayleigh_channels(K, M, RandomSource(0))


def _flat_env(**kw):
    base = dict(
        cluster_angles=np.array([0.0]),
        cluster_delays=np.array([0.0]),
        cluster_powers=np.array([1.0]),
        rays_per_cluster=1,
    )
    base.update(kw)
    return cs.ClusteredEnvironment(**base)


def test_zero_delay_broadside_is_frequency_flat():
    h = cs.generate_clustered_csi(_flat_env(), 4, 16, 1, RandomSource(0))[0].h
    assert np.allclose(h, h[:, :1], atol=1e-12)


def test_delay_past_guard_rejected():
    env = _flat_env(cluster_delays=np.array([1e-3]))
    with pytest.raises(ValueError):
        cs.generate_clustered_csi(env, 4, 16, 1, RandomSource(0))


def test_powers_must_sum_to_one():
    with pytest.raises(ValueError):
        cs.generate_clustered_csi(_flat_env(cluster_powers=np.array([0.5])), 4, 16, 1, RandomSource(0))


def _corr(h1, h2):
    a, b = h1.ravel(), h2.ravel()
    return abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))


def test_shared_geometry_correlates_ues():
    shared, indep = [], []
    for i in range(100):
        r = RandomSource(3, i)
        env = cs.random_environment(r, n_sub=64, per_ue_angle_jitter=0.0, per_ue_delay_jitter_taps=0.0)
        h = cs.generate_clustered_csi(env, 16, 64, 2, r)
        shared.append(_corr(h[0].h, h[1].h))
        other = cs.random_environment(r, n_sub=64)
        g = cs.generate_clustered_csi(other, 16, 64, 1, r)[0]
        indep.append(_corr(h[0].h, g.h))
    assert np.mean(shared) > np.mean(indep)


def test_angle_delay_of_constant():
    ad = cs.angle_delay_transform(cs.DownlinkCsi(np.ones((4, 8), complex)), 8).h_ad
    assert abs(ad[0, 0] - np.sqrt(32)) < 1e-12
    rest = ad.copy()
    rest[0, 0] = 0
    assert np.max(np.abs(rest)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([(4, 8), (8, 16), (2, 32)]))
def test_angle_delay_round_trip_and_parseval(seed, dims):
    h = RandomSource(seed).complex_normal(dims)
    ad = cs.angle_delay_transform(h, dims[1])
    assert abs(np.linalg.norm(ad.h_ad) - np.linalg.norm(h)) < 1e-10
    back = cs.inverse_angle_delay_transform(ad).h
    assert np.max(np.abs(back - h)) < 1e-10


def test_truncation_is_projection():
    h = RandomSource(2).complex_normal((8, 32))
    ad = cs.angle_delay_transform(h, 8)
    back = cs.inverse_angle_delay_transform(ad, 32).h
    assert np.linalg.norm(back) <= np.linalg.norm(h) + 1e-12
    assert np.allclose(cs.inverse_angle_delay_transform(np.zeros((8, 8)), 32).h, 0)


def test_n_c_too_large():
    with pytest.raises(ValueError):
        cs.angle_delay_transform(np.ones((4, 8)), 9)


def test_truncation_keeps_energy_on_clustered_channels():
    kept = []
    for i in range(100):
        r = RandomSource(8, i)
        env = cs.random_environment(r, n_sub=128)
        h = cs.generate_clustered_csi(env, 16, 128, 1, r)[0]
        kept.append(np.linalg.norm(cs.angle_delay_transform(h, 32).h_ad) ** 2 / np.linalg.norm(h.h) ** 2)
    assert np.mean(kept) >= 0.99


def test_awgn_vanishing_noise():
    x = RandomSource(0).complex_normal(64)
    y = cs.awgn(x, 300, RandomSource(1))
    assert np.max(np.abs(y - x)) <= 1e-6 * np.max(np.abs(x))


def test_awgn_empirical_snr_and_noise_power():
    x = cs.power_normalize(RandomSource(0).complex_normal(4096))
    n = cs.awgn(x, 10, RandomSource(1)) - x
    snr = 10 * np.log10(np.mean(np.abs(x) ** 2) / np.mean(np.abs(n) ** 2))
    assert 9 <= snr <= 11
    assert abs(np.mean(np.abs(n) ** 2) / 0.1 - 1) < 0.05


def test_awgn_zero_input():
    with pytest.raises(ValueError):
        cs.awgn(np.zeros(4), 10, RandomSource(0))


def test_power_normalize_examples():
    y = cs.power_normalize(np.array([[2, 0], [0, 0]], complex))
    assert np.allclose(y, [[2, 0], [0, 0]])
    u = np.exp(1j * np.linspace(0, 3, 16))
    assert np.max(np.abs(cs.power_normalize(u) - u)) < 1e-12
    with pytest.raises(ValueError):
        cs.power_normalize(np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 300), st.floats(1e-3, 1e3))
def test_power_normalize_exact(seed, n, scale):
    x = scale * RandomSource(seed).complex_normal(n)
    assert abs(np.mean(np.abs(cs.power_normalize(x)) ** 2) - 1) < 1e-9


def test_analog_link():
    x = RandomSource(0).complex_normal(4096) * 3
    y = cs.analog_link(x, 300, RandomSource(1))
    assert y.shape == x.shape
    assert np.max(np.abs(y - cs.power_normalize(x))) < 1e-6
    z = cs.analog_link(x, 10, RandomSource(2))
    snr = 10 * np.log10(1 / np.mean(np.abs(z - cs.power_normalize(x)) ** 2))
    assert 9 <= snr <= 11


def test_downlink_csi_requires_power_of_two():
    with pytest.raises(ValueError):
        cs.DownlinkCsi(np.ones((2, 6)))
