import numpy as np
import pytest
import torch

from samimo import csifb as C
from samimo.nnblocks import gradient_check, init_params
from samimo.rng import RandomSource
from samimo.training import TrainSpec
from helpers import probe, randomize

SMALL = dict(N_t=4, N_c=4, d_model=16, n_heads=2, L1=1, L2=1, L3=1, k=6)


def _net(variant="rca", seed=0, **kw):
    cfg = C.CsiFbConfig(**{**SMALL, **kw})
    return init_params(C.CsiFeedbackNet(cfg, variant), torch.Generator().manual_seed(seed))


def _csi(shape, seed=0, dtype=torch.complex64):
    g = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(shape, generator=g), torch.randn(shape, generator=g)).to(dtype)


def test_config_invariants():
    with pytest.raises(ValueError):
        C.CsiFbConfig(N_t=4, N_c=4, k=17)
    with pytest.raises(ValueError):
        C.CsiFbConfig(n_ues=0)
    assert C.CsiFbConfig(k=64).ratio == 0.25


def test_encode_length_and_determinism():
    net = randomize(_net(), 1)
    h = _csi((3, 2, 4, 4))
    a = C.csi_encode(h, net)
    assert a.shape == (3, 2, 12)
    assert torch.equal(a, C.csi_encode(h, net))
    with pytest.raises(ValueError):
        C.csi_encode(_csi((3, 2, 4, 5)), net)


def test_encoder_gradient(f64):
    net = randomize(_net(), 2).double()
    h = _csi((2, 2, 4, 4), dtype=torch.complex128)
    assert gradient_check(lambda: C.csi_encode(h, net).pow(2).sum(), net.encoder) <= 1e-4


@pytest.mark.parametrize("variant", ["rca", "plain_ca", "vanilla"])
def test_decoder_gradient(f64, variant):
    net = randomize(_net(variant), 3).double()
    rx = probe((2, 2, 12), seed=4)
    h = _csi((2, 2, 4, 4), seed=5, dtype=torch.complex128)
    assert gradient_check(lambda: C.torch_nmse(h, C.csi_decode_joint(rx, net)), net.decoder) <= 1e-4


def test_feedback_transmit_examples():
    code = np.arange(1.0, 13.0)
    out = C.feedback_transmit(code, 300.0, RandomSource(0))
    sym = code[:6] + 1j * code[6:]
    sym = sym / np.sqrt(np.mean(np.abs(sym) ** 2))
    assert out.shape == code.shape
    assert np.allclose(out, np.concatenate([sym.real, sym.imag]), atol=1e-6)
    with pytest.raises(ValueError):
        C.feedback_transmit(np.zeros(12), 10.0, RandomSource(0))


def test_feedback_link_snr():
    code = RandomSource(1).gen.standard_normal(2 * 4096)
    out = C.feedback_transmit(code, 10.0, RandomSource(2))
    k = 4096
    ref = code[:k] + 1j * code[k:]
    ref = ref / np.sqrt(np.mean(np.abs(ref) ** 2))
    noise = (out[:k] + 1j * out[k:]) - ref
    assert abs(10 * np.log10(1.0 / np.mean(np.abs(noise) ** 2)) - 10.0) <= 1.0


def test_decode_shapes_and_variant_errors():
    net = _net("rca")
    rx = probe((3, 2, 12), dtype=torch.float32)
    assert C.csi_decode_joint(rx, net).shape == (3, 2, 4, 4)
    assert C.csi_decode_joint([rx[:, 0], rx[:, 1]], net).shape == (3, 2, 4, 4)
    with pytest.raises(ValueError):
        C.csi_decode_joint(rx, net, variant="vanilla")
    with pytest.raises(ValueError):
        C.csi_decode_joint(rx[:, :1], net)
    with pytest.raises(ValueError):
        _net("rca", n_ues=1).decoder(rx[:, :1])
    assert _net("vanilla", n_ues=1).decoder(rx[:, :1]).shape == (3, 1, 4, 4)


def test_vanilla_has_no_exchange_path():
    net = randomize(_net("vanilla"), 6)
    rx = probe((2, 2, 12), dtype=torch.float32)
    rx2 = rx.clone()
    rx2[:, 1] += 1.0
    a, b = C.csi_decode_joint(rx, net), C.csi_decode_joint(rx2, net)
    assert torch.equal(a[:, 0], b[:, 0])
    assert not torch.allclose(a[:, 1], b[:, 1])


def test_rca_exchanges_information():
    net = randomize(_net("rca"), 6)
    rx = probe((2, 2, 12), dtype=torch.float32)
    rx2 = rx.clone()
    rx2[:, 1] += 1.0
    assert not torch.allclose(C.csi_decode_joint(rx, net)[:, 0], C.csi_decode_joint(rx2, net)[:, 0])


def test_rca_at_identity_init_matches_vanilla():
    rca, van = _net("rca", seed=1), _net("vanilla", seed=2)
    # give the shared parts non-trivial values so equality is not vacuous
    randomize(rca.encoder, 3)
    randomize(rca.decoder.shared, 4)
    randomize(rca.decoder.expand, 5)
    randomize(rca.decoder.head, 6)
    van.load_state_dict({k: v for k, v in rca.state_dict().items() if not k.startswith("decoder.joint")}, strict=False)
    rx = probe((3, 2, 12), dtype=torch.float32)
    assert torch.allclose(C.csi_decode_joint(rx, rca), C.csi_decode_joint(rx, van), atol=1e-6)


def test_shared_backbone_uses_identical_parameters():
    net = _net("rca")
    layer = net.decoder.shared[0]
    calls = []
    hook = layer.register_forward_hook(lambda m, i, o: calls.append(i[0].shape))
    C.csi_decode_joint(probe((3, 2, 12), dtype=torch.float32), net)
    hook.remove()
    # one call carries both UEs, so a single parameter set serves every UE
    assert calls == [torch.Size([3, 2, 4, 16])]
    assert sum(1 for _ in net.decoder.shared.parameters()) == sum(1 for _ in layer.parameters())


def test_nmse_examples():
    h = _csi((4, 4), seed=7).numpy()
    assert C.nmse(h, h) == C.NMSE_FLOOR_DB
    assert C.nmse(h, np.zeros_like(h)) == 0.0
    assert C.nmse(h, 2 * h) == 0.0
    c = 0.3 - 1.7j
    g = _csi((4, 4), seed=8).numpy()
    assert abs(C.nmse(c * h, c * g) - C.nmse(h, g)) < 1e-9
    with pytest.raises(ValueError):
        C.nmse(np.zeros((4, 4)), h)
    with pytest.raises(ValueError):
        C.nmse(h, h[:3])


def test_identity_plumbing():
    """Linear identity encoder/decoder through the whole chain at 300 dB."""
    torch.set_default_dtype(torch.float64)
    try:
        Nt, Nc = 4, 4
        n2 = 2 * Nc
        d = 2 * n2 + 4
        cfg = C.CsiFbConfig(N_t=Nt, N_c=Nc, d_model=d, n_heads=4, k=Nt * Nc, L1=1, L2=1, L3=1)
        net = init_params(C.CsiFeedbackNet(cfg, "rca"), torch.Generator().manual_seed(0))
        c = 1e4
        # tokens [x, -x, c, -c, 0, 0] keep LayerNorm an (almost) constant rescale
        lift = torch.zeros(d, n2)
        lift[:n2] = torch.eye(n2)
        lift[n2 : 2 * n2] = -torch.eye(n2)
        bias = torch.zeros(d)
        bias[2 * n2], bias[2 * n2 + 1] = c, -c
        s = np.sqrt(2 * c**2 / d)
        with torch.no_grad():
            net.encoder.embed.weight.copy_(lift)
            net.encoder.embed.bias.copy_(bias)
            # gather the x part of every token; ordering is (token, feature)
            W = torch.zeros(2 * cfg.k, Nt * d)
            rows = [(t, f) for t in range(Nt) for f in range(n2)]
            for r, (t, f) in enumerate(rows):
                W[r, t * d + f] = 1.0
            net.encoder.compress.weight.copy_(W)
            net.encoder.compress.bias.zero_()
            E = torch.zeros(Nt * d, 2 * cfg.k)
            for r, (t, f) in enumerate(rows):
                E[t * d + f, r] = 1.0
                E[t * d + n2 + f, r] = -1.0
            net.decoder.expand.weight.copy_(E)
            net.decoder.expand.bias.copy_(bias.repeat(Nt))
            net.decoder.head.weight.copy_(s * torch.eye(n2, d))
            net.decoder.head.bias.zero_()
        h = C.generate_dataset(C.CsiFbConfig(N_t=Nt, N_c=Nc, k=8), 20, RandomSource(4), n_sub=16,
                               env_kwargs=dict(delay_taps=(0.5, 3.0), guard_taps=8.0))
        h = h.astype(np.complex128)
        # the code is power-normalised, which exactly cancels the encoder LayerNorm scale
        rec = C.reconstruct(net, h, 300.0, RandomSource(5))
        assert np.max(C.nmse(h, rec)) <= -40.0
    finally:
        torch.set_default_dtype(torch.float32)


def test_training_determinism_and_nan():
    cfg = C.CsiFbConfig(**SMALL)
    data = C.generate_dataset(cfg, 40, RandomSource(1), n_sub=16, env_kwargs=dict(delay_taps=(0.5, 3.0), guard_taps=8.0))
    spec = TrainSpec(steps=6, batch=8, epochs=2)
    n1, c1 = C.train_csifb(cfg, "rca", data, spec, RandomSource(2))
    n2, c2 = C.train_csifb(cfg, "rca", data, spec, RandomSource(2))
    assert np.all(np.isfinite(c1)) and c1 == c2
    for a, b in zip(n1.parameters(), n2.parameters()):
        assert torch.equal(a, b)
    bad = data.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(C.TrainingError):
        C.train_csifb(cfg, "rca", bad, TrainSpec(steps=10, batch=40, epochs=1), RandomSource(2))


@pytest.mark.slow
def test_desk_training_progress():
    cfg = C.CsiFbConfig()  # N_t=N_c=16, k=32, d=64, L1=L2=2, L3=1, 2 UEs
    data = C.generate_dataset(cfg, 800, RandomSource(1))
    _, curve = C.train_csifb(cfg, "rca", data, TrainSpec(steps=100, batch=32, lr=1e-3, epochs=4), RandomSource(2))
    assert curve[-1] < curve[0]


def test_sweep_identity_zero_and_rows():
    cfg = C.CsiFbConfig(**SMALL)
    data = C.generate_dataset(cfg, 30, RandomSource(1), n_sub=16, env_kwargs=dict(delay_taps=(0.5, 3.0), guard_taps=8.0))
    models = {}
    for v in ["identity", "zero"]:
        for k in (4, 8):
            models[(v, k)] = (lambda h: h) if v == "identity" else np.zeros_like
    rows = C.evaluate_nmse_sweep(cfg, [4, 8], ["identity", "zero"], models, data, 30, RandomSource(0))
    assert len(rows) == 4
    for r in rows:
        assert r.nmse_db == (C.NMSE_FLOOR_DB if r.variant == "identity" else 0.0)
    with pytest.raises(ValueError):
        C.evaluate_nmse_sweep(cfg, [16], ["identity"], models, data, 30, RandomSource(0))


def test_paired_eval_noise_is_model_independent():
    cfg = C.CsiFbConfig(**SMALL)
    data = C.generate_dataset(cfg, 8, RandomSource(1), n_sub=16, env_kwargs=dict(delay_taps=(0.5, 3.0), guard_taps=8.0))
    net = randomize(_net("vanilla"), 9)
    a = C.reconstruct(net, data, 10.0, RandomSource(3))
    b = C.reconstruct(net, data, 10.0, RandomSource(3))
    assert np.array_equal(a, b)
