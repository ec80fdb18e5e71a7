import numpy as np
import pytest
import torch

from samimo import randaccess as ra, uadnet as U
from samimo.nnblocks import gradient_check, init_params
from samimo.rng import RandomSource
from samimo.training import TrainSpec
from helpers import randomize


def _small(**kw):
    base = dict(K=16, M=8, L_max=12, d_model=16, n_layers=1, n_heads=2, L_train_range=(4, 12))
    base.update(kw)
    return U.UadNetConfig(**base)


def _net(cfg, seed=0):
    return init_params(U.UadNet(cfg), torch.Generator().manual_seed(seed))


def test_config_invariants():
    with pytest.raises(ValueError):
        U.UadNetConfig(L_max=8, L_train_range=(2, 9))
    with pytest.raises(ValueError):
        U.UadNetConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        U.UadNetConfig(L_train_range=(6, 6), L_train_exclude=(6,))
    assert U.UadNetConfig(L_train_exclude=(10,)).train_lengths() == [6, 7, 8, 9, 11, 12, 13, 14]


def _inputs(cfg, B=3, seed=0, L=8):
    r = RandomSource(seed)
    book = ra.generate_qpsk_preambles(cfg.K, cfg.L_max, r)
    covs, acts = U.simulate_batch(cfg, book, np.full(B, L), r)
    return book, covs, acts


def test_embed_inputs_examples():
    cfg = _small()
    net = randomize(_net(cfg), 1)
    book, covs, _ = _inputs(cfg)
    zero = U.build_input(np.zeros_like(covs), book, np.full(3, 8))
    sig, pre = U.embed_inputs(zero, net)
    assert sig.shape == (3, cfg.L_max, cfg.d_model) and pre.shape == (3, cfg.K, cfg.d_model)
    assert torch.allclose(sig, net.embed_sig.bias.expand_as(sig))
    s1, _ = U.embed_inputs(U.build_input(covs, book, np.full(3, 8)), net)
    s2, _ = U.embed_inputs(U.build_input(2 * covs, book, np.full(3, 8)), net)
    b = net.embed_sig.bias
    assert torch.allclose(s2 - b, 2 * (s1 - b), atol=1e-5)


def test_forward_range_and_length_check():
    cfg = _small()
    net = randomize(_net(cfg), 2)
    book, covs, _ = _inputs(cfg)
    s = U.uad_forward(U.build_input(covs, book, np.full(3, 8)), net)
    assert s.shape == (3, cfg.K) and torch.all((s > 0) & (s < 1))
    with pytest.raises(ValueError):
        U.uad_forward(U.build_input(covs, book, np.full(3, 13)), net)


def test_user_permutation_equivariance(f64):
    cfg = _small()
    net = randomize(_net(cfg), 3).double()
    book, covs, _ = _inputs(cfg)
    perm = RandomSource(5).gen.permutation(cfg.K)
    a = U.uad_forward(U.build_input(covs, book, np.full(3, 8), torch.float64), net)
    b = U.uad_forward(U.build_input(covs, ra.PreambleBook(book.p[perm]), np.full(3, 8), torch.float64), net)
    assert torch.allclose(a[:, perm], b, atol=1e-12)


def test_loss_examples():
    truth = torch.tensor([[1.0, 0.0, 1.0, 0.0]])
    assert float(U.uad_loss(truth.clone(), truth)) <= 1e-6
    assert abs(float(U.uad_loss(torch.full((1, 4), 0.5), truth)) - np.log(2)) < 1e-6
    s = torch.tensor([[0.9, 0.2, 0.6, 0.01]])
    manual = np.mean([-np.log(0.9), -np.log(0.8), -np.log(0.6), -np.log(0.99)])
    assert abs(float(U.uad_loss(s, truth)) - manual) < 1e-6
    with pytest.raises(FloatingPointError):
        U.uad_loss(torch.tensor([[float("nan"), 0.5, 0.5, 0.5]]), truth)
    with pytest.raises(ValueError):
        U.uad_loss(s[:, :3], truth)


def test_network_gradient(f64):
    cfg = _small(K=8, L_max=8, L_train_range=(4, 8))
    net = randomize(_net(cfg), 4).double()
    book, covs, acts = _inputs(cfg, L=6)
    inp = U.build_input(covs, book, np.full(3, 6), torch.float64)
    t = torch.as_tensor(acts, dtype=torch.float64)
    assert gradient_check(lambda: U.uad_loss(U.uad_forward(inp, net), t), net) <= 1e-4


def test_overfit_one_batch():
    torch.manual_seed(0)
    cfg = _small(d_model=32, L_train_range=(12, 12))
    net = _net(cfg)
    book, covs, acts = _inputs(cfg, B=64, L=12, seed=7)
    inp = U.build_input(covs, book, np.full(64, 12))
    t = torch.as_tensor(acts)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    for _ in range(500):
        loss = U.uad_loss_from_logits(U.uad_logits(inp, net), t)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.05
    with torch.no_grad():
        est = (U.uad_forward(inp, net) >= 0.5).numpy()
    assert np.mean(est != acts) == 0


def test_train_determinism_and_progress():
    cfg = U.UadNetConfig(K=32, M=16, L_max=16, d_model=64, n_layers=2, L_train_range=(6, 14))
    book = ra.generate_qpsk_preambles(32, 16, RandomSource(0))
    spec = TrainSpec(steps=200, batch=32, lr=3e-3, epochs=4)
    _, c1 = U.train_uadnet(cfg, spec, book, RandomSource(1))
    _, c2 = U.train_uadnet(cfg, spec, book, RandomSource(1))
    assert np.all(np.isfinite(c1)) and len(c1) == 4
    assert c1 == c2
    assert c1[-1] < c1[0]


def test_training_error_on_nan(monkeypatch):
    cfg = _small()
    book = ra.generate_qpsk_preambles(16, 12, RandomSource(0))
    real = U.uad_logits
    monkeypatch.setattr(U, "uad_logits", lambda inp, net: real(inp, net) * float("nan"))
    with pytest.raises(U.TrainingError):
        U.train_uadnet(cfg, TrainSpec(steps=3, batch=4, epochs=1), book, RandomSource(0))


def test_sweep_oracle_constant_and_shape():
    cfg = U.UadNetConfig(K=32, M=16, L_max=16)
    book = ra.generate_qpsk_preambles(32, 16, RandomSource(0))
    schemes = {
        "oracle": lambda y, truth, cov: truth,
        "silent": lambda y, truth, cov: np.zeros_like(truth),
    }
    rows = U.evaluate_pe_sweep(schemes, cfg, book, [6, 10], 400, 10.0, RandomSource(2))
    assert len(rows) == 4
    for r in rows:
        if r.scheme == "oracle":
            assert r.P_e == 0
        else:
            sd = np.sqrt(0.1 * 0.9 / (400 * 32))
            assert abs(r.P_e - 0.1) <= 3 * sd
    with pytest.raises(ValueError):
        U.evaluate_pe_sweep(schemes, cfg, book, [], 400, 10.0, RandomSource(2))
    with pytest.raises(ValueError):
        U.evaluate_pe_sweep(schemes, cfg, book, [6], 99, 10.0, RandomSource(2))


def test_sweep_is_paired_across_lengths():
    cfg = U.UadNetConfig(K=32, M=16, L_max=16)
    book = ra.generate_qpsk_preambles(32, 16, RandomSource(0))
    seen = {}

    def spy(y, truth, cov):
        seen.setdefault(y.L, []).append(truth.copy())
        return truth

    U.evaluate_pe_sweep({"spy": spy}, cfg, book, [6, 12], 100, 10.0, RandomSource(3))
    assert np.array_equal(np.array(seen[6]), np.array(seen[12]))


def test_unseen_length_gives_valid_scores():
    cfg = _small(L_train_exclude=(9,))
    net = _net(cfg)
    book, covs, _ = _inputs(cfg, L=9)
    s = U.NeuralDetector(net).scores(covs, book, 9)
    assert np.all(np.isfinite(s)) and np.all((s > 0) & (s < 1))
