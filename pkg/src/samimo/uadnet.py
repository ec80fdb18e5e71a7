"""SA-UADNet-VPL: activity detection from variable-length preambles."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from samimo import chansim, randaccess as ra
from samimo.nnblocks import AttentionConfig, HeteroLayer, Plam, PositionalTable, init_params
from samimo.rng import RandomSource
from samimo.training import TrainingError, TrainSpec, make_optimizer, make_scheduler

log = logging.getLogger(__name__)


@dataclass
class UadNetConfig:
    K: int = 32
    M: int = 16
    L_max: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    use_plam: bool = True
    L_train_range: tuple[int, int] = (6, 14)
    L_train_exclude: tuple[int, ...] = ()
    p_active: float = 0.1
    snr_db: float = 10.0

    def __post_init__(self):
        lo, hi = self.L_train_range
        if not 1 <= lo <= hi <= self.L_max:
            raise ValueError(f"L_train_range {self.L_train_range} must satisfy 1 <= lo <= hi <= L_max")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.train_lengths():
            raise ValueError("no training lengths left after exclusions")

    def train_lengths(self) -> list[int]:
        lo, hi = self.L_train_range
        return [L for L in range(lo, hi + 1) if L not in set(self.L_train_exclude)]


@dataclass
class UadForwardInput:
    """Batched network input: covariance (B, L_max, L_max), book (K, L_max),
    active lengths (B,)."""

    cov: torch.Tensor
    book: torch.Tensor
    L: torch.Tensor


def _ri(z: torch.Tensor) -> torch.Tensor:
    return torch.cat([z.real, z.imag], dim=-1)


class UadNet(nn.Module):
    def __init__(self, cfg: UadNetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        att = AttentionConfig(d, cfg.n_heads, 2 * d)
        self.embed_sig = nn.Linear(2 * cfg.L_max, d)
        self.embed_pre = nn.Linear(2 * cfg.L_max, d)
        self.sig_pos = PositionalTable(cfg.L_max, d)
        self.plam = Plam(d) if cfg.use_plam else None
        self.layers = nn.ModuleList(HeteroLayer(att) for _ in range(cfg.n_layers))
        self.ln_sig = nn.LayerNorm(d)
        self.ln_pre = nn.LayerNorm(d)
        self.u = nn.Linear(d, d)
        self.v = nn.Linear(d, d)


def embed_inputs(inp: UadForwardInput, net: UadNet):
    """Covariance rows and (length-masked) preambles to d-dim tokens."""
    L_max = net.cfg.L_max
    if inp.cov.shape[-2:] != (L_max, L_max) or inp.book.shape[-1] != L_max:
        raise ValueError(f"inputs must be sized for L_max={L_max}")
    sig = net.embed_sig(_ri(inp.cov))
    # samples beyond the active length are never transmitted
    mask = (torch.arange(L_max) < inp.L.reshape(-1, 1, 1)).to(inp.book.real.dtype)
    pre = net.embed_pre(_ri(inp.book.unsqueeze(0) * mask))
    return sig, pre


def uad_logits(inp: UadForwardInput, net: UadNet) -> torch.Tensor:
    cfg = net.cfg
    L = inp.L.to(inp.cov.real.dtype)
    if torch.any(inp.L > cfg.L_max) or torch.any(inp.L < 1):
        raise ValueError(f"preamble length must lie in [1, {cfg.L_max}]")
    sig, pre = embed_inputs(inp, net)
    sig = net.sig_pos(sig)
    if net.plam is not None:
        g = net.plam.scales(sig, L, cfg.L_max).unsqueeze(-2)
        sig, pre = sig * g, pre * g
    for layer in net.layers:
        sig, pre = layer(sig, pre)
    a = net.u(net.ln_sig(sig).mean(dim=-2))  # (B, d)
    b = net.v(net.ln_pre(pre))  # (B, K, d)
    return torch.einsum("bd,bkd->bk", a, b) / math.sqrt(cfg.d_model)


def uad_forward(inp: UadForwardInput, net: UadNet) -> torch.Tensor:
    """Per-user activity probabilities, shape (B, K)."""
    return torch.sigmoid(uad_logits(inp, net))


def uad_loss(scores: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean per-user binary cross-entropy."""
    if scores.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(scores.shape)} vs {tuple(truth.shape)}")
    if torch.isnan(scores).any():
        raise FloatingPointError("NaN activity score")
    s = scores.clamp(1e-7, 1 - 1e-7)
    t = truth.to(s.dtype)
    return -(t * torch.log(s) + (1 - t) * torch.log(1 - s)).mean()


def uad_loss_from_logits(logits, truth):
    """Numerically safer equivalent of ``uad_loss(sigmoid(logits), truth)`` for training."""
    return nn.functional.binary_cross_entropy_with_logits(logits, truth.to(logits.dtype))


def build_input(cov: np.ndarray, book: ra.PreambleBook, L, dtype=torch.float32) -> UadForwardInput:
    cdtype = torch.complex64 if dtype == torch.float32 else torch.complex128
    return UadForwardInput(
        cov=torch.as_tensor(cov).to(cdtype),
        book=torch.as_tensor(book.p).to(cdtype),
        L=torch.as_tensor(np.atleast_1d(L), dtype=torch.long),
    )


def simulate_batch(cfg: UadNetConfig, book: ra.PreambleBook, L: np.ndarray, rng: RandomSource):
    """Fresh channels, activities and noise for a batch with per-sample lengths.

    Returns (zero-padded covariances (B, L_max, L_max), activities (B, K)).
    """
    B, K, M, L_max = len(L), cfg.K, cfg.M, cfg.L_max
    g = rng.gen
    acts = (g.random((B, K)) < cfg.p_active).astype(np.int8)
    H = rng.complex_normal((B, K, M))
    s = np.sqrt(ra.noise_variance(cfg.snr_db) / 2.0)
    z = g.standard_normal((B, L_max, M, 2))
    noise = s * (z[..., 0] + 1j * z[..., 1])
    P = book.p.T  # (L_max, K)
    y = np.einsum("lk,bkm->blm", P, acts[:, :, None] * H) + noise
    y[np.arange(L_max)[None, :] >= np.asarray(L)[:, None]] = 0.0
    return ra.covariance(y), acts


def train_uadnet(
    cfg: UadNetConfig,
    spec: TrainSpec,
    book: ra.PreambleBook,
    rng: RandomSource,
    fixed_L: int | None = None,
) -> tuple[UadNet, list[float]]:
    """Train on freshly simulated batches; ``fixed_L`` pins the length.

    Returns the network and the mean loss of each epoch (``spec.steps`` steps
    split evenly over ``spec.epochs``).
    """
    net = init_params(UadNet(cfg), rng.child(0).torch_generator())
    opt = make_optimizer(net, spec)
    sched = make_scheduler(opt, spec)
    lengths = np.array([fixed_L] if fixed_L is not None else cfg.train_lengths())
    per_epoch = max(spec.steps // spec.epochs, 1)
    curve, running = [], []
    data_rng = rng.child(1)
    for step in range(spec.steps):
        L = data_rng.gen.choice(lengths, size=spec.batch)
        covs, acts = simulate_batch(cfg, book, L, data_rng)
        inp = build_input(covs, book, L)
        logits = uad_logits(inp, net)
        loss = uad_loss_from_logits(logits, torch.as_tensor(acts))
        if not torch.isfinite(loss):
            raise TrainingError(f"UAD training diverged at step {step} (loss={loss.item()})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        running.append(loss.item())
        if len(running) == per_epoch or step == spec.steps - 1:
            curve.append(float(np.mean(running)))
            log.info("uad epoch %d loss %.4f", len(curve), curve[-1])
            running = []
    return net, curve


class NeuralDetector:
    """Thresholded scores of a trained network, usable as a sweep scheme."""

    def __init__(self, net: UadNet, threshold: float = 0.5):
        self.net = net
        self.threshold = threshold

    @torch.no_grad()
    def scores(self, covs: np.ndarray, book: ra.PreambleBook, L: int) -> np.ndarray:
        self.net.eval()
        out = []
        for i in range(0, len(covs), 512):
            inp = build_input(covs[i : i + 512], book, np.full(len(covs[i : i + 512]), L))
            out.append(uad_forward(inp, self.net).numpy())
        return np.concatenate(out)


@dataclass
class SweepRow:
    scheme: str
    L_test: int
    n_trials: int
    P_e: float
    stderr: float
    per_trial: np.ndarray = field(repr=False, default=None)


def evaluate_pe_sweep(
    schemes: dict,
    cfg: UadNetConfig,
    book: ra.PreambleBook,
    L_test_grid,
    n_trials: int,
    snr_db: float,
    rng: RandomSource,
    amp_iters: int = 50,
) -> list[SweepRow]:
    """Paired Monte-Carlo P_e for every scheme at every test length.

    ``schemes`` maps a name to either a :class:`NeuralDetector`, the strings
    ``"omp"``/``"amp"``, or a callable ``f(y_block, truth, cov) -> estimate``.
    Trial t uses stream ``rng.child(t)`` for channel, activity and noise, so
    all schemes and all lengths see the same realisations.
    """
    grid = [int(L) for L in L_test_grid]
    if not grid:
        raise ValueError("empty L_test grid")
    if n_trials < 100:
        raise ValueError("n_trials must be >= 100")
    K, M = cfg.K, cfg.M
    stop = ra.StopRule.default(K, cfg.p_active, snr_db)
    nv = ra.noise_variance(snr_db)
    rows = []
    for L in grid:
        blocks, covs, truth = [], np.empty((n_trials, cfg.L_max, cfg.L_max), dtype=complex), np.empty((n_trials, K), np.int8)
        for t in range(n_trials):
            r = rng.child(t)
            act = ra.draw_activity(K, cfg.p_active, r)
            ch = chansim.draw_rayleigh_channels(K, M, r)
            y = ra.synthesize_received(book, act, ch, L, snr_db, r)
            blocks.append(y)
            covs[t] = ra.covariance(ra.zero_pad(y, cfg.L_max))
            truth[t] = act.lam
        for name, scheme in schemes.items():
            if isinstance(scheme, NeuralDetector):
                est = scheme.scores(covs, book, L) >= scheme.threshold
            elif scheme == "omp":
                est = np.stack([ra.omp_detect(y, book, stop).lam for y in blocks])
            elif scheme == "amp":
                est = np.stack([ra.amp_detect(y, book, amp_iters, cfg.p_active, nv)[0].lam for y in blocks])
            else:
                est = np.stack([np.asarray(getattr(e, "lam", e)) for e in (scheme(y, tr, c) for y, tr, c in zip(blocks, truth, covs))])
            errs = np.mean(est.astype(np.int8) != truth, axis=1)
            rows.append(SweepRow(name, L, n_trials, float(errs.mean()), float(errs.std(ddof=1) / np.sqrt(n_trials)), errs))
    return rows
