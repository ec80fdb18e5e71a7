"""SA-RCA-MUNet: multi-user CSI feedback over an analog link."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from samimo import chansim
from samimo.nnblocks import AttentionConfig, RcaBlock, TransformerLayer, init_params
from samimo.rng import RandomSource
from samimo.training import TrainingError, TrainSpec, make_optimizer, make_scheduler

log = logging.getLogger(__name__)

NMSE_FLOOR_DB = -100.0


class DecoderVariant(str, enum.Enum):
    RCA = "rca"
    PLAIN_CA = "plain_ca"
    VANILLA = "vanilla"


@dataclass
class CsiFbConfig:
    N_t: int = 16
    N_c: int = 16
    d_model: int = 64
    n_heads: int = 4
    L1: int = 2
    L2: int = 2
    L3: int = 1
    k: int = 32
    n_ues: int = 2
    feedback_snr_db: float = 10.0

    def __post_init__(self):
        if not 1 <= self.k <= self.N_t * self.N_c:
            raise ValueError(f"k={self.k} must lie in [1, N_t*N_c={self.N_t * self.N_c}]")
        if self.n_ues < 1:
            raise ValueError("n_ues must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def ratio(self) -> float:
        return self.k / (self.N_t * self.N_c)


def _to_tokens(h: torch.Tensor) -> torch.Tensor:
    """(…, N_t, N_c) complex -> (…, N_t, 2 N_c) real."""
    return torch.cat([h.real, h.imag], dim=-1)


def _from_tokens(x: torch.Tensor) -> torch.Tensor:
    n = x.shape[-1] // 2
    return torch.complex(x[..., :n], x[..., n:])


class CsiEncoder(nn.Module):
    def __init__(self, cfg: CsiFbConfig):
        super().__init__()
        att = AttentionConfig(cfg.d_model, cfg.n_heads, 2 * cfg.d_model)
        self.embed = nn.Linear(2 * cfg.N_c, cfg.d_model)
        self.layers = nn.ModuleList(TransformerLayer(att) for _ in range(cfg.L1))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.compress = nn.Linear(cfg.N_t * cfg.d_model, 2 * cfg.k)

    def forward(self, h_ad: torch.Tensor) -> torch.Tensor:
        x = self.embed(_to_tokens(h_ad))
        for layer in self.layers:
            x = layer(x)
        return self.compress(self.ln(x).flatten(-2))


class CsiDecoder(nn.Module):
    def __init__(self, cfg: CsiFbConfig, variant: DecoderVariant):
        super().__init__()
        self.cfg, self.variant = cfg, DecoderVariant(variant)
        att = AttentionConfig(cfg.d_model, cfg.n_heads, 2 * cfg.d_model)
        self.expand = nn.Linear(2 * cfg.k, cfg.N_t * cfg.d_model)
        self.shared = nn.ModuleList(TransformerLayer(att) for _ in range(cfg.L2))
        if self.variant is DecoderVariant.VANILLA:
            self.joint = nn.ModuleList(TransformerLayer(att) for _ in range(cfg.L3))
        else:
            residual = self.variant is DecoderVariant.RCA
            self.joint = nn.ModuleList(RcaBlock(att, residual=residual) for _ in range(cfg.L3))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, 2 * cfg.N_c)

    def forward(self, received: torch.Tensor) -> torch.Tensor:
        """(B, U, 2k) received codes -> (B, U, N_t, N_c) complex CSI."""
        cfg = self.cfg
        U = received.shape[-2]
        if self.variant is not DecoderVariant.VANILLA and U < 2:
            raise ValueError(f"{self.variant.value} decoder needs at least two UEs")
        x = self.expand(received).unflatten(-1, (cfg.N_t, cfg.d_model))
        for layer in self.shared:
            x = layer(x)
        for block in self.joint:
            if self.variant is DecoderVariant.VANILLA:
                x = block(x)
            else:
                feats = [x[:, u] for u in range(U)]
                x = torch.stack([block(feats[u], feats[:u] + feats[u + 1 :]) for u in range(U)], dim=1)
        return _from_tokens(self.head(self.ln(x)))


class CsiFeedbackNet(nn.Module):
    def __init__(self, cfg: CsiFbConfig, variant: DecoderVariant = DecoderVariant.RCA):
        super().__init__()
        self.cfg = cfg
        self.encoder = CsiEncoder(cfg)
        self.decoder = CsiDecoder(cfg, variant)

    @property
    def variant(self) -> DecoderVariant:
        return self.decoder.variant


def csi_encode(h_ad, net: CsiFeedbackNet) -> torch.Tensor:
    """Angle-delay CSI (…, N_t, N_c) -> real code (…, 2k)."""
    h = torch.as_tensor(getattr(h_ad, "h_ad", h_ad))
    cfg = net.cfg
    if h.shape[-2:] != (cfg.N_t, cfg.N_c):
        raise ValueError(f"expected CSI of shape (N_t, N_c)=({cfg.N_t}, {cfg.N_c}), got {tuple(h.shape[-2:])}")
    return net.encoder(h)


def torch_analog_link(code: torch.Tensor, snr_db: float, generator: torch.Generator | None) -> torch.Tensor:
    """Differentiable twin of :func:`feedback_transmit` for training.

    IQ-maps real pairs to k symbols, normalises each code to unit mean symbol
    power and adds CN(0, 10^(-snr/10)) noise; returns the real 2k layout.
    """
    k = code.shape[-1] // 2
    power = (code**2).sum(dim=-1, keepdim=True) / k
    x = code / torch.sqrt(power)
    if generator is None:
        return x
    s = math.sqrt(10.0 ** (-snr_db / 10.0) / 2.0)
    return x + s * torch.randn(x.shape, generator=generator, dtype=x.dtype)


def feedback_transmit(code: np.ndarray, snr_db: float, rng: RandomSource) -> np.ndarray:
    """Real code -> IQ symbols -> analog link -> real code."""
    code = np.asarray(code, dtype=float)
    k = code.shape[-1] // 2
    if code.shape[-1] != 2 * k:
        raise ValueError("code length must be even")
    sym = code[..., :k] + 1j * code[..., k:]
    rx = chansim.analog_link(sym, snr_db, rng)
    return np.concatenate([rx.real, rx.imag], axis=-1)


def csi_decode_joint(received, net: CsiFeedbackNet, variant: DecoderVariant | None = None) -> torch.Tensor:
    """Joint reconstruction; ``received`` is (B, U, 2k) or a list of (B, 2k)."""
    if isinstance(received, (list, tuple)):
        received = torch.stack([torch.as_tensor(r) for r in received], dim=-2)
    if variant is not None and DecoderVariant(variant) is not net.variant:
        raise ValueError(f"network was built for {net.variant.value}, not {DecoderVariant(variant).value}")
    if received.shape[-2] != net.cfg.n_ues:
        raise ValueError(f"expected {net.cfg.n_ues} UEs, got {received.shape[-2]}")
    return net.decoder(received)


def nmse_linear(h, h_hat, axis=(-2, -1)):
    h = np.asarray(getattr(h, "h_ad", h))
    h_hat = np.asarray(getattr(h_hat, "h_ad", h_hat))
    if h.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {h_hat.shape}")
    ref = np.sum(np.abs(h) ** 2, axis=axis)
    if np.any(ref <= 0):
        raise ValueError("NMSE reference has zero energy")
    return np.sum(np.abs(h - h_hat) ** 2, axis=axis) / ref


def to_db(x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.maximum(10.0 * np.log10(x), NMSE_FLOOR_DB)
    return float(out) if out.ndim == 0 else out


def nmse(h, h_hat) -> float:
    """10 log10(||h - h_hat||^2 / ||h||^2), floored at -100 dB."""
    return to_db(nmse_linear(h, h_hat))


def torch_nmse(h: torch.Tensor, h_hat: torch.Tensor) -> torch.Tensor:
    """Mean linear NMSE over all leading axes (training loss)."""
    err = (h - h_hat).abs().pow(2).sum(dim=(-2, -1))
    ref = h.abs().pow(2).sum(dim=(-2, -1))
    return (err / ref).mean()


def normalize_csi(h_ad: np.ndarray) -> np.ndarray:
    """Scale every (…, N_t, N_c) matrix to unit mean entry power."""
    p = np.mean(np.abs(h_ad) ** 2, axis=(-2, -1), keepdims=True)
    return h_ad / np.sqrt(p)


def generate_dataset(cfg: CsiFbConfig, n_samples: int, rng: RandomSource, n_sub: int = 64, env_kwargs=None) -> np.ndarray:
    """Correlated multi-UE angle-delay CSI, shape (n_samples, n_ues, N_t, N_c).

    Every sample draws its own clustered environment shared by its UEs;
    sample i uses stream ``rng.child(i)``.
    """
    env_kwargs = dict(env_kwargs or {})
    out = np.empty((n_samples, cfg.n_ues, cfg.N_t, cfg.N_c), dtype=np.complex64)
    for i in range(n_samples):
        r = rng.child(i)
        env = chansim.random_environment(r, n_sub=n_sub, **env_kwargs)
        chans = chansim.generate_clustered_csi(env, cfg.N_t, n_sub, cfg.n_ues, r)
        hs = np.stack([c.h for c in chans])
        out[i] = normalize_csi(chansim.angle_delay_transform(hs, cfg.N_c).h_ad)
    return out


def forward_link(net: CsiFeedbackNet, h: torch.Tensor, snr_db: float, generator) -> torch.Tensor:
    code = net.encoder(h)
    return net.decoder(torch_analog_link(code, snr_db, generator))


def train_csifb(
    cfg: CsiFbConfig,
    variant: DecoderVariant,
    dataset: np.ndarray,
    spec: TrainSpec,
    rng: RandomSource,
) -> tuple[CsiFeedbackNet, list[float]]:
    """End-to-end encoder -> noisy link -> joint decoder training on NMSE."""
    net = init_params(CsiFeedbackNet(cfg, variant), rng.child(0).torch_generator())
    opt = make_optimizer(net, spec)
    sched = make_scheduler(opt, spec)
    data = torch.as_tensor(dataset)
    n = data.shape[0]
    order_rng = rng.child(1).gen
    noise = rng.child(2).torch_generator()
    per_epoch = max(spec.steps // spec.epochs, 1)
    perm, pos = order_rng.permutation(n), 0
    curve, running = [], []
    for step in range(spec.steps):
        if pos + spec.batch > n:
            perm, pos = order_rng.permutation(n), 0
        idx = torch.as_tensor(perm[pos : pos + spec.batch])
        pos += spec.batch
        h = data[idx]
        loss = torch_nmse(h, forward_link(net, h, cfg.feedback_snr_db, noise))
        if not torch.isfinite(loss):
            raise TrainingError(f"CSI feedback training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        running.append(loss.item())
        if len(running) == per_epoch or step == spec.steps - 1:
            curve.append(float(np.mean(running)))
            log.info("csifb[%s k=%d] epoch %d nmse %.4f", net.variant.value, cfg.k, len(curve), curve[-1])
            running = []
    return net, curve


@torch.no_grad()
def reconstruct(net: CsiFeedbackNet, h: np.ndarray, snr_db: float, rng: RandomSource, batch: int = 256) -> np.ndarray:
    """Deterministic paired evaluation: sample i's link noise comes from
    ``rng.child(i)`` regardless of the network being evaluated."""
    net.eval()
    cfg = net.cfg
    out = np.empty(h.shape, dtype=np.complex128)
    k = cfg.k
    for s in range(0, h.shape[0], batch):
        hb = torch.as_tensor(h[s : s + batch])
        code = net.encoder(hb).double().numpy()
        rx = np.empty_like(code)
        for i in range(code.shape[0]):
            g = rng.child(s + i).gen
            for u in range(code.shape[1]):
                sym = code[i, u, :k] + 1j * code[i, u, k:]
                sym = chansim.power_normalize(sym)
                z = g.standard_normal((2, k)) * math.sqrt(10.0 ** (-snr_db / 10.0) / 2.0)
                sym = sym + z[0] + 1j * z[1]
                rx[i, u] = np.concatenate([sym.real, sym.imag])
        out[s : s + batch] = net.decoder(torch.as_tensor(rx, dtype=hb.real.dtype)).numpy()
    return out


@dataclass
class NmseRow:
    variant: str
    k: int
    r: float
    feedback_snr_db: float
    nmse_db: float
    stderr: float
    per_sample: np.ndarray = None


def summarize(variant: str, cfg: CsiFbConfig, lin: np.ndarray) -> NmseRow:
    """Mean linear NMSE in dB; stderr propagated to dB by the delta method."""
    lin = np.asarray(lin, dtype=float)
    m = float(lin.mean())
    se = float(lin.std(ddof=1) / np.sqrt(lin.size)) if lin.size > 1 else 0.0
    se_db = 10.0 / math.log(10.0) * se / m if m > 0 else 0.0
    return NmseRow(variant, cfg.k, cfg.ratio, cfg.feedback_snr_db, to_db(m), se_db, lin)


def evaluate_nmse_sweep(
    config_base: CsiFbConfig,
    k_grid,
    variants,
    models: dict,
    dataset: np.ndarray,
    n_eval: int,
    rng: RandomSource,
) -> list[NmseRow]:
    """NMSE (dB) per (variant, k) on a held-out set with shared link noise.

    ``models[(variant_name, k)]`` is a trained :class:`CsiFeedbackNet` or a
    callable mapping the (n, U, N_t, N_c) CSI to a reconstruction.
    """
    h = dataset[:n_eval]
    rows = []
    for v in variants:
        name = getattr(v, "value", v)
        for k in k_grid:
            cfg = replace(config_base, k=int(k))
            key = (name, int(k))
            if key not in models:
                raise ValueError(f"no trained model for variant={name}, k={k}")
            m = models[key]
            h_hat = reconstruct(m, h, cfg.feedback_snr_db, rng) if isinstance(m, CsiFeedbackNet) else m(h)
            lin = nmse_linear(h, h_hat).reshape(h.shape[0], -1).mean(axis=1)
            rows.append(summarize(name, cfg, lin))
    return rows
