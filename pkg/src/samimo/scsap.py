"""Source-channel semantic-aware precoding (SCSAP) for multi-user image delivery.

Signal model (per sample)
-------------------------
* ``h``: (N_sc, U, N_t) downlink channel, single-antenna UEs.
* Transmit block ``s``: (N_sc, N_t, n_slots); the total power
  ``sum_sc mean_t ||s[sc, :, t]||^2`` equals the budget ``P``.
* Noise variance ``sigma2 = (P / N_sc) / 10^(snr/10)``.
* Every UE equalises its stream with a genie scalar MMSE equaliser built
  from its effective channel through the (knowledge-branch) precoder.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from samimo.kernels import bisect_mu, weighted_sum_rate, wmmse_kernel
from samimo.nnblocks import AttentionConfig, PositionalTable, TransformerLayer, WindowBlock, _zero_linear, init_params
from samimo.rng import RandomSource
from samimo.training import TrainingError, TrainSpec, make_optimizer, make_scheduler

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
N_BISECT = 64


@dataclass
class DownlinkMUChannel:
    """Per-subcarrier multi-user channel ``h[sc, u, :]`` and noise variance."""

    h: np.ndarray
    noise_var: float

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)
        if self.h.ndim == 2:
            self.h = self.h[None]
        if self.h.ndim != 3 or self.h.shape[1] < 1:
            raise ValueError("channel must be (N_sc, U, N_t) with U >= 1")
        if not np.all(np.isfinite(self.h)):
            raise ValueError("channel has non-finite entries")

    @property
    def U(self) -> int:
        return self.h.shape[1]

    @property
    def N_t(self) -> int:
        return self.h.shape[2]

    @property
    def N_sc(self) -> int:
        return self.h.shape[0]


@dataclass
class PrecodingMatrix:
    """``v[sc]`` is the (N_t, U) precoder of subcarrier ``sc``."""

    v: np.ndarray
    power_budget: float

    @property
    def power(self) -> float:
        return float(np.sum(np.abs(self.v) ** 2))


@dataclass
class ScsapConfig:
    U: int = 2
    N_t: int = 8
    N_sc: int = 4
    H: int = 16
    W: int = 16
    C: int = 3
    patch: int = 2
    d_model: int = 32
    n_heads: int = 4
    window: int = 4
    shift: int = 2
    enc_blocks: int = 2
    dec_blocks: int = 2
    csi_layers: int = 1
    fusion_layers: int = 1
    dd_layers: int = 1
    symbols_per_token: int = 2
    wmmse_iters: int = 3
    power_budget: float = 1.0
    alpha_init: float = 0.0
    n_taps: int = 4
    snr_train: tuple[float, float] = (0.0, 15.0)

    def __post_init__(self):
        if self.H % self.patch or self.W % self.patch:
            raise ValueError("patch size must divide the image")
        gh, gw = self.grid
        if self.window < 1 or gh % self.window or gw % self.window:
            raise ValueError(f"window {self.window} must divide the {gh}x{gw} token grid")
        if not 0 <= self.shift < self.window:
            raise ValueError("shift must lie in [0, window)")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.n_tokens * self.symbols_per_token) % self.N_sc:
            raise ValueError("symbols per UE must split evenly over subcarriers")
        if self.wmmse_iters < 1:
            raise ValueError("wmmse_iters must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.patch, self.W // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def n_slots(self) -> int:
        return self.n_tokens * self.symbols_per_token // self.N_sc

    def noise_var(self, snr_db):
        return (self.power_budget / self.N_sc) / 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0)


# --------------------------------------------------------------------------
# data


def draw_downlink_channels(cfg: ScsapConfig, n: int, rng: RandomSource) -> np.ndarray:
    """Broadband Rayleigh multipath, (n, N_sc, U, N_t), unit mean entry power.

    ``n_taps`` taps with an exponential power-delay profile; the N_sc
    subcarriers sample the frequency response evenly.
    """
    pdp = np.exp(-np.arange(cfg.n_taps) / 1.5)
    pdp /= pdp.sum()
    taps = rng.complex_normal((n, cfg.n_taps, cfg.U, cfg.N_t)) * np.sqrt(pdp)[None, :, None, None]
    f = np.arange(cfg.N_sc)[:, None] / cfg.N_sc
    phase = np.exp(-2j * np.pi * f * np.arange(cfg.n_taps)[None, :])  # (N_sc, taps)
    return np.einsum("st,ntuk->nsuk", phase, taps)


def synthetic_images(n: int, cfg: ScsapConfig, rng: RandomSource) -> np.ndarray:
    """Seeded smooth colour textures in [0, 1], shape (n, H, W, C).

    Each image mixes two oriented gratings and a Gaussian blob with random
    colours, giving structure a codec can exploit.
    """
    g = rng.gen
    y, x = np.meshgrid(np.linspace(0, 1, cfg.H), np.linspace(0, 1, cfg.W), indexing="ij")
    out = np.empty((n, cfg.H, cfg.W, cfg.C))
    for i in range(n):
        img = np.broadcast_to(g.uniform(0.2, 0.8, cfg.C), (cfg.H, cfg.W, cfg.C)).copy()
        for _ in range(2):
            theta = g.uniform(0, np.pi)
            freq = g.uniform(0.5, 3.0)
            ph = g.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + ph)
            img += 0.25 * wave[..., None] * g.uniform(-1, 1, cfg.C)
        cx, cy, w = g.uniform(0.2, 0.8), g.uniform(0.2, 0.8), g.uniform(0.08, 0.25)
        blob = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))
        img += 0.4 * blob[..., None] * g.uniform(-1, 1, cfg.C)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


# --------------------------------------------------------------------------
# classical precoders


def rzf_precode(ch: DownlinkMUChannel, reg: float, power_budget: float) -> PrecodingMatrix:
    """``H^H (H H^H + reg I)^-1`` per subcarrier, scaled to the total budget."""
    if reg < 0:
        raise ValueError("regularisation must be nonnegative")
    H = ch.h
    G = H @ np.swapaxes(H.conj(), -1, -2) + reg * np.eye(ch.U)
    if reg == 0:
        if np.min(np.linalg.svd(H, compute_uv=False)[..., -1]) < 1e-12 * max(np.max(np.abs(H)), 1e-300):
            raise np.linalg.LinAlgError("H H^H is singular; use reg > 0")
    V = np.swapaxes(H.conj(), -1, -2) @ np.linalg.inv(G)
    V *= np.sqrt(power_budget / np.sum(np.abs(V) ** 2))
    return PrecodingMatrix(V, power_budget)


def rzf_init(H: np.ndarray, sigma2: float, power: float) -> np.ndarray:
    """MMSE-regularised RZF for one subcarrier, scaled to ``power``; the WMMSE start."""
    U = H.shape[0]
    V = H.conj().T @ np.linalg.inv(H @ H.conj().T + (U * sigma2 / power) * np.eye(U))
    return V * np.sqrt(power / np.sum(np.abs(V) ** 2))


def wmmse_precode(
    ch: DownlinkMUChannel,
    power_budget: float,
    n_iter: int,
    weights=None,
    damping=None,
    n_bisect: int = N_BISECT,
) -> tuple[PrecodingMatrix, np.ndarray]:
    """Classical WMMSE per subcarrier with budget ``power_budget / N_sc`` each.

    Starts from MMSE-regularised RZF and returns the last iterate at full power.

    Returns the precoder and the weighted sum-rate (summed over subcarriers,
    bit/s/Hz) after every iteration.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    U = ch.U
    w = np.ones(U) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (U,) or np.any(w <= 0):
        raise ValueError("weights must be U positive reals")
    d = np.ones(n_iter) if damping is None else np.asarray(damping, dtype=float)
    p_sc = power_budget / ch.N_sc
    Vs, trace = [], np.zeros(n_iter)
    for sc in range(ch.N_sc):
        H = np.ascontiguousarray(ch.h[sc])
        V, tr = wmmse_kernel(H, rzf_init(H, float(ch.noise_var), p_sc), p_sc, float(ch.noise_var), w, int(n_iter), d, int(n_bisect))
        if not np.all(np.isfinite(V)):
            raise FloatingPointError(f"WMMSE produced non-finite precoder on subcarrier {sc}")
        # final iterate at full power (a no-op whenever the budget was active)
        V = V * np.sqrt(p_sc / np.sum(np.abs(V) ** 2))
        tr[-1] = weighted_sum_rate(H, V, float(ch.noise_var), w)
        Vs.append(V)
        trace += tr
    return PrecodingMatrix(np.stack(Vs), power_budget), trace


def sum_rate(ch: DownlinkMUChannel, prec: PrecodingMatrix, weights=None) -> float:
    w = np.ones(ch.U) if weights is None else np.asarray(weights, dtype=float)
    return float(sum(weighted_sum_rate(np.ascontiguousarray(ch.h[s]), np.ascontiguousarray(prec.v[s]), float(ch.noise_var), w) for s in range(ch.N_sc)))


# --------------------------------------------------------------------------
# differentiable WMMSE (knowledge branch)


def _bisect_mu_torch(A: torch.Tensor, B: torch.Tensor, power: torch.Tensor, n_bisect: int) -> torch.Tensor:
    """Batched twin of :func:`samimo.kernels.bisect_mu` (no gradient)."""
    with torch.no_grad():
        lam, Q = torch.linalg.eigh(A)
        c = (Q.conj().transpose(-1, -2) @ B).abs().pow(2).sum(-1)
        top = lam[..., -1].abs().clamp_min(1e-300)
        safe = lam[..., 0] > 1e-10 * top
        p0 = (c / torch.where(safe[..., None], lam, torch.ones_like(lam)) ** 2).sum(-1)
        zero_ok = safe & (p0 <= power)
        lo = torch.zeros_like(top)
        hi = torch.sqrt(c.sum(-1) / power)
        for _ in range(n_bisect):
            mid = 0.5 * (lo + hi)
            over = (c / (lam + mid[..., None]) ** 2).sum(-1) > power
            lo = torch.where(over, mid, lo)
            hi = torch.where(over, hi, mid)
        return torch.where(zero_ok, torch.zeros_like(hi), hi)


def learned_wmmse(
    H: torch.Tensor,
    power: float,
    sigma2: torch.Tensor,
    alpha: torch.Tensor,
    damping: torch.Tensor,
    n_iter: int,
    mu_override: list | None = None,
    n_bisect: int = N_BISECT,
):
    """Unfolded WMMSE with learned user weights and per-iteration damping.

    H: (B, N_sc, U, N_t); sigma2: (B,); alpha: (B, U) or per subcarrier
    (B, U, N_sc); damping: (B, n_iter).  Iterations start from the
    per-subcarrier MMSE-RZF precoder, as :func:`wmmse_precode` does.
    The bisection multiplier is computed without gradient; passing the ``mus``
    of an earlier call in ``mu_override`` freezes it exactly.
    Returns (V of shape (B, N_sc, N_t, U), per-iteration (log weight shift, mu)).
    """
    Bsz, Nsc, U, Nt = H.shape
    Hc = H
    s2 = sigma2.reshape(Bsz, 1, 1).to(H.real.dtype)
    eye_u = torch.eye(U, dtype=H.dtype)
    Hh = Hc.conj().transpose(-1, -2)
    V = Hh @ torch.linalg.inv(Hc @ Hh + (U * s2[..., None] / power).to(H.dtype) * eye_u)
    V = V * torch.sqrt(power / V.abs().pow(2).sum(dim=(-2, -1), keepdim=True))
    a = alpha.to(H.real.dtype)
    a = a.reshape(Bsz, 1, U) if a.dim() == 2 else a.transpose(1, 2)
    eye = torch.eye(Nt, dtype=H.dtype)
    P = torch.full((Bsz, Nsc), float(power), dtype=H.real.dtype)
    mus = []
    for t in range(n_iter):
        G = Hc @ V  # (B, Nsc, U, U)
        total = G.abs().pow(2).sum(-1) + s2  # (B, Nsc, U)
        direct = torch.diagonal(G, dim1=-2, dim2=-1)
        u = direct / total
        off = G.abs().pow(2).masked_fill(torch.eye(U, dtype=torch.bool), 0.0).sum(-1)
        # c = alpha_k / e_k with e_k = (interference + noise) / total, in logs.
        # V is invariant to a common per-subcarrier scale of c, so the largest
        # entry is pinned at 1; this keeps high-SNR weights (and their
        # gradients) inside float range.  The shift is frozen together with mu.
        logc = torch.log(a) + torch.log(total) - torch.log(off + s2)
        shift = logc.amax(dim=-1, keepdim=True).detach() if mu_override is None else mu_override[t][0]
        c = torch.exp(logc - shift)
        A = torch.einsum("bsk,bski,bskj->bsij", c * u.abs().pow(2), Hc.conj(), Hc)
        Bm = (Hc.conj() * (c * u).unsqueeze(-1)).transpose(-1, -2)  # (B, Nsc, Nt, U)
        mu = _bisect_mu_torch(A, Bm, P, n_bisect) if mu_override is None else mu_override[t][1]
        mus.append((shift, mu))
        Vn = torch.linalg.solve(A + mu[..., None, None].to(A.dtype) * eye, Bm)
        d = damping[:, t].reshape(Bsz, 1, 1, 1).to(H.real.dtype)
        V = d * Vn + (1.0 - d) * V
    # damping may leave the budget; full power never lowers an SINR
    V = V * torch.sqrt(power / V.abs().pow(2).sum(dim=(-2, -1), keepdim=True))
    return V, mus


# --------------------------------------------------------------------------
# networks


def _ri(z):
    return torch.cat([z.real, z.imag], dim=-1)


def patchify(img: torch.Tensor, p: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, H/p, W/p, p*p*C)."""
    B, H, W, C = img.shape
    x = img.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // p, W // p, p * p * C)


def unpatchify(x: torch.Tensor, p: int, C: int) -> torch.Tensor:
    B, gh, gw, _ = x.shape
    x = x.reshape(B, gh, gw, p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * p, gw * p, C)


def _att(cfg: ScsapConfig) -> AttentionConfig:
    return AttentionConfig(cfg.d_model, cfg.n_heads, 2 * cfg.d_model)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.patch * cfg.patch * cfg.C, cfg.d_model)
        self.pos = PositionalTable(cfg.n_tokens, cfg.d_model)
        self.blocks = nn.ModuleList(
            WindowBlock(_att(cfg), cfg.window, 0 if i % 2 == 0 else cfg.shift) for i in range(cfg.enc_blocks)
        )

    def forward(self, img):
        cfg = self.cfg
        gh, gw = cfg.grid
        x = self.embed(patchify(img, cfg.patch))
        x = self.pos(x.reshape(-1, cfg.n_tokens, cfg.d_model)).reshape(-1, gh, gw, cfg.d_model)
        for blk in self.blocks:
            x = blk(x)
        return x.reshape(-1, cfg.n_tokens, cfg.d_model)


class ImageDecoder(nn.Module):
    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(2 * cfg.symbols_per_token, cfg.d_model)
        self.pos = PositionalTable(cfg.n_tokens, cfg.d_model)
        self.blocks = nn.ModuleList(
            WindowBlock(_att(cfg), cfg.window, 0 if i % 2 == 0 else cfg.shift) for i in range(cfg.dec_blocks)
        )
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.patch * cfg.patch * cfg.C)

    def forward(self, tokens):
        """(B, T, 2c) equalised symbols -> (B, H, W, C) image in [0, 1]."""
        cfg = self.cfg
        gh, gw = cfg.grid
        x = self.pos(self.embed(tokens)).reshape(-1, gh, gw, cfg.d_model)
        for blk in self.blocks:
            x = blk(x)
        return torch.sigmoid(unpatchify(self.head(self.ln(x)), cfg.patch, cfg.C))


class CsiSemanticEncoder(nn.Module):
    """Tokens = per-(UE, subcarrier) channel vectors plus the link SNR.

    The SNR enters as ``log10(P_sc / sigma2)`` so that extreme SNRs stay in
    a numerically sane range.
    """

    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(2 * cfg.N_t + 1, cfg.d_model)
        self.sc_pos = nn.Parameter(torch.zeros(cfg.N_sc, cfg.d_model))
        self.layers = nn.ModuleList(TransformerLayer(_att(cfg)) for _ in range(cfg.csi_layers))

    def forward(self, h, sigma2):
        """h: (B, N_sc, U, N_t) complex; returns (B, U * N_sc, d) grouped by UE."""
        cfg = self.cfg
        if h.shape[-3:] != (cfg.N_sc, cfg.U, cfg.N_t):
            raise ValueError(f"channel must be (N_sc, U, N_t)=({cfg.N_sc}, {cfg.U}, {cfg.N_t})")
        feats = _ri(h).transpose(1, 2)  # (B, U, N_sc, 2 N_t)
        snr = torch.log10(cfg.power_budget / cfg.N_sc / sigma2).to(feats.dtype)
        snr = snr.reshape(-1, 1, 1, 1).expand(*feats.shape[:-1], 1)
        x = self.embed(torch.cat([feats, snr], dim=-1))
        x = (x + self.sc_pos).flatten(1, 2)
        for layer in self.layers:
            x = layer(x)
        return x


class Fusion(nn.Module):
    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.img_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.csi_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.layers = nn.ModuleList(TransformerLayer(_att(cfg)) for _ in range(cfg.fusion_layers))

    def forward(self, img_tokens, csi_tokens):
        """img_tokens (B, U, T, d), csi_tokens (B, U*G, d) -> (B, U, T, d).

        The re-projection of the feature-axis concatenation [img; csi] is
        written as the sum of two linear maps, which is the same thing.
        """
        B, U, T, d = img_tokens.shape
        if csi_tokens.shape[1] % U:
            raise ValueError("CSI token count must be a multiple of the UE count")
        pooled = csi_tokens.reshape(B, U, -1, d).mean(dim=2, keepdim=True)
        x = self.img_proj(img_tokens) + self.csi_proj(pooled)
        x = x.reshape(B * U, T, d)
        for layer in self.layers:
            x = layer(x)
        return x.reshape(B, U, T, d)


class DataDrivenPrecoder(nn.Module):
    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(TransformerLayer(_att(cfg)) for _ in range(cfg.dd_layers))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, 2 * cfg.symbols_per_token * cfg.N_t)

    def forward(self, fused):
        cfg = self.cfg
        B, U, T, d = fused.shape
        x = fused.reshape(B, U * T, d)
        for layer in self.layers:
            x = layer(x)
        out = self.head(self.ln(x)).reshape(B, U, T * cfg.symbols_per_token, 2, cfg.N_t)
        x = torch.complex(out[..., 0, :], out[..., 1, :]).sum(dim=1)  # superpose UEs
        return to_slots(x.transpose(-1, -2), cfg.N_sc).transpose(1, 2)  # (B, N_sc, N_t, n_slots)


class KnowledgePrecoder(nn.Module):
    """Transformer head producing learned WMMSE parameters, plus symbol heads."""

    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.layer = TransformerLayer(_att(cfg))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.weight_head = _zero_linear(cfg.d_model, cfg.N_sc)
        self.damping_head = _zero_linear(cfg.d_model, cfg.wmmse_iters)
        self.symbols = nn.Linear(cfg.d_model, 2 * cfg.symbols_per_token)

    def wmmse_params(self, fused):
        z = self.ln(self.layer(fused.mean(dim=2)))  # (B, U, d)
        alpha = nn.functional.softplus(self.weight_head(z))  # (B, U, N_sc)
        damping = 2.0 * torch.sigmoid(self.damping_head(z.mean(dim=1)))
        return alpha, damping


class ScsapNet(nn.Module):
    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.img_enc = ImageEncoder(cfg)
        self.csi_enc = CsiSemanticEncoder(cfg)
        self.fusion = Fusion(cfg)
        self.data_branch = DataDrivenPrecoder(cfg)
        self.knowledge = KnowledgePrecoder(cfg)
        self.alpha_param = nn.Parameter(torch.tensor(float(cfg.alpha_init)))
        self.img_dec = ImageDecoder(cfg)


class BaselineNet(nn.Module):
    """Same image codec with RZF precoding and no semantic fusion."""

    def __init__(self, cfg: ScsapConfig):
        super().__init__()
        self.cfg = cfg
        self.img_enc = ImageEncoder(cfg)
        self.symbols = nn.Linear(cfg.d_model, 2 * cfg.symbols_per_token)
        self.img_dec = ImageDecoder(cfg)


# --------------------------------------------------------------------------
# stream plumbing


def to_slots(stream: torch.Tensor, n_sc: int) -> torch.Tensor:
    """(…, T*c) -> (…, N_sc, n_slots); consecutive symbols hop subcarriers."""
    return stream.unflatten(-1, (-1, n_sc)).transpose(-1, -2)


def from_slots(x: torch.Tensor) -> torch.Tensor:
    return x.transpose(-1, -2).flatten(-2)


def tokens_to_stream(tok: torch.Tensor) -> torch.Tensor:
    """(…, T, 2c) real -> unit-power complex stream (…, T*c)."""
    c = tok.shape[-1] // 2
    z = torch.complex(tok[..., :c], tok[..., c:]).flatten(-2)
    return z / torch.sqrt(z.abs().pow(2).mean(dim=-1, keepdim=True))


def stream_to_tokens(z: torch.Tensor, c: int) -> torch.Tensor:
    z = z.unflatten(-1, (-1, c))
    return torch.cat([z.real, z.imag], dim=-1)


def normalize_block(s: torch.Tensor, power: float):
    """Scale (B, N_sc, N_t, n_slots) blocks to total power ``power``."""
    p = s.abs().pow(2).sum(dim=(1, 2)).mean(dim=-1)
    scale = torch.sqrt(power / p)
    return s * scale.reshape(-1, 1, 1, 1).to(s.dtype), scale


# --------------------------------------------------------------------------
# pipeline ops


def image_semantic_encode(img: torch.Tensor, net, cfg: ScsapConfig | None = None) -> torch.Tensor:
    """(B, U, H, W, C) -> (B, U, T, d)."""
    cfg = cfg or net.cfg
    if img.shape[-3:] != (cfg.H, cfg.W, cfg.C):
        raise ValueError(f"images must be {cfg.H}x{cfg.W}x{cfg.C}")
    lead = img.shape[:-3]
    return net.img_enc(img.reshape(-1, cfg.H, cfg.W, cfg.C)).reshape(*lead, cfg.n_tokens, cfg.d_model)


def csi_semantic_encode(h: torch.Tensor, sigma2: torch.Tensor, net: ScsapNet) -> torch.Tensor:
    return net.csi_enc(h, sigma2)


def fuse_semantics(img_tokens, csi_tokens, net: ScsapNet):
    return net.fusion(img_tokens, csi_tokens)


def data_driven_precode(fused, net: ScsapNet) -> torch.Tensor:
    return net.data_branch(fused)


def knowledge_driven_precode(fused, h, sigma2, net: ScsapNet, mu_override=None):
    """Learned-WMMSE precoder applied to per-UE symbol streams.

    Returns (transmit block (B, N_sc, N_t, n_slots), precoder V, mus).
    """
    cfg = net.cfg
    alpha, damping = net.knowledge.wmmse_params(fused)
    V, mus = learned_wmmse(h, cfg.power_budget / cfg.N_sc, sigma2, alpha, damping, cfg.wmmse_iters, mu_override)
    S = to_slots(tokens_to_stream(net.knowledge.symbols(fused)), cfg.N_sc)  # (B, U, N_sc, n_slots)
    x = V @ S.transpose(1, 2).to(V.dtype)
    return x, V, mus


def combine_branches(s_data, s_knowledge, alpha_param, power: float):
    """sigmoid(a) * s_data + (1 - sigmoid(a)) * s_knowledge, renormalised.

    Returns (block, knowledge-branch coefficient after renormalisation).
    """
    if s_data.shape != s_knowledge.shape:
        raise ValueError(f"branch shapes differ: {tuple(s_data.shape)} vs {tuple(s_knowledge.shape)}")
    a = torch.sigmoid(torch.as_tensor(alpha_param))
    s = a * s_data + (1 - a) * s_knowledge
    s, scale = normalize_block(s, power)
    return s, (1 - a) * scale


def downlink_transmit(s, h, sigma2, generator: torch.Generator | None = None, noise=None):
    """y[b, u, sc, t] = h[b, sc, u, :] . s[b, sc, :, t] + noise.

    Noise is drawn from ``generator`` unless a precomputed ``noise`` tensor is
    given; with neither the link is noiseless.
    """
    y = (h @ s).transpose(1, 2)  # (B, U, N_sc, n_slots)
    if noise is not None:
        return y + noise.to(y.dtype)
    if generator is None:
        return y
    std = torch.sqrt(sigma2 / 2).reshape(-1, 1, 1, 1).to(y.real.dtype)
    nre = torch.randn(y.shape, generator=generator, dtype=y.real.dtype)
    nim = torch.randn(y.shape, generator=generator, dtype=y.real.dtype)
    return y + std * torch.complex(nre, nim)


def equalize(y, g, sigma2):
    """Scalar MMSE equaliser ``conj(g) y / (|g|^2 + sigma2)``; g is (B, U, N_sc)."""
    g = g.unsqueeze(-1)
    return g.conj() * y / (g.abs().pow(2) + sigma2.reshape(-1, 1, 1, 1))


def image_semantic_decode(y_eq, net, cfg: ScsapConfig | None = None) -> torch.Tensor:
    """(B, U, N_sc, n_slots) equalised streams -> (B, U, H, W, C)."""
    cfg = cfg or net.cfg
    B, U = y_eq.shape[:2]
    tok = stream_to_tokens(from_slots(y_eq), cfg.symbols_per_token)
    return net.img_dec(tok.reshape(B * U, cfg.n_tokens, -1)).reshape(B, U, cfg.H, cfg.W, cfg.C)


def scsap_forward(net: ScsapNet, img, h, sigma2, generator=None, noise=None):
    cfg = net.cfg
    z_img = image_semantic_encode(img, net)
    z_csi = csi_semantic_encode(h, sigma2, net)
    fused = fuse_semantics(z_img, z_csi, net)
    s_data = data_driven_precode(fused, net)
    s_know, V, _ = knowledge_driven_precode(fused, h, sigma2, net)
    s, coef = combine_branches(s_data, s_know, net.alpha_param, cfg.power_budget)
    y = downlink_transmit(s, h, sigma2, generator, noise)
    g = torch.einsum("bsuk,bsku->bus", h, V) * coef.reshape(-1, 1, 1).to(V.dtype)
    return image_semantic_decode(equalize(y, g, sigma2.to(y.real.dtype)), net)


def rzf_torch(h, sigma2, power: float):
    """MMSE-regularised RZF (reg = U sigma2 / P_sc) scaled to total ``power``."""
    B, Nsc, U, Nt = h.shape
    reg = (U * sigma2 / (power / Nsc)).reshape(-1, 1, 1, 1).to(h.dtype)
    G = h @ h.conj().transpose(-1, -2) + reg * torch.eye(U, dtype=h.dtype)
    V = h.conj().transpose(-1, -2) @ torch.linalg.inv(G)
    p = V.abs().pow(2).sum(dim=(1, 2, 3))
    return V * torch.sqrt(power / p).reshape(-1, 1, 1, 1).to(V.dtype)


def baseline_forward(net: BaselineNet, img, h, sigma2, generator=None, noise=None):
    cfg = net.cfg
    z = image_semantic_encode(img, net)
    S = to_slots(tokens_to_stream(net.symbols(z)), cfg.N_sc)  # (B, U, N_sc, n_slots)
    V = rzf_torch(h, sigma2, cfg.power_budget)
    s, scale = normalize_block(V @ S.transpose(1, 2).to(V.dtype), cfg.power_budget)
    y = downlink_transmit(s, h, sigma2, generator, noise)
    g = torch.einsum("bsuk,bsku->bus", h, V) * scale.reshape(-1, 1, 1).to(V.dtype)
    return image_semantic_decode(equalize(y, g, sigma2.to(y.real.dtype)), net)


def psnr(ref, rec) -> np.ndarray:
    """Per-image PSNR (peak 1) over the trailing (H, W, C) axes, capped at 100 dB."""
    ref, rec = np.asarray(ref, dtype=float), np.asarray(rec, dtype=float)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {rec.shape}")
    mse = np.mean((ref - rec) ** 2, axis=(-3, -2, -1))
    with np.errstate(divide="ignore"):
        out = np.minimum(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)
    return out


# --------------------------------------------------------------------------
# training / evaluation


FORWARDS = {"scsap": (ScsapNet, scsap_forward), "rzf_codec": (BaselineNet, baseline_forward)}


@dataclass
class ScsapDataset:
    images: np.ndarray  # (N, U, H, W, C)
    channels: np.ndarray  # (N, N_sc, U, N_t)


def generate_dataset(cfg: ScsapConfig, n: int, rng: RandomSource) -> ScsapDataset:
    imgs = synthetic_images(n * cfg.U, cfg, rng.child(0)).reshape(n, cfg.U, cfg.H, cfg.W, cfg.C)
    return ScsapDataset(imgs.astype(np.float32), draw_downlink_channels(cfg, n, rng.child(1)).astype(np.complex64))


def train_scsap(
    cfg: ScsapConfig,
    dataset: ScsapDataset,
    spec: TrainSpec,
    rng: RandomSource,
    scheme: str = "scsap",
):
    """Train the SCSAP network (or the RZF codec baseline) on image MSE.

    Every step pairs random images with random channels from the dataset and
    a per-sample SNR uniform over ``cfg.snr_train``.
    """
    cls, fwd = FORWARDS[scheme]
    net = init_params(cls(cfg), rng.child(0).torch_generator())
    opt = make_optimizer(net, spec)
    sched = make_scheduler(opt, spec)
    g = rng.child(1).gen
    noise = rng.child(2).torch_generator()
    imgs = torch.as_tensor(dataset.images)
    chans = torch.as_tensor(dataset.channels)
    n = imgs.shape[0]
    per_epoch = max(spec.steps // spec.epochs, 1)
    curve, running = [], []
    for step in range(spec.steps):
        ii = torch.as_tensor(g.integers(0, n, spec.batch))
        jj = torch.as_tensor(g.integers(0, n, spec.batch))
        snr = g.uniform(*cfg.snr_train, spec.batch)
        sigma2 = torch.as_tensor(cfg.noise_var(snr), dtype=torch.float32)
        x = imgs[ii]
        try:
            rec = fwd(net, x, chans[jj], sigma2, noise)
        except torch.linalg.LinAlgError as exc:
            raise TrainingError(f"SCSAP training hit a singular system at step {step}: {exc}") from exc
        loss = torch.mean((rec - x) ** 2)
        if not torch.isfinite(loss):
            raise TrainingError(f"SCSAP training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        running.append(loss.item())
        if len(running) == per_epoch or step == spec.steps - 1:
            curve.append(float(np.mean(running)))
            log.info("%s epoch %d mse %.5f", scheme, len(curve), curve[-1])
            running = []
    return net, curve


@dataclass
class QualityRow:
    scheme: str
    snr_db: float
    psnr_db: float
    mse: float
    stderr: float
    per_sample: np.ndarray = field(default=None, repr=False)


@torch.no_grad()
def reconstruct(net, scheme: str, dataset: ScsapDataset, snr_db: float, rng: RandomSource, batch: int = 128):
    """Paired evaluation: sample i's noise comes from ``rng.child(i)``."""
    _, fwd = FORWARDS[scheme]
    net.eval()
    cfg = net.cfg
    n = dataset.images.shape[0]
    out = np.empty(dataset.images.shape, dtype=np.float32)
    sig = float(cfg.noise_var(snr_db))
    for s in range(0, n, batch):
        e = min(s + batch, n)
        x = torch.as_tensor(dataset.images[s:e])
        h = torch.as_tensor(dataset.channels[s:e])
        sigma2 = torch.full((e - s,), sig, dtype=torch.float32)
        nz = np.stack([rng.child(i).gen.standard_normal((2, cfg.U, cfg.N_sc, cfg.n_slots)) for i in range(s, e)])
        nz = torch.as_tensor(nz, dtype=torch.float32)
        noise = torch.sqrt(sigma2 / 2).reshape(-1, 1, 1, 1) * torch.complex(nz[:, 0], nz[:, 1])
        out[s:e] = fwd(net, x, h, sigma2, noise=noise).numpy()
    return out


def evaluate_quality_sweep(models: dict, dataset: ScsapDataset, snr_grid, rng: RandomSource) -> list[QualityRow]:
    """PSNR/MSE per (scheme, SNR) on a paired held-out set.

    ``models`` maps a scheme name (``"scsap"``/``"rzf_codec"``) to a trained
    network, or any name to a callable ``f(dataset, snr_db) -> images``.
    """
    rows = []
    for snr in snr_grid:
        for name, m in models.items():
            rec = reconstruct(m, name, dataset, snr, rng.child(int(round(snr * 1000)) + 10**6)) if isinstance(m, nn.Module) else m(dataset, snr)
            p = psnr(dataset.images, rec).reshape(-1)
            mse = float(np.mean((dataset.images - rec) ** 2))
            rows.append(QualityRow(name, float(snr), float(p.mean()), mse, float(p.std(ddof=1) / np.sqrt(p.size)), p))
    return rows
