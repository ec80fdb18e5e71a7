"""Attention building blocks shared by the three specialist models.

All layers are pre-norm residual.  Output projections of every residual branch
start at zero, so a freshly initialised block is the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    d_ff: int | None = None
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def ff(self) -> int:
        return self.d_ff or 2 * self.d_model


def trunc_normal_(w: torch.Tensor, std: float = 0.02, generator: torch.Generator | None = None):
    with torch.no_grad():
        w.normal_(0.0, std, generator=generator).clamp_(-2 * std, 2 * std)
    return w


def init_params(module: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """Truncated-normal(0.02) weights, zero biases, zero residual outputs.

    Linear layers flagged with ``_zero_init = True`` are residual-branch
    outputs and start at zero.  LayerNorm keeps its (1, 0) affine default.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            if getattr(m, "_zero_init", False):
                nn.init.zeros_(m.weight)
            else:
                trunc_normal_(m.weight, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, PositionalTable):
            trunc_normal_(m.table, generator=generator)
    return module


def _zero_linear(d_in: int, d_out: int) -> nn.Linear:
    lin = nn.Linear(d_in, d_out)
    lin._zero_init = True
    return lin


class PositionalTable(nn.Module):
    """Learned additive position embedding over a fixed number of slots."""

    def __init__(self, n: int, d: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(n, d))

    def forward(self, x):
        return x + self.table


class MultiHeadAttention(nn.Module):
    """softmax(Q K^T / sqrt(d_head)) V per head, concatenated and projected."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = _zero_linear(d_model, d_model)

    def _split(self, x):
        *lead, T, _ = x.shape
        return x.reshape(*lead, T, self.n_heads, -1).transpose(-2, -3)

    def _merge(self, x):
        x = x.transpose(-2, -3)
        return x.reshape(*x.shape[:-2], self.d_model)

    def attend(self, q, k, v, return_weights=False):
        """Scaled dot-product attention on already projected (…, T, d) inputs."""
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
        w = torch.softmax(scores, dim=-1)
        out = self._merge(w @ vh)
        return (out, w) if return_weights else out

    def _check(self, *xs):
        for x in xs:
            if x.shape[-1] != self.d_model:
                raise ValueError(f"token width {x.shape[-1]} != d_model {self.d_model}")

    def forward(self, q_tokens, k_tokens, v_tokens, return_weights=False):
        self._check(q_tokens, k_tokens, v_tokens)
        if k_tokens.shape[-2] != v_tokens.shape[-2]:
            raise ValueError("key and value sequences differ in length")
        res = self.attend(self.q(q_tokens), self.k(k_tokens), self.v(v_tokens), return_weights)
        if return_weights:
            return self.o(res[0]), res[1]
        return self.o(res)


def multi_head_attention(q_tokens, k_tokens, v_tokens, params: MultiHeadAttention):
    return params(q_tokens, k_tokens, v_tokens)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = _zero_linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerLayer(nn.Module):
    """Homogeneous pre-norm self-attention layer."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff)

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.ff(self.ln2(x))


class _FamilyWeights(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff)


class HeteroLayer(nn.Module):
    """Joint self-attention over two token families with separate weights.

    Each family has its own norms, Q/K/V/output projections and feed-forward;
    the attention scores are computed over the concatenated sequence.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.sig = _FamilyWeights(cfg)
        self.pre = _FamilyWeights(cfg)

    def forward(self, signal_tokens, preamble_tokens):
        d = self.cfg.d_model
        if signal_tokens.shape[-1] != d or preamble_tokens.shape[-1] != d:
            raise ValueError("both token families must have width d_model")
        hs, hp = self.sig.ln1(signal_tokens), self.pre.ln1(preamble_tokens)
        sa, pa = self.sig.attn, self.pre.attn
        q = torch.cat([sa.q(hs), pa.q(hp)], dim=-2)
        k = torch.cat([sa.k(hs), pa.k(hp)], dim=-2)
        v = torch.cat([sa.v(hs), pa.v(hp)], dim=-2)
        mixed = sa.attend(q, k, v)
        n_sig = signal_tokens.shape[-2]
        s = signal_tokens + sa.o(mixed[..., :n_sig, :])
        p = preamble_tokens + pa.o(mixed[..., n_sig:, :])
        s = s + self.sig.ff(self.sig.ln2(s))
        p = p + self.pre.ff(self.pre.ln2(p))
        return s, p


def hetero_layer_forward(signal_tokens, preamble_tokens, params: HeteroLayer):
    return params(signal_tokens, preamble_tokens)


class Plam(nn.Module):
    """Preamble-length adaptive scaling of token features."""

    def __init__(self, d_model: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(d_model // 2, 1)
        self.fc1 = nn.Linear(d_model + 1, hidden)
        self.fc2 = nn.Linear(hidden, d_model)

    def scales(self, tokens, L, L_max: int):
        L = torch.as_tensor(L, dtype=tokens.dtype, device=tokens.device)
        if torch.any(L < 1) or torch.any(L > L_max):
            raise ValueError(f"preamble length must lie in [1, {L_max}]")
        pooled = tokens.mean(dim=-2)
        frac = (L / L_max).expand(pooled.shape[:-1]).unsqueeze(-1)
        z = torch.cat([pooled, frac], dim=-1)
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(z))))

    def forward(self, tokens, L, L_max: int):
        return tokens * self.scales(tokens, L, L_max).unsqueeze(-2)


def plam_forward(tokens, L, L_max, params: Plam):
    return params(tokens, L, L_max)


class RcaBlock(nn.Module):
    """Cross-attention with queries from peer UEs and keys/values from self.

    ``residual=False`` drops the skip around the cross-attention (the plain
    cross-attention ablation); the feed-forward sub-layer keeps its skip.
    """

    def __init__(self, cfg: AttentionConfig, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.ln_self = nn.LayerNorm(cfg.d_model)
        self.ln_peer = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff)

    def forward(self, f_self, f_peers: Sequence[torch.Tensor]):
        if len(f_peers) == 0:
            raise ValueError("RCA needs at least one peer")
        d = self.attn.d_model
        if f_self.shape[-1] != d or any(p.shape[-1] != d for p in f_peers):
            raise ValueError("feature widths must equal d_model")
        q = torch.stack([self.attn.q(self.ln_peer(p)) for p in f_peers]).mean(dim=0)
        hs = self.ln_self(f_self)
        a = self.attn.o(self.attn.attend(q, self.attn.k(hs), self.attn.v(hs)))
        f = f_self + a if self.residual else a
        return f + self.ff(self.ln2(f))


def rca_forward(f_self, f_peers, params: RcaBlock):
    return params(f_self, f_peers)


def window_partition(x, window: int):
    """(B, H, W, d) -> (B, nH*nW, window*window, d)."""
    B, H, W, d = x.shape
    x = x.reshape(B, H // window, window, W // window, window, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, (H // window) * (W // window), window * window, d)


def window_merge(x, window: int, H: int, W: int):
    B, _, _, d = x.shape
    x = x.reshape(B, H // window, W // window, window, window, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, d)


def windowed_attention_forward(feature_map, window: int, shift: int, params: MultiHeadAttention):
    """Self-attention restricted to (cyclically shifted) window x window blocks."""
    if feature_map.dim() != 4:
        raise ValueError("feature map must be (B, H, W, d)")
    _, H, W, _ = feature_map.shape
    if window < 1 or H % window or W % window:
        raise ValueError(f"window {window} must divide grid {H}x{W}")
    if not 0 <= shift < window:
        raise ValueError(f"shift must lie in [0, {window})")
    x = torch.roll(feature_map, shifts=(-shift, -shift), dims=(1, 2)) if shift else feature_map
    xw = window_partition(x, window)
    xw = params(xw, xw, xw)
    x = window_merge(xw, window, H, W)
    return torch.roll(x, shifts=(shift, shift), dims=(1, 2)) if shift else x


class WindowBlock(nn.Module):
    """Pre-norm windowed self-attention block (attention + feed-forward)."""

    def __init__(self, cfg: AttentionConfig, window: int, shift: int = 0):
        super().__init__()
        self.window, self.shift = window, shift
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff)

    def forward(self, x):
        x = x + windowed_attention_forward(self.ln1(x), self.window, self.shift, self.attn)
        return x + self.ff(self.ln2(x))


def _param_list(params) -> list[torch.Tensor]:
    if isinstance(params, nn.Module):
        return [p for p in params.parameters() if p.requires_grad]
    if isinstance(params, dict):
        return list(params.values())
    return list(params)


def gradient_check(
    forward: Callable[[], torch.Tensor],
    params,
    epsilon: float = 1e-4,
    n_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    ``forward`` is a zero-argument closure returning a scalar that depends on
    ``params`` (a module, a dict of tensors, or a list of tensors).  At least
    ``min(n_coords, total)`` coordinates are sampled; the relative error of a
    coordinate is ``|g - g_fd| / max(|g|, |g_fd|, floor * max|g|)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    tensors = _param_list(params)
    for t in tensors:
        t.grad = None
    loss = forward()
    if not torch.isfinite(loss):
        raise FloatingPointError("gradient_check: non-finite loss")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(max(n_coords, 50), total), replace=False)
    offsets = np.cumsum([0] + sizes)
    analytic, numeric = [], []
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            t = tensors[i].view(-1)
            g = grads[i]
            analytic.append(0.0 if g is None else float(g.reshape(-1)[j]))
            old = float(t[j])
            t[j] = old + epsilon
            fp = float(forward())
            t[j] = old - epsilon
            fm = float(forward())
            t[j] = old
            numeric.append((fp - fm) / (2 * epsilon))
    a, n = np.array(analytic), np.array(numeric)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
        raise FloatingPointError("gradient_check: non-finite gradient")
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))
