"""Encoder-decoder denoiser f(z_t, z0_hat, x, t) with a length-prediction head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .codec import PAD_ID


@dataclass
class DenoiserConfig:
    vocab_size: int = 16
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ffn: int = 128
    d: int = 16
    max_len: int = 32
    sc_enabled: bool = True
    max_offset: int = 8

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ffn", "d", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_offset < 0:
            raise ValueError("max_offset must be non-negative")

    @classmethod
    def paper(cls, vocab_size: int) -> "DenoiserConfig":
        """transformer-base sized preset (12 layers total, d=128)."""
        return cls(vocab_size, n_layers=6, n_heads=8, d_model=512, d_ffn=2048, d=128, max_len=256)

    def to_dict(self) -> dict:
        return asdict(self)


class SourceMemory(NamedTuple):
    states: torch.Tensor  # (B, S, d_model)
    pad_mask: torch.Tensor  # (B, S), True at padding


def sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` features, ``w_i = 10000^(-2i/dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) * 2 / dim)
    angles = t.to(torch.float64)[..., None] * freqs
    out = torch.stack([angles.sin(), angles.cos()], dim=-1).flatten(-2)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x, memory, key_pad_mask=None, causal=False):
        B, Lq, D = x.shape
        Lk = memory.shape[1]
        h, dh = self.n_heads, D // self.n_heads
        q = self.q(x).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(memory).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v(memory).view(B, Lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        neg = torch.finfo(scores.dtype).min
        if key_pad_mask is not None:
            scores = scores.masked_fill(key_pad_mask[:, None, None, :], neg)
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, neg)
        out = scores.softmax(dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, Lq, D))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ffn):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ffn)

    def forward(self, x, pad_mask=None, causal=False):
        y = self.ln1(x)
        x = x + self.attn(y, y, pad_mask, causal)
        return x + self.ffn(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ffn):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ln3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ffn)

    def forward(self, x, memory, memory_pad_mask, pad_mask=None, causal=False):
        y = self.ln1(x)
        x = x + self.self_attn(y, y, pad_mask, causal)
        x = x + self.cross_attn(self.ln2(x), memory, memory_pad_mask)
        return x + self.ffn(self.ln3(x))


def as_batch(ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    return ids[None] if ids.dim() == 1 else ids


class Denoiser(nn.Module):
    """Non-autoregressive denoiser.

    The latent stack reads ``in_proj([z_t ; z0_hat])`` plus fixed sinusoidal
    positions; the time embedding is added to the input of every decoder
    layer. ``embedding`` is the tied latent table shared with the codec.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = c = config
        self.embedding = nn.Embedding(c.vocab_size, c.d)
        self.src_embed = nn.Embedding(c.vocab_size, c.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(c.d_model, c.n_heads, c.d_ffn) for _ in range(c.n_layers))
        self.enc_norm = nn.LayerNorm(c.d_model)
        self.in_proj = nn.Linear(2 * c.d, c.d_model)
        self.time_mlp = nn.Sequential(nn.Linear(c.d_model, c.d_model), nn.SiLU(), nn.Linear(c.d_model, c.d_model))
        self.decoder = nn.ModuleList(DecoderLayer(c.d_model, c.n_heads, c.d_ffn) for _ in range(c.n_layers))
        self.dec_norm = nn.LayerNorm(c.d_model)
        self.out_proj = nn.Linear(c.d_model, c.d)
        self.length_head = nn.Linear(c.d_model, 2 * c.max_offset + 1)
        self.register_buffer("positions", sinusoidal(torch.arange(c.max_len), c.d_model), persistent=False)
        self.use_positions = True

        nn.init.normal_(self.embedding.weight)
        # small rather than zero so distinct t stay distinguishable from the first step
        with torch.no_grad():
            self.time_mlp[2].weight.mul_(0.1)
            self.time_mlp[2].bias.zero_()

    @property
    def table(self) -> torch.Tensor:
        return self.embedding.weight

    def _positions(self, L: int, like: torch.Tensor) -> torch.Tensor:
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len={self.config.max_len}")
        pos = self.positions[:L].to(like.dtype)
        return pos if self.use_positions else torch.zeros_like(pos)

    def encode(self, src, pad_mask: torch.Tensor | None = None) -> SourceMemory:
        src = as_batch(src)
        if src.shape[1] == 0:
            raise ValueError("source sequence is empty")
        if pad_mask is None:
            pad_mask = src == PAD_ID
        x = self.src_embed(src)
        x = x + self._positions(src.shape[1], x)
        for layer in self.encoder:
            x = layer(x, pad_mask)
        return SourceMemory(self.enc_norm(x), pad_mask)

    encode_source = encode

    def time_embedding(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        base = sinusoidal(t, self.config.d_model).to(self.in_proj.weight.dtype)
        return self.time_mlp(base)

    def denoise(
        self,
        z_t: torch.Tensor,
        self_cond: torch.Tensor | None,
        memory: SourceMemory,
        t,
        pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Predict z0 from ``z_t`` (B, L, d); ``self_cond=None`` means the zero latent."""
        if self_cond is not None and self_cond.shape != z_t.shape:
            raise ValueError(f"self-condition shape {tuple(self_cond.shape)} != z_t shape {tuple(z_t.shape)}")
        if z_t.shape[-1] != self.config.d:
            raise ValueError(f"latent width {z_t.shape[-1]} != d={self.config.d}")
        if self_cond is None or not self.config.sc_enabled:
            self_cond = torch.zeros_like(z_t)
        h = self.in_proj(torch.cat([z_t, self_cond], dim=-1))
        h = h + self._positions(z_t.shape[1], h)
        temb = self.time_embedding(t)
        if temb.dim() == 1:
            temb = temb.expand(z_t.shape[0], -1)
        temb = temb[:, None, :]
        for layer in self.decoder:
            h = layer(h + temb, memory.states, memory.pad_mask, pad_mask)
        return self.out_proj(self.dec_norm(h))

    def length_logits(self, memory: SourceMemory) -> torch.Tensor:
        keep = (~memory.pad_mask).to(memory.states.dtype)[..., None]
        pooled = (memory.states * keep).sum(1) / keep.sum(1).clamp_min(1.0)
        return self.length_head(pooled)

    def predict_length(self, memory: SourceMemory) -> torch.Tensor:
        """Probabilities over target-length offsets ``-max_offset..+max_offset``."""
        return self.length_logits(memory).softmax(dim=-1)

    def offset_targets(self, src_lens: torch.Tensor, tgt_lens: torch.Tensor) -> torch.Tensor:
        m = self.config.max_offset
        return (tgt_lens - src_lens).clamp(-m, m) + m

    def top_lengths(self, memory: SourceMemory, src_len: int, k: int) -> list[int]:
        """``k`` distinct candidate target lengths for a single source, most probable first."""
        probs = self.predict_length(memory)[0]
        m = self.config.max_offset
        lengths: list[int] = []
        for idx in torch.argsort(probs, descending=True, stable=True).tolist():
            n = min(max(src_len + idx - m, 1), self.config.max_len)
            if n not in lengths:
                lengths.append(n)
            if len(lengths) == k:
                break
        return lengths


def encode_source(x: Sequence[int], model: Denoiser) -> SourceMemory:
    return model.encode(x)


def denoise(z_t, self_cond, memory, t, model: Denoiser, pad_mask=None):
    return model.denoise(z_t, self_cond, memory, t, pad_mask)


def predict_length(memory: SourceMemory, model: Denoiser) -> torch.Tensor:
    return model.predict_length(memory)


def time_embedding(t, model: Denoiser) -> torch.Tensor:
    return model.time_embedding(t)
