"""Small autoregressive encoder-decoder used to score candidates by perplexity."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .codec import BOS_ID, EOS_ID
from .data import BatchStream, ParallelPair, pad_sequences
from .denoiser import DecoderLayer, DenoiserConfig, EncoderLayer, sinusoidal


class ARScorer(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = c = config
        self.embed = nn.Embedding(c.vocab_size, c.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(c.d_model, c.n_heads, c.d_ffn) for _ in range(c.n_layers))
        self.enc_norm = nn.LayerNorm(c.d_model)
        self.decoder = nn.ModuleList(DecoderLayer(c.d_model, c.n_heads, c.d_ffn) for _ in range(c.n_layers))
        self.dec_norm = nn.LayerNorm(c.d_model)
        self.out = nn.Linear(c.d_model, c.vocab_size)
        self.register_buffer("positions", sinusoidal(torch.arange(c.max_len + 1), c.d_model).float(), persistent=False)

    def forward(self, src, src_mask, dec_in, dec_mask):
        x = self.embed(src) + self.positions[: src.shape[1]]
        for layer in self.encoder:
            x = layer(x, src_mask)
        memory = self.enc_norm(x)
        h = self.embed(dec_in) + self.positions[: dec_in.shape[1]]
        for layer in self.decoder:
            h = layer(h, memory, src_mask, dec_mask, causal=True)
        return self.out(self.dec_norm(h))

    def nll(self, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> torch.Tensor:
        """Per-sequence mean token NLL of ``target + <eos>``."""
        src, src_mask = pad_sequences(sources)
        dec_in, dec_mask = pad_sequences([[BOS_ID, *t] for t in targets])
        gold, _ = pad_sequences([[*t, EOS_ID] for t in targets])
        logits = self(src, src_mask, dec_in, dec_mask)
        nll = F.cross_entropy(logits.transpose(1, 2), gold, reduction="none")
        keep = (~dec_mask).to(nll.dtype)
        return (nll * keep).sum(1) / keep.sum(1)

    @torch.no_grad()
    def score(self, tokens: Sequence[int], source: Sequence[int]) -> float:
        """Perplexity of ``tokens`` given ``source``."""
        self.eval()
        return math.exp(float(self.nll([list(source)], [list(tokens)])[0]))


def train_scorer(
    pairs: Sequence[ParallelPair],
    config: DenoiserConfig,
    steps: int = 3000,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> ARScorer:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ARScorer(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.98))
    stream = BatchStream(pairs, batch_size, seed)
    model.train()
    for _ in range(steps):
        batch = next(stream)
        srcs = [row[:n].tolist() for row, n in zip(batch.src, batch.src_lens.tolist())]
        tgts = [row[:n].tolist() for row, n in zip(batch.tgt, batch.tgt_lens.tolist())]
        loss = model.nll(srcs, tgts).mean()
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
    model.eval()
    return model
