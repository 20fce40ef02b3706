"""Deterministic DDIM reverse process with self-conditioning and MBR candidate selection."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from .bleu import bleu
from .codec import EOS_ID, round_batch
from .denoiser import as_batch
from .schedule import NoiseSchedule


@dataclass
class SamplerConfig:
    n_steps: int = 20
    delta: int = 1  # asymmetric offset in units of the coarse step grid
    b: int = 5
    length_beams: int | None = None  # None -> 1
    mbr_metric: str = "bleu"
    seed: int = 0

    def __post_init__(self):
        if self.length_beams is None:
            self.length_beams = 1
        if self.n_steps < 1 or self.b < 1 or self.delta < 0:
            raise ValueError("n_steps and b must be >= 1, delta >= 0")
        if not 1 <= self.length_beams <= self.b:
            raise ValueError(f"length_beams must be in [1, b={self.b}], got {self.length_beams}")
        if self.mbr_metric not in ("bleu", "perplexity"):
            raise ValueError(f"unknown MBR metric {self.mbr_metric!r}")

    def validate(self, T: int) -> None:
        if self.n_steps > T:
            raise ValueError(f"n_steps={self.n_steps} exceeds the {T} training steps")

    def offset(self, T: int) -> int:
        """Asymmetric time gap in schedule indices."""
        return int(round(self.delta * T / self.n_steps))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Candidate:
    tokens: list[int]
    score: float = float("nan")
    trajectory_len: int = 0
    length: int = 0
    seed_index: int = 0


class Scorer(Protocol):
    def score(self, tokens: Sequence[int], source: Sequence[int]) -> float:
        """Perplexity of ``tokens`` given ``source`` (lower is better)."""


def step_grid(T: int, n_steps: int) -> list[int]:
    """``n_steps + 1`` evenly spaced, strictly decreasing time indices from T to 0."""
    grid = np.round(np.linspace(T, 0, n_steps + 1)).astype(int).tolist()
    if len(set(grid)) != len(grid):
        raise ValueError(f"cannot place {n_steps} distinct steps on [0, {T}]")
    return grid


def estimate_noise(z_t: torch.Tensor, z0_hat: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Recover the forward-process noise implied by ``z0_hat`` (unscaled marginal)."""
    if t < 1:
        raise ValueError("estimate_noise needs t >= 1")
    bb = float(schedule.beta_bar[t])
    return (z_t - (1.0 - bb) ** 0.5 * z0_hat) / bb**0.5


def ddim_step(z0_hat: torch.Tensor, eps_tilde: torch.Tensor, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic move to ``t_prev``; the terminal step (``t_prev == 0``) returns ``z0_hat``."""
    if t_prev <= 0:
        return z0_hat
    bb = float(schedule.beta_bar[t_prev])
    return (1.0 - bb) ** 0.5 * z0_hat + bb**0.5 * eps_tilde


def allocate_seeds(lengths: Sequence[int], b: int) -> list[int]:
    """Split ``b`` seeds over length beams; the remainder goes to the longest beam."""
    k = len(lengths)
    counts = [b // k] * k
    counts[int(np.argmax(lengths))] += b - sum(counts)
    return counts


@dataclass
class Trajectory:
    times: list[int]
    latents: list[torch.Tensor] = field(default_factory=list)  # z at each grid time, (b, L, d)
    predictions: list[torch.Tensor] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)


@torch.no_grad()
def run_reverse(
    model,
    memory,
    lengths: Sequence[int],
    schedule: NoiseSchedule,
    config: SamplerConfig,
    generator: torch.Generator,
    keep_trajectory: bool = False,
):
    """Run the reverse process for a batch of candidate lengths sharing one source memory."""
    d = model.table.shape[1]
    dtype = model.table.dtype
    n, L = len(lengths), max(lengths)
    pad_mask = torch.arange(L)[None, :] >= torch.as_tensor(list(lengths))[:, None]
    states = memory.states.expand(n, -1, -1)
    mem = type(memory)(states, memory.pad_mask.expand(n, -1))
    T = schedule.T
    gap = config.offset(T)
    grid = step_grid(T, config.n_steps)

    z = torch.randn((n, L, d), generator=generator, dtype=dtype)
    traj = Trajectory(times=grid, lengths=list(lengths)) if keep_trajectory else None
    z0_hat = None
    for t, t_prev in zip(grid[:-1], grid[1:]):
        if traj is not None:
            traj.latents.append(z.clone())
        t_model = min(t + gap, T)
        z0_hat = model.denoise(z, z0_hat, mem, t_model, pad_mask)
        eps = estimate_noise(z, z0_hat, t, schedule)
        z = ddim_step(z0_hat, eps, t_prev, schedule)
        if traj is not None:
            traj.predictions.append(z0_hat.clone())
    if traj is not None:
        traj.latents.append(z.clone())
    return z0_hat, traj


def generate(
    x: Sequence[int],
    model,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    generator: torch.Generator | None = None,
    return_trajectory: bool = False,
):
    """Sample exactly ``config.b`` candidates for source ``x``."""
    if len(x) == 0:
        raise ValueError("source sequence is empty")
    config.validate(schedule.T)
    if generator is None:
        generator = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        model_was_training = getattr(model, "training", False)
        if model_was_training:
            model.eval()
        memory = model.encode(as_batch(list(x)))
        beams = model.top_lengths(memory, len(x), config.length_beams)
        counts = allocate_seeds(beams, config.b)
        lengths = [n for n, c in zip(beams, counts) for _ in range(c)]
        seed_index = [i for c in counts for i in range(c)]
        z0_hat, traj = run_reverse(model, memory, lengths, schedule, config, generator, return_trajectory)
        tokens = round_batch(z0_hat, model.table, lengths, EOS_ID)
        if model_was_training:
            model.train()
    cands = [
        Candidate(tok, trajectory_len=config.n_steps, length=n, seed_index=s)
        for tok, n, s in zip(tokens, lengths, seed_index)
    ]
    return (cands, traj) if return_trajectory else cands


def consensus_scores(cands: Sequence[Candidate]) -> list[float]:
    """Mean BLEU of each candidate against all the others (higher is better)."""
    n = len(cands)
    if n == 1:
        return [1.0]
    scores = []
    for i, c in enumerate(cands):
        total = sum(bleu(c.tokens, o.tokens) for j, o in enumerate(cands) if j != i and o.tokens)
        scores.append(total / (n - 1))
    return scores


def mbr_select(
    cands: Sequence[Candidate],
    metric: str = "bleu",
    scorer: Scorer | None = None,
    source: Sequence[int] | None = None,
) -> Candidate:
    """Pick one candidate; sets ``score`` on every candidate (lower is better), ties go to the lowest index."""
    if not cands:
        raise ValueError("no candidates to select from")
    if metric == "bleu":
        scores = [-s for s in consensus_scores(cands)]
    elif metric == "perplexity":
        if scorer is None:
            raise ValueError("perplexity MBR needs an autoregressive scorer")
        scores = [scorer.score(c.tokens, source) if c.tokens else float("inf") for c in cands]
    else:
        raise ValueError(f"unknown MBR metric {metric!r}")
    for c, s in zip(cands, scores):
        c.score = float(s)
    best = min(range(len(cands)), key=lambda i: (scores[i], i))
    return cands[best]
