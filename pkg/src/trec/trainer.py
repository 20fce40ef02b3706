"""Training objective: diffusion MSE + tied-logit cross-entropy + reinforced conditioning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .bleu import bleu
from .codec import PAD_ID, embed, logits, round_batch
from .data import Batch, BatchStream, ParallelPair
from .denoiser import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, ScalingPolicy, forward_sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 500
    sc_rate: float = 0.5
    clip_eps: float = 0.2
    rl_weight: float = 1.0
    batch_size: int = 64
    max_steps: int = 20000
    seed: int = 0
    length_weight: float = 1.0
    max_grad_norm: float | None = 1.0
    anchor_noise: bool = False

    def __post_init__(self):
        if not 0.0 <= self.sc_rate <= 1.0:
            raise ValueError(f"sc_rate must be in [0, 1], got {self.sc_rate}")
        if self.clip_eps <= 0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.rl_weight < 0:
            raise ValueError(f"rl_weight must be non-negative, got {self.rl_weight}")
        if self.batch_size < 1 or self.max_steps < 0 or self.warmup_steps < 0:
            raise ValueError("batch_size must be >= 1 and step counts non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainStepReport:
    step: int
    t_sampled: list[int]
    used_sc: bool
    loss_diffusion: float
    loss_ce: float
    loss_length: float
    loss_rl: float | None
    loss_total: float
    advantage: float | None  # batch mean
    advantage_absmax: float | None  # largest per-example magnitude
    reward_sc: float | None
    reward_base: float | None
    grad_norm: float
    lr: float

    def to_record(self, run_id: str | None = None) -> dict:
        rec = {"kind": "train", **asdict(self)}
        if run_id is not None:
            rec["run_id"] = run_id
        return rec


def _mask(y: torch.Tensor, mask: torch.Tensor | None, pad_id: int = PAD_ID) -> torch.Tensor:
    return (y == pad_id) if mask is None else mask


def diffusion_loss(pred: torch.Tensor, z0: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Squared error averaged over (non-pad) positions and latent dims."""
    if pred.shape != z0.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(z0.shape)}")
    err = (pred - z0).pow(2)
    if mask is None:
        return err.mean()
    keep = (~mask).to(err.dtype)[..., None]
    return (err * keep).sum() / (keep.sum() * err.shape[-1])


def token_logprob(pred: torch.Tensor, y: torch.Tensor, table: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sequence mean of ``log p(y_i | pred_i)`` over non-pad positions; shape ``(B,)``."""
    y = torch.as_tensor(y, dtype=torch.long)
    if y.dim() == 1:
        y, pred = y[None], pred if pred.dim() == 3 else pred[None]
        mask = None if mask is None else mask[None]
    if pred.dim() == 2:
        pred = pred[None]
    if pred.shape[1] < y.shape[1]:
        raise ValueError(f"prediction length {pred.shape[1]} shorter than target {y.shape[1]}")
    if y.numel() and (y.min() < 0 or y.max() >= table.shape[0]):
        raise IndexError("target id out of range")
    pred = pred[:, : y.shape[1]]
    mask = _mask(y, mask)
    lp = logits(pred, table).log_softmax(-1).gather(-1, y[..., None]).squeeze(-1)
    keep = (~mask).to(lp.dtype)
    return (lp * keep).sum(1) / keep.sum(1).clamp_min(1.0)


def reconstruction_loss(pred, y, table, mask=None) -> torch.Tensor:
    """Token-level negative log-likelihood of ``y`` under the tied logits, pads excluded."""
    y = torch.as_tensor(y, dtype=torch.long)
    if y.dim() == 1:
        y = y[None]
        pred = pred[None] if pred.dim() == 2 else pred
        mask = None if mask is None else mask[None]
    pred = pred[:, : y.shape[1]]
    if y.numel() and (y.min() < 0 or y.max() >= table.shape[0]):
        raise IndexError("target id out of range")
    mask = _mask(y, mask)
    nll = F.cross_entropy(logits(pred, table).transpose(1, 2), y, reduction="none")
    keep = (~mask).to(nll.dtype)
    return (nll * keep).sum() / keep.sum()


def reward(pred: torch.Tensor, y: Sequence[int], table: torch.Tensor) -> float:
    """Sentence BLEU of the argmax decode of ``pred`` against ``y``."""
    y = [int(i) for i in y]
    return rewards(pred[None] if pred.dim() == 2 else pred, [y], table)[0]


def rewards(pred: torch.Tensor, targets: Sequence[Sequence[int]], table: torch.Tensor) -> list[float]:
    lengths = [len(y) for y in targets]
    decoded = round_batch(pred.detach(), table.detach(), lengths)
    return [bleu(d, list(y)) for d, y in zip(decoded, targets)]


def clip_advantage(gain: float | torch.Tensor, eps: float):
    if isinstance(gain, torch.Tensor):
        return gain.clamp(-eps, eps)
    return min(max(gain, -eps), eps)


def advantage(z0_sc, z0_hat, y, table, eps: float) -> float:
    """Clipped BLEU gain of the self-conditioned prediction over the first-pass one."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return clip_advantage(reward(z0_sc, y, table) - reward(z0_hat, y, table), eps)


def rl_loss(z0_sc, advantage_value, y, table, mask=None) -> torch.Tensor:
    """REINFORCE surrogate ``-mean_i A_i * log p(y_i | z0_sc_i)``; ``A`` carries no gradient."""
    lp = token_logprob(z0_sc, y, table, mask)
    adv = torch.as_tensor(advantage_value, dtype=lp.dtype).detach()
    return -(adv * lp).mean()


def lr_factor(step: int, warmup: int) -> float:
    """Linear warmup to 1 at ``warmup``, then inverse-sqrt decay."""
    step = max(step, 1)
    if warmup <= 0:
        return 1.0
    return min(step / warmup, math.sqrt(warmup / step))


def draw_sc(generator: torch.Generator, rate: float) -> bool:
    return bool(torch.rand((), generator=generator, dtype=torch.float64) < rate)


def sample_times(batch_size: int, T: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(1, T + 1, (batch_size,), generator=generator)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    diffusion: torch.Tensor
    ce: torch.Tensor
    length: torch.Tensor
    rl: torch.Tensor | None = None
    advantages: torch.Tensor | None = None
    reward_sc: list[float] | None = None
    reward_base: list[float] | None = None
    extras: dict = field(default_factory=dict)


def compute_losses(
    model: Denoiser,
    batch: Batch,
    t: torch.Tensor,
    noise: torch.Tensor,
    use_sc: bool,
    schedule: NoiseSchedule,
    policy: ScalingPolicy | None,
    config: TrainConfig,
    first_pass: torch.Tensor | None = None,
    frozen_advantage: torch.Tensor | None = None,
    anchor_noise: torch.Tensor | None = None,
) -> LossBreakdown:
    """All loss terms for one batch given explicit randomness.

    ``first_pass`` substitutes a precomputed initial prediction and
    ``frozen_advantage`` a fixed per-example advantage; both exist so the
    objective can be checked as a deterministic function of the parameters.
    """
    table = model.table
    memory = model.encode(batch.src, batch.src_mask)
    z0 = embed(batch.tgt, table)
    if anchor_noise is not None:
        z0 = z0 + math.sqrt(schedule.beta_bar[0]) * anchor_noise
    z_t = forward_sample(z0, t, noise, schedule, policy, "train")
    mask = batch.tgt_mask

    if use_sc:
        if first_pass is None:
            with torch.no_grad():
                first_pass = model.denoise(z_t, None, memory, t, mask)
        z0_hat = first_pass.detach()
        pred = model.denoise(z_t, z0_hat, memory, t, mask)
    else:
        z0_hat = None
        pred = model.denoise(z_t, None, memory, t, mask)

    l_diff = diffusion_loss(pred, z0, mask)
    l_ce = reconstruction_loss(pred, batch.tgt, table, mask)
    offsets = model.offset_targets(batch.src_lens, batch.tgt_lens)
    l_len = F.cross_entropy(model.length_logits(memory), offsets)
    total = l_diff + l_ce + config.length_weight * l_len
    out = LossBreakdown(total, l_diff, l_ce, l_len)

    if use_sc:
        targets = [row[:n].tolist() for row, n in zip(batch.tgt, batch.tgt_lens.tolist())]
        if frozen_advantage is None:
            r_sc = rewards(pred, targets, table)
            r_base = rewards(z0_hat, targets, table)
            # kept in double so the clip bound holds exactly in the reported values
            gain = torch.tensor(r_sc, dtype=torch.float64) - torch.tensor(r_base, dtype=torch.float64)
            adv = clip_advantage(gain, config.clip_eps)
            out.reward_sc, out.reward_base = r_sc, r_base
        else:
            adv = torch.as_tensor(frozen_advantage, dtype=torch.float64)
        out.advantages = adv
        out.rl = rl_loss(pred, adv.to(pred.dtype), batch.tgt, table, mask)
        if config.rl_weight:
            out.total = total + config.rl_weight * out.rl
    return out


def _dump_nan(batch: Batch, t: torch.Tensor, step: int, dump_dir) -> str:
    path = Path(dump_dir or ".") / f"nan_batch_step{step}.pt"
    torch.save({"step": step, "t": t, "batch": batch._asdict()}, path)
    return str(path)


def train_step(
    batch: Batch,
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    schedule: NoiseSchedule,
    policy: ScalingPolicy | None,
    config: TrainConfig,
    generator: torch.Generator,
    step: int,
    lr_scheduler=None,
    dump_dir=None,
) -> TrainStepReport:
    """One optimizer update. Randomness is drawn from ``generator`` in a fixed order: t, noise, anchor, SC coin."""
    model.train()
    dtype = model.table.dtype
    t = sample_times(len(batch), schedule.T, generator)
    shape = (*batch.tgt.shape, model.config.d)
    noise = torch.randn(shape, generator=generator, dtype=dtype)
    anchor = torch.randn(shape, generator=generator, dtype=dtype) if config.anchor_noise else None
    use_sc = draw_sc(generator, config.sc_rate)

    losses = compute_losses(model, batch, t, noise, use_sc, schedule, policy, config, anchor_noise=anchor)
    if not torch.isfinite(losses.total):
        where = _dump_nan(batch, t, step, dump_dir)
        raise FloatingPointError(f"non-finite loss at step {step} (t={t.tolist()}); batch dumped to {where}")

    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    max_norm = config.max_grad_norm if config.max_grad_norm else float("inf")
    grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))
    lr = optimizer.param_groups[0]["lr"]
    optimizer.step()
    if lr_scheduler is not None:
        lr_scheduler.step()

    def mean(xs):
        return None if xs is None else float(sum(xs) / len(xs))

    return TrainStepReport(
        step=step,
        t_sampled=t.tolist(),
        used_sc=use_sc,
        loss_diffusion=losses.diffusion.item(),
        loss_ce=losses.ce.item(),
        loss_length=losses.length.item(),
        loss_rl=None if losses.rl is None else losses.rl.item(),
        loss_total=losses.total.item(),
        advantage=None if losses.advantages is None else float(losses.advantages.mean()),
        advantage_absmax=None if losses.advantages is None else float(losses.advantages.abs().max()),
        reward_sc=mean(losses.reward_sc),
        reward_base=mean(losses.reward_base),
        grad_norm=grad_norm,
        lr=lr,
    )


def build_model(config: DenoiserConfig, seed: int, dtype=torch.float32) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Denoiser(config)
    return model.to(dtype)


def build_optimizer(model: Denoiser, config: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.98), eps=1e-8)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: lr_factor(i + 1, config.warmup_steps))
    return opt, sched


class Trainer:
    """Owns the model, optimizer, RNG and data position; everything needed to resume bitwise."""

    def __init__(
        self,
        model: Denoiser,
        schedule: NoiseSchedule,
        policy: ScalingPolicy | None,
        config: TrainConfig,
        train_pairs: Sequence[ParallelPair],
        valid_pairs: Sequence[ParallelPair] = (),
        run_id: str = "run",
        probe_every: int = 0,
        probe_size: int = 200,
        probe_t_fracs: Sequence[float] = (0.25, 0.5, 0.75),
        dump_dir=None,
    ):
        self.model = model
        self.schedule = schedule
        self.policy = policy
        self.config = config
        self.run_id = run_id
        self.valid_pairs = list(valid_pairs)
        self.probe_every = probe_every
        self.probe_size = probe_size
        self.probe_t_fracs = tuple(probe_t_fracs)
        self.dump_dir = dump_dir
        self.generator = torch.Generator().manual_seed(config.seed)
        self.stream = BatchStream(train_pairs, config.batch_size, config.seed)
        self.optimizer, self.lr_scheduler = build_optimizer(model, config)
        self.step = 0

    def train_step(self) -> TrainStepReport:
        batch = next(self.stream)
        report = train_step(
            batch, self.model, self.optimizer, self.schedule, self.policy, self.config,
            self.generator, self.step + 1, self.lr_scheduler, self.dump_dir,
        )
        self.step += 1
        return report

    def probe(self) -> dict:
        from .diagnostics import delta_bleu_probe

        g = torch.Generator().manual_seed(self.config.seed * 1_000_003 + self.step)
        t_grid = [max(1, int(round(f * self.schedule.T))) for f in self.probe_t_fracs]
        result = delta_bleu_probe(
            self.model, self.valid_pairs[: self.probe_size], self.schedule, t_grid, g, self.policy, details=True
        )
        return {"kind": "probe", "run_id": self.run_id, "step": self.step, **result}

    def run(
        self,
        max_steps: int | None = None,
        on_record: Callable[[dict], None] | None = None,
        on_checkpoint: Callable[["Trainer"], None] | None = None,
        checkpoint_every: int = 0,
        log_every: int = 500,
    ) -> list[TrainStepReport]:
        max_steps = self.config.max_steps if max_steps is None else max_steps
        reports = []
        while self.step < max_steps:
            report = self.train_step()
            reports.append(report)
            if on_record:
                on_record(report.to_record(self.run_id))
            if self.probe_every and self.valid_pairs and self.step % self.probe_every == 0:
                rec = self.probe()
                if on_record:
                    on_record(rec)
            if log_every and self.step % log_every == 0:
                log.info(
                    "step %d loss %.4f (diff %.4f ce %.4f) lr %.2e",
                    self.step, report.loss_total, report.loss_diffusion, report.loss_ce, report.lr,
                )
            if on_checkpoint and checkpoint_every and self.step % checkpoint_every == 0:
                on_checkpoint(self)
        return reports

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "lr_scheduler": self.lr_scheduler.state_dict(),
            "generator": self.generator.get_state(),
            "stream": self.stream.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.lr_scheduler.load_state_dict(state["lr_scheduler"])
        self.generator.set_state(state["generator"])
        self.stream.load_state_dict(state["stream"])


class JsonlWriter:
    def __init__(self, path, mode: str = "a"):
        self.fh = open(path, mode, encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
