"""Measurement tools: BLEU, the self-conditioning gain probe, the six-input probe and log aggregation."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .bleu import bleu
from .codec import embed, round_batch
from .data import ParallelPair, collate
from .sampler import SamplerConfig, run_reverse
from .schedule import NoiseSchedule, ScalingPolicy, forward_sample

SC_SLOTS = ("zero", "z0", "zT")
ZT_SLOTS = ("z0", "zT")


def _example_noise(base: int, t: int, pair: ParallelPair, shape, dtype) -> torch.Tensor:
    """Noise keyed on the example itself, so probe results do not depend on dataset order."""
    ss = np.random.SeedSequence([base, t, len(pair.source), *pair.source, len(pair.target), *pair.target])
    return torch.from_numpy(np.random.default_rng(ss).standard_normal(shape)).to(dtype)


def _batch_noise(base, t, pairs, L, d, dtype):
    out = torch.zeros((len(pairs), L, d), dtype=dtype)
    for i, p in enumerate(pairs):
        out[i, : len(p.target)] = _example_noise(base, t, p, (len(p.target), d), dtype)
    return out


def _targets(pairs):
    return [list(p.target) for p in pairs]


def _mean(xs) -> float:
    return math.fsum(xs) / len(xs)


@torch.no_grad()
def delta_bleu_probe(
    model,
    valid_set: Sequence[ParallelPair],
    schedule: NoiseSchedule,
    t_grid: Sequence[int],
    generator: torch.Generator,
    policy: ScalingPolicy | None = None,
    details: bool = False,
):
    """Mean BLEU(self-conditioned decode) - BLEU(first-pass decode) over examples x t_grid."""
    if not valid_set:
        raise ValueError("valid_set is empty")
    was_training = model.training
    model.eval()
    base = int(torch.randint(0, 2**31 - 1, (), generator=generator))
    batch = collate(valid_set)
    table = model.table
    d = table.shape[1]
    memory = model.encode(batch.src, batch.src_mask)
    z0 = embed(batch.tgt, table)
    refs = _targets(valid_set)
    lengths = [len(r) for r in refs]
    gains, sc_scores, base_scores, per_t = [], [], [], {}
    for t in t_grid:
        noise = _batch_noise(base, t, valid_set, z0.shape[1], d, z0.dtype)
        mode = "train" if policy is not None else "unscaled"
        z_t = forward_sample(z0, int(t), noise, schedule, policy, mode)
        hat = model.denoise(z_t, None, memory, int(t), batch.tgt_mask)
        sc = model.denoise(z_t, hat, memory, int(t), batch.tgt_mask)
        b_hat = [bleu(c, r) for c, r in zip(round_batch(hat, table, lengths), refs)]
        b_sc = [bleu(c, r) for c, r in zip(round_batch(sc, table, lengths), refs)]
        gains += [a - b for a, b in zip(b_sc, b_hat)]
        sc_scores += b_sc
        base_scores += b_hat
        per_t[int(t)] = _mean(b_sc) - _mean(b_hat)
    model.train(was_training)
    value = _mean(gains)
    if not details:
        return value
    return {"delta_bleu": value, "bleu_sc": _mean(sc_scores), "bleu_base": _mean(base_scores), "per_t": per_t}


@dataclass
class ProbeReport:
    step: int
    delta_bleu: float | None
    combo_bleu: dict[str, float]
    combo_curves: dict[str, dict[int, float]] = field(default_factory=dict)
    measured_step_deviation: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.combo_bleu) != len(SC_SLOTS) * len(ZT_SLOTS):
            raise ValueError("combo_bleu must hold exactly six entries")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def csv_rows(self) -> list[tuple]:
        """(step, series, value) rows: one series per input combination, indexed by t."""
        return [(t, key, v) for key, curve in self.combo_curves.items() for t, v in sorted(curve.items())]


def combo_key(sc_slot: str, zt_slot: str) -> str:
    return f"sc={sc_slot},zt={zt_slot}"


@torch.no_grad()
def combo_probe(
    model,
    valid_set: Sequence[ParallelPair],
    schedule: NoiseSchedule,
    generator: torch.Generator,
    t_grid: Sequence[int] | None = None,
    step: int = 0,
    delta_bleu: float | None = None,
    sampler_config: SamplerConfig | None = None,
    policy: ScalingPolicy | None = None,
) -> ProbeReport:
    """Decode BLEU for every (self-condition slot, noised-latent slot) input combination.

    Slots: ``zero`` is the all-zero latent, ``z0`` the clean target embedding,
    ``zT`` a standard Gaussian draw shared by both slots.
    """
    if t_grid is None:
        T = schedule.T
        t_grid = [T // 4, T // 2, 3 * T // 4, T]
    was_training = model.training
    model.eval()
    batch = collate(valid_set)
    table = model.table
    memory = model.encode(batch.src, batch.src_mask)
    z0 = embed(batch.tgt, table)
    zT = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    slots = {"zero": torch.zeros_like(z0), "z0": z0, "zT": zT}
    refs = _targets(valid_set)
    lengths = [len(r) for r in refs]
    curves: dict[str, dict[int, float]] = {}
    for sc_slot in SC_SLOTS:
        for zt_slot in ZT_SLOTS:
            curve = {}
            for t in t_grid:
                pred = model.denoise(slots[zt_slot], slots[sc_slot], memory, int(t), batch.tgt_mask)
                curve[int(t)] = _mean([bleu(c, r) for c, r in zip(round_batch(pred, table, lengths), refs)])
            curves[combo_key(sc_slot, zt_slot)] = curve
    model.train(was_training)
    deviation = {}
    if sampler_config is not None:
        deviation = step_deviation(model, valid_set, schedule, sampler_config, generator)
    return ProbeReport(
        step=step,
        delta_bleu=delta_bleu,
        combo_bleu={k: _mean(list(c.values())) for k, c in curves.items()},
        combo_curves=curves,
        measured_step_deviation=deviation,
    )


@torch.no_grad()
def step_deviation(
    model,
    valid_set: Sequence[ParallelPair],
    schedule: NoiseSchedule,
    sampler_config: SamplerConfig,
    generator: torch.Generator,
    n_seeds: int = 1,
) -> dict[int, float]:
    """RMS of ``z_t - sqrt(1 - beta_bar_t) * Emb(y)`` along sampling trajectories, per grid time.

    Trajectories use the reference length so the deviation from the clean
    target is defined at every position.
    """
    sq = defaultdict(float)
    count = defaultdict(int)
    was_training = model.training
    model.eval()
    for pair in valid_set:
        memory = model.encode(torch.as_tensor([pair.source]))
        lengths = [len(pair.target)] * n_seeds
        _, traj = run_reverse(model, memory, lengths, schedule, sampler_config, generator, keep_trajectory=True)
        z0 = embed(torch.as_tensor(pair.target), model.table)
        for t, z in zip(traj.times, traj.latents):
            dev = z - (1.0 - float(schedule.beta_bar[t])) ** 0.5 * z0
            sq[t] += float(dev.pow(2).sum())
            count[t] += dev.numel()
    model.train(was_training)
    return {t: math.sqrt(sq[t] / count[t]) for t in sorted(sq, reverse=True)}


@dataclass
class DynamicsSummary:
    rows: list[dict]
    n_records: int
    n_malformed: int

    def series(self, run_id: str, name: str) -> list[dict]:
        return [r for r in self.rows if r["run_id"] == run_id and r["series"] == name]

    def runs(self) -> list[str]:
        return sorted({r["run_id"] for r in self.rows})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["run_id", "series", "step", "value", "std", "count"])
            w.writeheader()
            w.writerows(self.rows)


TRAIN_SERIES = ("loss_total", "loss_diffusion", "loss_ce", "loss_rl", "loss_length", "advantage", "reward_sc", "reward_base")
PROBE_SERIES = ("delta_bleu", "bleu_sc", "bleu_base")


def _read_lines(metrics_log) -> Iterable[str]:
    if isinstance(metrics_log, (list, tuple)):
        yield from metrics_log
    else:
        with open(metrics_log, encoding="utf-8") as fh:
            yield from fh


def dynamics_summary(metrics_log, window: int = 100) -> DynamicsSummary:
    """Windowed mean/std of every logged series, grouped by run id.

    ``metrics_log`` is a path or a list of JSON lines. A row's ``step`` is the
    last step of its window.
    """
    buckets: dict[tuple, list[float]] = defaultdict(list)
    n_records = n_bad = 0
    for line in _read_lines(metrics_log):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            step = int(rec["step"])
        except (ValueError, KeyError, TypeError):
            n_bad += 1
            continue
        if not isinstance(rec, dict):
            n_bad += 1
            continue
        n_records += 1
        run = str(rec.get("run_id", "run"))
        names = PROBE_SERIES if rec.get("kind") == "probe" else TRAIN_SERIES
        w_end = ((step - 1) // window + 1) * window
        for name in names:
            v = rec.get(name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v):
                buckets[(run, name, w_end)].append(float(v))
    rows = []
    for (run, name, w_end), vals in sorted(buckets.items()):
        rows.append(
            {"run_id": run, "series": name, "step": w_end, "value": float(np.mean(vals)),
             "std": float(np.std(vals)), "count": len(vals)}
        )
    return DynamicsSummary(rows, n_records, n_bad)


def compare_variance(summary: DynamicsSummary, run_a: str, run_b: str, series: str) -> list[tuple[int, float, float]]:
    """(window step, std in run_a, std in run_b) for windows present in both runs."""
    a = {r["step"]: r["std"] for r in summary.series(run_a, series)}
    b = {r["step"]: r["std"] for r in summary.series(run_b, series)}
    return [(s, a[s], b[s]) for s in sorted(a.keys() & b.keys())]


def phase_stats(values: Sequence[float], early_frac: float = 0.5, late_frac: float = 0.25) -> dict:
    """Peak of the early part of a curve and mean of its late tail."""
    n = len(values)
    if n < 2:
        raise ValueError("need at least two points")
    early = values[: max(1, int(round(n * early_frac)))]
    late = values[n - max(1, int(round(n * late_frac))) :]
    return {"early_peak": float(max(early)), "late_mean": float(np.mean(late))}
