"""Run directories, checkpoints and end-to-end train/evaluate helpers shared by the CLI and tests.

Checkpoint layout (``torch.save`` of a plain dict, loadable with ``weights_only=True``)::

    format        "trec-checkpoint"
    version       1
    code_version  package version string (plus git revision when available)
    config        RunConfig as nested dicts (denoiser.vocab_size resolved)
    schedule      {kind, T, s, k1, k2, scaling}; beta_bar is recomputed on load
    vocab         list of token strings, specials first
    tensors       {parameter name: tensor} of the denoiser
    trainer       optional: {step, optimizer, lr_scheduler, generator, stream}
"""

from __future__ import annotations

import json
import logging
import platform
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .bleu import corpus_bleu
from .codec import Vocabulary
from .config import ConfigError, RunConfig
from .data import ParallelPair, generate_task, load_corpus, save_corpus
from .denoiser import Denoiser
from .sampler import Candidate, SamplerConfig, generate, mbr_select
from .schedule import NoiseSchedule, ScalingPolicy
from .trainer import JsonlWriter, Trainer, build_model

log = logging.getLogger(__name__)

FORMAT = "trec-checkpoint"
FORMAT_VERSION = 1


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"trec {__version__}" + (f" ({rev})" if rev else "")


@dataclass
class Loaded:
    model: Denoiser
    schedule: NoiseSchedule
    policy: ScalingPolicy | None
    vocab: Vocabulary
    config: RunConfig
    trainer_state: dict | None


def save_checkpoint(path, trainer: Trainer, config: RunConfig, vocab: Vocabulary, with_trainer: bool = True) -> None:
    state = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "code_version": code_version(),
        "config": config.to_dict(),
        "schedule": {**trainer.schedule.descriptor(), "k1": config.schedule.k1, "k2": config.schedule.k2,
                     "scaling": config.schedule.scaling},
        "vocab": list(vocab.tokens),
        "tensors": trainer.model.state_dict(),
    }
    if with_trainer:
        full = trainer.state_dict()
        full.pop("model")
        state["trainer"] = full
    tmp = Path(str(path) + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> Loaded:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("format") != FORMAT:
        raise ValueError(f"{path} is not a trec checkpoint")
    if state.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {state.get('version')}")
    config = RunConfig.from_dict(state["config"])
    schedule, policy = config.schedule.build()
    model = Denoiser(config.denoiser)
    model.load_state_dict(state["tensors"])
    model.eval()
    return Loaded(model, schedule, policy, Vocabulary(tuple(state["vocab"])), config, state.get("trainer"))


def prepare_run_dir(config: RunConfig, force: bool = False, resume: bool = False) -> Path:
    run_dir = Path(config.run.out_dir) / config.run.run_id
    if run_dir.exists() and any(run_dir.iterdir()) and not resume:
        if not force:
            raise ConfigError(f"run directory {run_dir} already exists; pass --force to overwrite")
        shutil.rmtree(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    return run_dir


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            if int(json.loads(line)["step"]) <= step:
                keep.append(line)
        except (ValueError, KeyError, TypeError):
            continue
    path.write_text("".join(l + "\n" for l in keep), encoding="utf-8")


def load_task(config: RunConfig) -> tuple[list[ParallelPair], list[ParallelPair], Vocabulary]:
    train, valid, vocab = generate_task(config.task)
    config.denoiser.vocab_size = len(vocab)
    return train, valid, vocab


def train_run(config: RunConfig, force: bool = False, resume: bool = False, max_steps: int | None = None) -> Path:
    """Train (or resume) the run described by ``config``; returns the run directory."""
    train, valid, vocab = load_task(config)
    config.validate()
    run_dir = prepare_run_dir(config, force, resume)
    latest = run_dir / "checkpoints" / "latest.pt"
    if resume and not latest.exists():
        raise ConfigError(f"nothing to resume: {latest} does not exist")

    schedule, policy = config.schedule.build()
    model = build_model(config.denoiser, config.train.seed)
    trainer = Trainer(
        model, schedule, policy, config.train, train, valid,
        run_id=config.run.run_id, probe_every=config.run.probe_every,
        probe_size=config.run.probe_size, dump_dir=run_dir,
    )
    metrics = run_dir / "metrics.jsonl"
    if resume:
        state = torch.load(latest, map_location="cpu", weights_only=True)
        trainer.model.load_state_dict(state["tensors"])
        trainer.load_state_dict({**state["trainer"], "model": state["tensors"]})
        _truncate_log(metrics, trainer.step)
        log.info("resumed %s at step %d", run_dir, trainer.step)
    else:
        config.save(run_dir / "config.json")
        vocab.save(run_dir / "vocab.txt")
        save_corpus(train, vocab, run_dir / "train.tsv")
        save_corpus(valid, vocab, run_dir / "valid.tsv")
        meta = {"code_version": code_version(), "python": platform.python_version(),
                "torch": torch.__version__, "seed": config.train.seed}
        (run_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    def checkpoint(tr: Trainer) -> None:
        save_checkpoint(run_dir / "checkpoints" / f"step_{tr.step}.pt", tr, config, vocab)
        shutil.copyfile(run_dir / "checkpoints" / f"step_{tr.step}.pt", latest)

    writer = JsonlWriter(metrics)
    try:
        trainer.run(max_steps, on_record=writer, on_checkpoint=checkpoint,
                    checkpoint_every=config.run.checkpoint_every, log_every=config.run.log_every)
    finally:
        writer.close()
    checkpoint(trainer)
    return run_dir


def sample_source(
    source: Sequence[int],
    model,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    seed: int,
    scorer=None,
) -> tuple[list[Candidate], Candidate]:
    g = torch.Generator().manual_seed(seed)
    cands = generate(source, model, schedule, sampler, g)
    return cands, mbr_select(cands, sampler.mbr_metric, scorer, source)


@dataclass
class EvalResult:
    bleu: float
    hypotheses: list[list[int]]
    references: list[list[int]]
    candidates: list[list[Candidate]]


def evaluate(
    model,
    pairs: Sequence[ParallelPair],
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    scorer=None,
) -> EvalResult:
    """Corpus BLEU of MBR-selected outputs; source ``i`` is sampled with seed ``sampler.seed + i``."""
    if not pairs:
        raise ValueError("empty corpus")
    hyps, refs, all_cands = [], [], []
    for i, pair in enumerate(pairs):
        cands, best = sample_source(pair.source, model, schedule, sampler, sampler.seed + i, scorer)
        hyps.append(best.tokens)
        refs.append(list(pair.target))
        all_cands.append(cands)
    return EvalResult(corpus_bleu(hyps, refs), hyps, refs, all_cands)


def read_sources(path, vocab: Vocabulary) -> list[list[int]]:
    """Sources from a corpus file or a plain one-source-per-line file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.strip():
                out.append(vocab.encode(line.split("\t")[0].split()))
    return out


def read_corpus(path, vocab: Vocabulary, max_len: int | None = None) -> list[ParallelPair]:
    return load_corpus(path, vocab, max_len)[0]
