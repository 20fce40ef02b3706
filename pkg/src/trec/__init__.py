"""Continuous text diffusion with reinforced self-conditioning and time-aware variance scaling."""

__version__ = "0.1.0"

from .bleu import bleu, corpus_bleu
from .codec import Vocabulary, embed, logits, round_to_tokens
from .data import ParallelPair, TaskSpec, generate_task, load_corpus, make_batches
from .denoiser import Denoiser, DenoiserConfig
from .sampler import Candidate, SamplerConfig, ddim_step, estimate_noise, generate, mbr_select
from .schedule import NoiseSchedule, ScalingPolicy, check_alignment, forward_sample, lambda_at, make_schedule
from .trainer import TrainConfig, Trainer, TrainStepReport, train_step

__all__ = [
    "Candidate", "Denoiser", "DenoiserConfig", "NoiseSchedule", "ParallelPair", "SamplerConfig",
    "ScalingPolicy", "TaskSpec", "TrainConfig", "TrainStepReport", "Trainer", "Vocabulary",
    "bleu", "check_alignment", "corpus_bleu", "ddim_step", "embed", "estimate_noise", "forward_sample",
    "generate", "generate_task", "lambda_at", "load_corpus", "logits", "make_batches", "make_schedule",
    "mbr_select", "round_to_tokens", "train_step",
]
