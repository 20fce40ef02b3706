"""Run configuration: one JSON document with a section per component, plus ``section.key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import TaskSpec
from .denoiser import DenoiserConfig
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, ScalingPolicy, fixed_policy
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ScheduleConfig:
    kind: str = "sqrt"
    T: int = 2000
    s: float = 1e-4
    k1: float = 3.0
    k2: float = 7.5e-4
    scaling: bool = True  # False trains with the unscaled forward process

    def build(self) -> tuple[NoiseSchedule, ScalingPolicy | None]:
        schedule = NoiseSchedule(self.kind, self.T, self.s)
        return schedule, (ScalingPolicy(self.k1, self.k2) if self.scaling else None)


@dataclass
class RunOptions:
    out_dir: str = "runs"
    run_id: str = "run"
    checkpoint_every: int = 1000
    probe_every: int = 0
    probe_size: int = 200
    log_every: int = 500


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        sections = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, f in sections.items():
            section_cls = f.default_factory
            values = doc.get(name, {})
            allowed = {sf.name for sf in fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown field(s) in [{name}]: {', '.join(sorted(bad))}")
            try:
                kwargs[name] = section_cls(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        return cls.from_dict(apply_overrides(doc, overrides))

    def validate(self) -> None:
        """Cross-field checks that must pass before any work starts."""
        s = self.schedule
        try:
            s.build()
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        if self.sampler.n_steps > s.T:
            raise ConfigError(f"sampler.n_steps={self.sampler.n_steps} exceeds schedule.T={s.T}")
        if self.task.max_len > self.denoiser.max_len:
            raise ConfigError(f"task.max_len={self.task.max_len} exceeds denoiser.max_len={self.denoiser.max_len}")
        if self.task.kind != "file" and self.denoiser.vocab_size != self.task.vocab_size:
            raise ConfigError(
                f"denoiser.vocab_size={self.denoiser.vocab_size} does not match task.vocab_size={self.task.vocab_size}"
            )
        if not self.run.run_id or "/" in self.run.run_id:
            raise ConfigError(f"run.run_id {self.run.run_id!r} is not a valid directory name")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are JSON literals, falling back to plain strings."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        doc.setdefault(section, {})[name] = _parse_value(value)
    return doc


ABLATIONS = ("full", "no_rl", "fixed_lambda", "no_scaling")


def ablation_variant(config: RunConfig, variant: str) -> RunConfig:
    """Derive one ablation row from a full configuration."""
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")
    doc = config.to_dict()
    doc["run"]["run_id"] = f"{config.run.run_id}-{variant}"
    if variant != "full":
        doc["train"]["rl_weight"] = 0.0
    if variant == "fixed_lambda":
        s = config.schedule
        doc["schedule"]["k1"] = fixed_policy(ScalingPolicy(s.k1, s.k2), s.T).k1
        doc["schedule"]["k2"] = 0.0
    if variant == "no_scaling":
        doc["schedule"]["scaling"] = False
    return RunConfig.from_dict(doc)
