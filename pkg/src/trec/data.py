"""Synthetic seq2seq tasks, TSV corpus I/O and padded batching."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch

from .codec import PAD_ID, SPECIALS, Vocabulary

log = logging.getLogger(__name__)

TASK_KINDS = ("copy", "reverse", "template_paraphrase", "file")


@dataclass(frozen=True)
class ParallelPair:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        if not self.source or not self.target:
            raise ValueError("source and target must both be nonempty")


@dataclass
class TaskSpec:
    kind: str = "reverse"
    vocab_size: int = 16
    min_len: int = 2
    max_len: int = 12
    n_train: int = 5000
    n_valid: int = 500
    seed: int = 0
    # only for kind == "file"
    train_path: str | None = None
    valid_path: str | None = None
    vocab_path: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.kind != "file" and self.vocab_size < len(SPECIALS) + 2:
            raise ValueError(f"vocab_size must be at least {len(SPECIALS) + 2}, got {self.vocab_size}")
        if self.kind == "file" and not (self.train_path and self.vocab_path):
            raise ValueError("file tasks need train_path and vocab_path")

    def to_dict(self) -> dict:
        return asdict(self)


def task_vocabulary(vocab_size: int) -> Vocabulary:
    return Vocabulary.from_symbols([f"w{i}" for i in range(vocab_size - len(SPECIALS))])


class ParaphraseRules:
    """Fixed rewrite table for the template-paraphrase task.

    Content tokens are grouped in pairs and either member of a pair rewrites
    to the same output member (many-to-one). Which member is used is a single
    fair coin per sentence, so every source has two valid targets that differ
    jointly at all positions (one-to-many). The last content token is a filler
    that is deleted, and the first surviving token is moved to the end.
    """

    def __init__(self, vocab: Vocabulary):
        content = [i for i in range(len(vocab)) if i not in vocab.specials]
        self.filler = content[-1]
        words = content[:-1]
        self.options = {tok: tuple(words[2 * (k // 2) : 2 * (k // 2) + 2]) for k, tok in enumerate(words)}

    def rewrite(self, source: Sequence[int], register: int) -> list[int]:
        out = [self.options[tok][register % len(self.options[tok])] for tok in source if tok != self.filler]
        return out[1:] + out[:1]

    def __call__(self, source: Sequence[int], rng: np.random.Generator) -> list[int]:
        return self.rewrite(source, int(rng.integers(2)))


def _target(kind: str, source: list[int], rules: ParaphraseRules | None, rng) -> list[int]:
    if kind == "copy":
        return list(source)
    if kind == "reverse":
        return source[::-1]
    return rules(source, rng)


def generate_task(spec: TaskSpec) -> tuple[list[ParallelPair], list[ParallelPair], Vocabulary]:
    """Deterministic (train, valid, vocab) for a synthetic task; sources are unique across splits."""
    if spec.kind == "file":
        vocab = Vocabulary.load(spec.vocab_path)
        train, _ = load_corpus(spec.train_path, vocab, spec.max_len)
        valid = load_corpus(spec.valid_path, vocab, spec.max_len)[0] if spec.valid_path else []
        return train, valid, vocab

    vocab = task_vocabulary(spec.vocab_size)
    content = np.array([i for i in range(len(vocab)) if i not in vocab.specials])
    rules = ParaphraseRules(vocab) if spec.kind == "template_paraphrase" else None
    n_total = spec.n_train + spec.n_valid
    space = sum(len(content) ** n for n in range(spec.min_len, spec.max_len + 1))
    if n_total > space // 2:
        raise ValueError(f"cannot draw {n_total} distinct sources from a space of {space}")

    rng = np.random.default_rng(spec.seed)
    seen: set[tuple[int, ...]] = set()
    pairs: list[ParallelPair] = []
    while len(pairs) < n_total:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        source = tuple(int(i) for i in rng.choice(content, size=n))
        if source in seen:
            continue
        target = _target(spec.kind, list(source), rules, rng)
        if not target:
            continue
        seen.add(source)
        pairs.append(ParallelPair(source, target))
    return pairs[: spec.n_train], pairs[spec.n_train :], vocab


@dataclass
class LoadStats:
    n_lines: int = 0
    n_unk: int = 0
    n_dropped: int = 0


def load_corpus(path, vocab: Vocabulary, max_len: int | None = None) -> tuple[list[ParallelPair], LoadStats]:
    """Read ``source<TAB>target`` lines of space-separated tokens."""
    stats = LoadStats()
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.count("\t") != 1:
                raise ValueError(f"{path}:{lineno}: expected exactly one TAB between source and target")
            src_words, tgt_words = (side.split() for side in line.split("\t"))
            if not src_words or not tgt_words:
                raise ValueError(f"{path}:{lineno}: empty source or target")
            stats.n_lines += 1
            ids = [vocab.encode(src_words), vocab.encode(tgt_words)]
            stats.n_unk += sum(
                1 for w, i in zip(src_words + tgt_words, ids[0] + ids[1]) if i == vocab.unk_id and w != SPECIALS[3]
            )
            if max_len is not None and max(len(ids[0]), len(ids[1])) > max_len:
                stats.n_dropped += 1
                continue
            pairs.append(ParallelPair(*ids))
    if stats.n_unk or stats.n_dropped:
        log.info("%s: %d unknown tokens mapped to unk, %d overlong pairs dropped", path, stats.n_unk, stats.n_dropped)
    return pairs, stats


def save_corpus(pairs: Sequence[ParallelPair], vocab: Vocabulary, path) -> None:
    lines = (" ".join(vocab.decode(p.source)) + "\t" + " ".join(vocab.decode(p.target)) + "\n" for p in pairs)
    Path(path).write_text("".join(lines), encoding="utf-8")


class Batch(NamedTuple):
    src: torch.Tensor  # (B, S) long
    src_mask: torch.Tensor  # (B, S) bool, True at padding
    tgt: torch.Tensor  # (B, L) long
    tgt_mask: torch.Tensor  # (B, L) bool, True at padding
    src_lens: torch.Tensor
    tgt_lens: torch.Tensor

    def __len__(self):
        return self.src.shape[0]


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    lens = torch.tensor([len(s) for s in seqs])
    return ids, torch.arange(width)[None, :] >= lens[:, None]


def collate(pairs: Sequence[ParallelPair], pad_id: int = PAD_ID) -> Batch:
    src, src_mask = pad_sequences([p.source for p in pairs], pad_id)
    tgt, tgt_mask = pad_sequences([p.target for p in pairs], pad_id)
    return Batch(src, src_mask, tgt, tgt_mask, (~src_mask).sum(1), (~tgt_mask).sum(1))


def make_batches(pairs: Sequence[ParallelPair], batch_size: int, rng, pad_id: int = PAD_ID) -> Iterator[Batch]:
    """One shuffled epoch of padded batches; ``rng`` is a numpy Generator or a seed."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(rng).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        yield collate([pairs[i] for i in order[start : start + batch_size]], pad_id)


class BatchStream:
    """Endless epoch-shuffled batches whose position is fully described by ``(epoch, index)``."""

    def __init__(self, pairs: Sequence[ParallelPair], batch_size: int, seed: int, epoch: int = 0, index: int = 0):
        if not pairs:
            raise ValueError("no training pairs")
        self.pairs = pairs
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.index = index
        self._order = self._permutation()

    def _permutation(self) -> np.ndarray:
        return np.random.default_rng([self.seed, self.epoch]).permutation(len(self.pairs))

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        if self.index >= len(self.pairs):
            self.epoch += 1
            self.index = 0
            self._order = self._permutation()
        idx = self._order[self.index : self.index + self.batch_size]
        self.index += self.batch_size
        return collate([self.pairs[i] for i in idx])

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "index": self.index}

    def load_state_dict(self, state: dict) -> None:
        self.epoch, self.index = int(state["epoch"]), int(state["index"])
        self._order = self._permutation()
