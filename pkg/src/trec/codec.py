"""Token <-> latent mapping through a single tied embedding table."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    pad_id: int = PAD_ID
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID
    unk_id: int = UNK_ID
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        specials = (self.pad_id, self.bos_id, self.eos_id, self.unk_id)
        if len(set(specials)) != 4 or not all(0 <= i < len(tokens) for i in specials):
            raise ValueError(f"special ids {specials} must be distinct and < {len(tokens)}")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(tokens)})

    @classmethod
    def from_symbols(cls, symbols: Sequence[str]) -> "Vocabulary":
        return cls(SPECIALS + tuple(symbols))

    @property
    def specials(self) -> tuple[int, ...]:
        return (self.pad_id, self.bos_id, self.eos_id, self.unk_id)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {', '.join(SPECIALS)}")
        return cls(tuple(tokens))


def embed(
    ids: torch.Tensor,
    table: torch.Tensor,
    anchor_var: float | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Look up ``table[ids]``; with ``anchor_var`` add N(0, anchor_var) noise around each row."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for a table of {table.shape[0]} rows")
    z0 = table[ids]
    if anchor_var:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
        z0 = z0 + anchor_var**0.5 * noise
    return z0


def logits(z: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Tied-weight scores ``z @ table.T``; softmax over the last axis gives p(y | z)."""
    if z.shape[-1] != table.shape[-1]:
        raise ValueError(f"latent width {z.shape[-1]} does not match embedding dim {table.shape[-1]}")
    return z @ table.transpose(-1, -2)


def round_to_tokens(z: torch.Tensor, table: torch.Tensor, eos_id: int | None = EOS_ID) -> list[int]:
    """Argmax decode of a single ``(L, d)`` latent, cut at the first eos.

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest id.
    """
    ids = logits(z, table).argmax(dim=-1).tolist()
    if eos_id is not None and eos_id in ids:
        ids = ids[: ids.index(eos_id)]
    return ids


def round_batch(z: torch.Tensor, table: torch.Tensor, lengths: Sequence[int], eos_id: int | None = EOS_ID) -> list[list[int]]:
    """Decode a padded ``(B, L, d)`` batch, keeping the first ``lengths[b]`` positions of each row."""
    ids = logits(z, table).argmax(dim=-1).tolist()
    out = []
    for row, n in zip(ids, lengths):
        row = row[:n]
        if eos_id is not None and eos_id in row:
            row = row[: row.index(eos_id)]
        out.append(row)
    return out
