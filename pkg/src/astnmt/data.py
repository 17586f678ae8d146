"""Vocabulary, numericalisation and padded batches for parallel text."""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")
N_RESERVED = len(RESERVED)

Sentence = list[int]


class DataError(Exception):
    """Malformed or unusable corpus / vocabulary input."""


@dataclass
class Vocabulary:
    itos: list[str]
    freq: dict[str, int] = field(default_factory=dict)
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:N_RESERVED]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def real_ids(self) -> range:
        return range(N_RESERVED, len(self.itos))

    def save(self, path: str | Path) -> None:
        lines = [f"{tok}\t{self.freq.get(tok, 0)}" for tok in self.itos]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        itos, freq = [], {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise DataError(f"cannot read {path}: {e}") from None
        for n, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            tok, sep, count = line.partition("\t")
            if not sep or not count.strip().isdigit():
                raise DataError(f"{path}:{n}: expected 'token<TAB>count'")
            itos.append(tok)
            if tok not in RESERVED:
                freq[tok] = int(count)
        return cls(itos, freq)


def build_vocab(
    lines: Iterable[str], max_size: int | None = None, min_freq: int = 1
) -> Vocabulary:
    """Vocabulary sorted by frequency, ties broken by first occurrence.

    ``max_size`` counts kept (non-reserved) tokens only.
    """
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    n_lines = 0
    for line in lines:
        n_lines += 1
        for tok in line.split():
            counts[tok] += 1
            first.setdefault(tok, len(first))
    if n_lines == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    order = sorted(counts, key=lambda t: (-counts[t], first[t]))
    kept = [t for t in order if counts[t] >= min_freq and t not in RESERVED]
    if max_size is not None:
        kept = kept[:max_size]
    return Vocabulary(list(RESERVED) + kept, {t: counts[t] for t in kept})


def encode(tokens: Sequence[str], vocab: Vocabulary) -> Sentence:
    return [vocab.stoi.get(t, UNK) for t in tokens]


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    return [vocab.itos[i] for i in ids]


def strip_special(ids: Iterable[int]) -> Sentence:
    """Cut at the first EOS and drop BOS/PAD."""
    out = []
    for i in ids:
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(int(i))
    return out


@dataclass
class ParallelCorpus:
    pairs: list[tuple[Sentence, Sentence]]

    def __post_init__(self):
        for k, (x, y) in enumerate(self.pairs):
            if not x or not y:
                raise DataError(f"pair {k} has an empty side")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[Sentence]:
        return [x for x, _ in self.pairs]

    @property
    def targets(self) -> list[Sentence]:
        return [y for _, y in self.pairs]


def read_lines(path: str | Path) -> list[list[str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from None
    return [line.split() for line in text.splitlines()]


def load_parallel(
    src_path: str | Path,
    tgt_path: str | Path,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    max_len: int = 50,
) -> ParallelCorpus:
    """Read aligned files; pairs with an empty side or a side over ``max_len`` are dropped."""
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise DataError(
            f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}"
        )
    pairs = [
        (encode(x, src_vocab), encode(y, tgt_vocab))
        for x, y in zip(src, tgt)
        if 0 < len(x) <= max_len and 0 < len(y) <= max_len
    ]
    if not pairs:
        raise DataError(f"no usable sentence pairs in {src_path} / {tgt_path}")
    return ParallelCorpus(pairs)


@dataclass
class Batch:
    src: np.ndarray  # (B, S) ids
    src_mask: np.ndarray  # (B, S) 1.0 on real tokens
    tgt_in: np.ndarray  # (B, T) BOS + y
    tgt_out: np.ndarray  # (B, T) y + EOS
    tgt_mask: np.ndarray
    src_len: np.ndarray
    tgt_len: np.ndarray  # counts the EOS step

    def __len__(self) -> int:
        return self.src.shape[0]


def pad_ids(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def collate(pairs: Sequence[tuple[Sentence, Sentence]]) -> Batch:
    src, src_mask = pad_ids([x for x, _ in pairs])
    tgt_in, tgt_mask = pad_ids([[BOS] + list(y) for _, y in pairs])
    tgt_out, _ = pad_ids([list(y) + [EOS] for _, y in pairs])
    return Batch(
        src=src,
        src_mask=src_mask,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        tgt_mask=tgt_mask,
        src_len=src_mask.sum(axis=1).astype(np.int64),
        tgt_len=tgt_mask.sum(axis=1).astype(np.int64),
    )


def make_batches(
    corpus: ParallelCorpus, batch_size: int, seed: int, epoch: int = 0
) -> list[Batch]:
    """Shuffle with ``(seed, epoch)`` and cut into padded batches; every pair appears once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = stream(seed, "shuffle", epoch).permutation(len(corpus))
    return [
        collate([corpus.pairs[i] for i in order[k : k + batch_size]])
        for k in range(0, len(order), batch_size)
    ]
