"""Synthetic translation task for desk-scale experiments.

Source sentences are walks of a sparse Markov chain over "concepts"; each
concept is written with one of 2-3 interchangeable source words (a synonym
cluster) and translates to a single target word. The chain gives the source
language enough redundancy that a corrupted word can often be inferred from
its neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ParallelCorpus, Vocabulary, build_vocab, encode
from .rng import stream


@dataclass
class ToyTask:
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    train: ParallelCorpus
    dev: ParallelCorpus
    train_text: list[tuple[list[str], list[str]]]
    dev_text: list[tuple[list[str], list[str]]]
    clusters: list[list[str]]


def _lexicon(n_concepts: int) -> list[list[str]]:
    return [[f"s{c}{'abc'[k]}" for k in range(2 + c % 2)] for c in range(n_concepts)]


def _chain(
    n_concepts: int, fanout: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    succ = np.stack(
        [rng.choice(n_concepts, size=fanout, replace=False) for _ in range(n_concepts)]
    )
    probs = np.array([0.6, 0.3, 0.1][:fanout])
    return succ, probs / probs.sum()


def _sample(n: int, clusters, succ, probs, min_len, max_len, rng):
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        c = int(rng.integers(len(clusters)))
        concepts = [c]
        for _ in range(length - 1):
            c = int(succ[c][rng.choice(len(probs), p=probs)])
            concepts.append(c)
        src = [clusters[c][int(rng.integers(len(clusters[c])))] for c in concepts]
        tgt = [f"t{c}" for c in concepts]
        out.append((src, tgt))
    return out


def make_toy_task(
    n_train: int = 2000,
    n_dev: int = 200,
    seed: int = 0,
    n_concepts: int = 16,
    min_len: int = 5,
    max_len: int = 10,
) -> ToyTask:
    """Build the task; the lexicon and chain depend only on ``n_concepts``, the samples on ``seed``."""
    clusters = _lexicon(n_concepts)
    succ, probs = _chain(n_concepts, 3, stream(0, "toy-chain", n_concepts))
    rng = stream(seed, "toy-data")
    train_text = _sample(n_train, clusters, succ, probs, min_len, max_len, rng)
    dev_text = _sample(n_dev, clusters, succ, probs, min_len, max_len, rng)
    # every word is in the vocabulary even if a rare synonym never got sampled
    src_vocab = build_vocab(
        [" ".join(x) for x, _ in train_text]
        + [" ".join(w for c in clusters for w in c)]
    )
    tgt_vocab = build_vocab(
        [" ".join(y) for _, y in train_text]
        + [" ".join(f"t{c}" for c in range(n_concepts))]
    )

    def numericalise(text):
        return ParallelCorpus(
            [(encode(x, src_vocab), encode(y, tgt_vocab)) for x, y in text]
        )

    return ToyTask(
        src_vocab,
        tgt_vocab,
        numericalise(train_text),
        numericalise(dev_text),
        train_text,
        dev_text,
        clusters,
    )


def write_toy_task(task: ToyTask, directory: str | Path) -> dict[str, Path]:
    """Write train/dev source and target files in the plain parallel-text format."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, text in (("train", task.train_text), ("dev", task.dev_text)):
        for side, k in (("src", 0), ("tgt", 1)):
            p = d / f"{split}.{side}"
            p.write_text(
                "".join(" ".join(pair[k]) + "\n" for pair in text), encoding="utf-8"
            )
            paths[f"{split}.{side}"] = p
    return paths
