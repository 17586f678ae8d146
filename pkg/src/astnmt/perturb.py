"""Input perturbations.

Training-time generators: similarity-weighted word replacement and Gaussian
noise on word embeddings. Evaluation-time generators: swap with the right
neighbour, uniform replacement, and deletion.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .data import N_RESERVED, Sentence

KINDS = ("lexical", "feature", "swap", "replace-uniform", "delete")
SYNTHETIC_KINDS = ("swap", "replace-uniform", "delete")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "lexical"
    ratio: float = 0.2
    sigma: float = 0.01
    n_ops: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(
                f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}"
            )
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must be in (0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.n_ops < 0:
            raise ValueError("n_ops must be >= 0")


def num_replacements(length: int, ratio: float = 0.2) -> int:
    """``max(floor(ratio * length), 1)``."""
    if length < 1:
        raise ValueError("sentence length must be >= 1")
    # tolerate 0.2 * 10 landing a hair under 2.0
    return max(math.floor(ratio * length + 1e-9), 1)


def _cosines(embeddings: np.ndarray, word_id: int) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1)
    q = embeddings[word_id]
    qn = norms[word_id]
    denom = norms * qn
    dots = embeddings @ q
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def lexical_distribution(embeddings, word_id: int) -> np.ndarray:
    """Replacement PMF over the full vocabulary for the word ``word_id``.

    Mass is proportional to exp(cosine(E[word], E[candidate])) over kept words
    other than ``word_id``; reserved ids and the word itself get exactly 0.
    A zero-norm row contributes cosine 0.
    """
    E = (
        embeddings.data
        if isinstance(embeddings, Tensor)
        else np.asarray(embeddings, dtype=float)
    )
    V = E.shape[0]
    if not N_RESERVED <= word_id < V:
        raise ValueError(f"word id {word_id} is reserved or out of range")
    if V - N_RESERVED < 2:
        raise ValueError("need at least two real words to replace one")
    cos = _cosines(E, word_id)
    allowed = np.ones(V, dtype=bool)
    allowed[:N_RESERVED] = False
    allowed[word_id] = False
    logits = np.where(allowed, cos, -np.inf)
    w = np.exp(logits - logits[allowed].max())
    return w / w.sum()


def _choose_positions(length: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(length, size=k, replace=False))


def _replaceable(x: Sentence) -> list[int]:
    return [i for i, t in enumerate(x) if t >= N_RESERVED]


def perturb_lexical(
    x: Sentence, embeddings, rng: np.random.Generator, ratio: float = 0.2
) -> Sentence:
    """Replace ``num_replacements(|x|)`` distinct positions with similarity-sampled words."""
    if len(x) < 1:
        raise ValueError("cannot perturb an empty sentence")
    E = (
        embeddings.data
        if isinstance(embeddings, Tensor)
        else np.asarray(embeddings, dtype=float)
    )
    out = list(x)
    cand = _replaceable(x)
    k = min(num_replacements(len(x), ratio), len(cand))
    if k == 0:
        return out
    picks = rng.choice(len(cand), size=k, replace=False)
    for p in sorted(picks):
        i = cand[p]
        pmf = lexical_distribution(E, x[i])
        out[i] = int(rng.choice(len(pmf), p=pmf))
    return out


def perturb_feature(embedded, sigma: float, rng: np.random.Generator) -> Tensor:
    """Add N(0, sigma^2 I) to every embedding vector (differentiable w.r.t. the input)."""
    return ops.gaussian_noise_add(embedded, sigma, rng)


def synth_perturb(
    x: Sentence,
    kind: str,
    n_ops: int,
    rng: np.random.Generator,
    vocab_size: int | None = None,
) -> Sentence:
    """Evaluation corruptions applied ``n_ops`` times to distinct positions.

    swap: each chosen position ``i < |x| - 1`` is exchanged with ``i + 1``.
    replace-uniform: each chosen position gets a uniform draw from the real
    vocabulary excluding the current word (needs ``vocab_size``).
    delete: chosen positions are removed, keeping at least one token.
    """
    if n_ops < 0:
        raise ValueError("n_ops must be >= 0")
    out = list(x)
    if n_ops == 0:
        return out
    if kind == "swap":
        if len(out) < 2:
            return out
        k = min(n_ops, len(out) - 1)
        for i in _choose_positions(len(out) - 1, k, rng):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    if kind == "replace-uniform":
        if vocab_size is None:
            raise ValueError("replace-uniform needs vocab_size")
        if vocab_size - N_RESERVED < 2:
            raise ValueError("need at least two real words to replace one")
        cand = _replaceable(out)
        k = min(n_ops, len(cand))
        for p in _choose_positions(len(cand), k, rng):
            i = cand[p]
            draw = int(rng.integers(N_RESERVED, vocab_size - 1))
            # skip over the current word so the draw is uniform on the rest
            out[i] = draw + 1 if draw >= out[i] else draw
        return out
    if kind == "delete":
        k = min(n_ops, len(out) - 1)
        if k <= 0:
            return out
        drop = set(_choose_positions(len(out), k, rng).tolist())
        return [t for i, t in enumerate(out) if i not in drop]
    raise ValueError(
        f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}"
    )


def perturb_corpus(
    sources: Sequence[Sentence],
    spec: PerturbationSpec,
    rng: np.random.Generator,
    vocab_size: int | None = None,
    embeddings=None,
) -> list[Sentence]:
    """Apply a discrete perturbation spec to each sentence, in order, from one stream."""
    if spec.kind == "feature":
        raise ValueError("feature perturbation acts on embeddings, not token ids")
    if spec.kind == "lexical":
        if embeddings is None:
            raise ValueError("lexical perturbation needs source embeddings")
        return [perturb_lexical(x, embeddings, rng, spec.ratio) for x in sources]
    return [synth_perturb(x, spec.kind, spec.n_ops, rng, vocab_size) for x in sources]
