"""Beam search over a step function, and translation with a Seq2Seq model."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff import Tensor
from .data import BOS, EOS, Sentence, strip_special
from .model import DecoderState, EncoderStates, Seq2Seq

StepFn = Callable[[np.ndarray, Any], tuple[np.ndarray, Any]]
ReorderFn = Callable[[Any, np.ndarray], Any]


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    log_prob: float = 0.0
    finished: bool = False

    @property
    def score(self) -> float:
        """Length-normalised log-probability (EOS counts as a token)."""
        return self.log_prob / max(len(self.tokens), 1)


def beam_search(
    step: StepFn,
    reorder: ReorderFn,
    state: Any,
    beam: int = 10,
    max_len: int = 50,
    bos: int = BOS,
    eos: int = EOS,
) -> Hypothesis:
    """Generic beam search.

    ``step(prev_tokens (k,), state) -> (log_probs (k, V), state)`` advances k
    live hypotheses; ``reorder(state, rows)`` selects/duplicates state rows.
    Hypotheses ending in ``eos`` are retired; the search stops once ``beam``
    of them are retired or ``max_len`` steps have run. The returned hypothesis
    maximises log-probability divided by length. The greedy path joins the
    candidates, because early retirement of short hypotheses can otherwise
    prune a longer output with a better normalised score.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    fallback = greedy_search(step, state, max_len, bos, eos)
    alive = [Hypothesis()]
    finished: list[Hypothesis] = []
    prev = np.array([bos])
    for _ in range(max_len):
        logp, state = step(prev, state)
        cum = np.array([h.log_prob for h in alive])[:, None] + logp
        flat = cum.ravel()
        # stable: ties resolve to lower (row, token)
        order = np.argsort(-flat, kind="stable")[: 2 * beam]
        V = logp.shape[1]
        next_alive, rows = [], []
        for rank, idx in enumerate(order):
            r, tok = divmod(int(idx), V)
            h = Hypothesis(alive[r].tokens + [tok], float(flat[idx]), tok == eos)
            if h.finished:
                # only an EOS that ranks inside the beam retires a hypothesis
                if rank < beam and len(finished) < beam:
                    finished.append(h)
            elif len(next_alive) < beam:
                next_alive.append(h)
                rows.append(r)
        if len(finished) >= beam or not next_alive:
            break
        alive = next_alive
        state = reorder(state, np.array(rows))
        prev = np.array([h.tokens[-1] for h in alive])
    else:
        finished = finished + alive
    if not finished:
        finished = alive
    return max(finished + [fallback], key=lambda h: h.score)


def greedy_search(
    step: StepFn, state: Any, max_len: int = 50, bos: int = BOS, eos: int = EOS
) -> Hypothesis:
    h = Hypothesis()
    prev = np.array([bos])
    for _ in range(max_len):
        logp, state = step(prev, state)
        tok = int(np.argmax(logp[0]))
        h = Hypothesis(h.tokens + [tok], h.log_prob + float(logp[0, tok]), tok == eos)
        if h.finished:
            break
        prev = np.array([tok])
    return h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _ModelStepper:
    """Adapts a Seq2Seq to the (step, reorder) interface for one source sentence."""

    def __init__(self, model: Seq2Seq, enc: EncoderStates):
        self.model = model
        self.base = enc
        self._tiled: dict[int, EncoderStates] = {}

    def _enc(self, k: int) -> EncoderStates:
        if k not in self._tiled:
            e = self.base
            proj = None if e.proj is None else Tensor(np.repeat(e.proj.data, k, axis=0))
            self._tiled[k] = EncoderStates(
                Tensor(np.repeat(e.H.data, k, axis=0)),
                np.repeat(e.mask, k, axis=0),
                proj,
            )
        return self._tiled[k]

    def step(self, prev: np.ndarray, state: DecoderState):
        enc = self._enc(len(prev))
        logits, state = self.model.decode_step(prev, state, enc)
        return _log_softmax(logits.data), state

    @staticmethod
    def reorder(state: DecoderState, rows: np.ndarray) -> DecoderState:
        return DecoderState([Tensor(s.data[rows]) for s in state.layers], state.step)


def default_max_len(model: Seq2Seq, src_len: int) -> int:
    return min(model.cfg.max_decode_len, 2 * src_len + 10)


def translate(
    model: Seq2Seq, x: Sentence, beam: int = 10, max_len: int | None = None
) -> Hypothesis:
    """Decode one source sentence (token ids, no BOS/EOS) with beam search."""
    if len(x) == 0:
        raise ValueError("cannot translate an empty sentence")
    src = np.asarray([x], dtype=np.int64)
    enc = model.encode(src, np.ones(src.shape))
    stepper = _ModelStepper(model, enc)
    state = model.init_state(enc)
    if max_len is None:
        max_len = default_max_len(model, len(x))
    if beam == 1:
        return greedy_search(stepper.step, state, max_len)
    return beam_search(stepper.step, stepper.reorder, state, beam, max_len)


def translate_corpus(
    model: Seq2Seq,
    sources: Sequence[Sentence],
    beam: int = 10,
    cache: dict | None = None,
) -> list[Sentence]:
    """Translations with BOS/EOS stripped; identical inputs are decoded once."""
    cache = {} if cache is None else cache
    out = []
    for x in sources:
        key = tuple(x)
        if key not in cache:
            cache[key] = strip_special(translate(model, list(x), beam).tokens)
        out.append(cache[key])
    return out
