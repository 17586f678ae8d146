"""Robustness diagnostics, synthetic-corruption sweeps and the loss ablation."""

from __future__ import annotations

import csv
import io
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

from .bleu import bleu
from .data import ParallelCorpus, Sentence
from .decode import translate_corpus
from .model import Seq2Seq
from .perturb import SYNTHETIC_KINDS, PerturbationSpec, perturb_corpus
from .rng import stream
from .trainer import TrainConfig, ast_train


def corrupt_sources(
    sources: Sequence[Sentence], kind: str, n_ops: int, seed: int, vocab_size: int
) -> list[Sentence]:
    """Seeded synthetic corruption; the same (seed, kind, n_ops) gives the same corpus for every model."""
    spec = PerturbationSpec(kind=kind, n_ops=n_ops)
    return perturb_corpus(sources, spec, stream(seed, "sweep", kind, n_ops), vocab_size)


@dataclass
class RobustnessReport:
    changed_ratio: float
    cross_bleu: float
    n: int

    def __str__(self) -> str:
        return f"changed={100 * self.changed_ratio:.2f}% cross-BLEU={100 * self.cross_bleu:.2f} (n={self.n})"


def robustness_metrics(
    model: Seq2Seq,
    sources: Sequence[Sentence],
    spec: PerturbationSpec,
    beam: int = 10,
    seed: int = 0,
    smooth: bool = False,
) -> RobustnessReport:
    """Compare translations of clean and perturbed inputs.

    Only token-level kinds apply (lexical uses the model's own source
    embeddings). Translations are compared after EOS stripping.
    """
    if not sources:
        raise ValueError("no sentences to evaluate")
    if spec.kind == "feature":
        raise ValueError(
            "robustness metrics need a token-level perturbation, not 'feature'"
        )
    noisy = perturb_corpus(
        sources,
        spec,
        stream(seed, "robustness", spec.kind, spec.n_ops),
        model.cfg.src_vocab,
        model.params["enc.src_emb"].data,
    )
    cache: dict = {}
    clean_out = translate_corpus(model, sources, beam, cache)
    noisy_out = translate_corpus(model, noisy, beam, cache)
    changed = sum(a != b for a, b in zip(clean_out, noisy_out)) / len(sources)
    # empty translations are possible on a bad model; BLEU handles them as zero-length
    cross = bleu(noisy_out, clean_out, smooth=smooth).score
    return RobustnessReport(changed, cross, len(sources))


@dataclass
class SweepTable:
    ops: list[int]
    rows: list[tuple[str, str, list[float]]] = field(
        default_factory=list
    )  # (model, kind, bleu per op)

    def get(self, model: str, kind: str) -> list[float]:
        for m, k, vals in self.rows:
            if m == model and k == kind:
                return vals
        raise KeyError((model, kind))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "model"] + [f"{n}_ops" for n in self.ops])
        for m, k, vals in self.rows:
            w.writerow([k, m] + [f"{100 * v:.2f}" for v in vals])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(m) for m, _, _ in self.rows] + [5])
        lines = []
        for kind in dict.fromkeys(k for _, k, _ in self.rows):
            lines.append(f"{kind}")
            lines.append(" " * (width + 2) + "".join(f"{n:>4} Op." for n in self.ops))
            for m, k, vals in self.rows:
                if k == kind:
                    lines.append(
                        f"  {m:<{width}}" + "".join(f"{100 * v:8.2f}" for v in vals)
                    )
        return "\n".join(lines) + "\n"


def synthetic_sweep(
    models: Mapping[str, Seq2Seq],
    corpus: ParallelCorpus,
    kinds: Sequence[str] = SYNTHETIC_KINDS,
    ops: Sequence[int] = range(6),
    beam: int = 10,
    seed: int = 0,
    smooth: bool = False,
) -> SweepTable:
    """BLEU of each model on corrupted copies of ``corpus``, one row per (model, kind)."""
    if not models:
        raise ValueError("sweep needs at least one model")
    for k in kinds:
        if k not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown synthetic kind {k!r}")
    table = SweepTable(list(ops))
    vocab_size = next(iter(models.values())).cfg.src_vocab
    corrupted = {
        (k, n): corrupt_sources(corpus.sources, k, n, seed, vocab_size)
        for k in kinds
        for n in ops
    }
    for name, model in models.items():
        cache: dict = {}
        for k in kinds:
            vals = []
            for n in ops:
                hyps = translate_corpus(model, corrupted[k, n], beam, cache)
                vals.append(bleu(hyps, corpus.targets, smooth=smooth).score)
            table.rows.append((name, k, vals))
    return table


# ablation -------------------------------------------------------------------------------

ABLATION_ROWS = (
    # name, uses L_true, uses L_noisy, uses L_inv
    ("true", True, False, False),
    ("true+inv", True, False, True),
    ("noisy", False, True, False),
    ("true+noisy", True, True, False),
    ("true+noisy+inv", True, True, True),
)


@dataclass
class AblationRow:
    name: str
    L_true: bool
    L_noisy: bool
    L_inv: bool
    clean_bleu: float
    perturbed_bleu: float


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["variant", "L_true", "L_noisy", "L_inv", "clean_bleu", "perturbed_bleu"]
        )
        for r in self.rows:
            w.writerow(
                [
                    r.name,
                    int(r.L_true),
                    int(r.L_noisy),
                    int(r.L_inv),
                    f"{100 * r.clean_bleu:.2f}",
                    f"{100 * r.perturbed_bleu:.2f}",
                ]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        mark = {True: "yes", False: "-"}
        lines = [
            f"{'variant':<16}{'L_true':>7}{'L_noisy':>8}{'L_inv':>7}{'clean':>8}{'perturbed':>11}"
        ]
        for r in self.rows:
            lines.append(
                f"{r.name:<16}{mark[r.L_true]:>7}{mark[r.L_noisy]:>8}{mark[r.L_inv]:>7}"
                f"{100 * r.clean_bleu:8.2f}{100 * r.perturbed_bleu:11.2f}"
            )
        return "\n".join(lines) + "\n"


def ablation_run(
    pretrained: Seq2Seq,
    corpus: ParallelCorpus,
    dev: ParallelCorpus,
    cfg: TrainConfig,
    perturbed_kind: str = "replace-uniform",
    perturbed_ops: int = 2,
    beam: int = 10,
    smooth: bool = False,
    rows: Sequence[tuple[str, bool, bool, bool]] = ABLATION_ROWS,
) -> AblationTable:
    """Fine-tune the pretrained model under each loss combination and score it.

    Every row starts from the same pretrained weights with the same seeds and
    step budget, so rows differ only in their loss weights. The L_true-only
    row is plain continued MLE.
    """
    noisy_src = corrupt_sources(
        dev.sources, perturbed_kind, perturbed_ops, cfg.seed, pretrained.cfg.src_vocab
    )
    out = []
    for name, use_true, use_noisy, use_inv in rows:
        variant = replace(
            cfg,
            true_weight=cfg.true_weight if use_true else 0.0,
            beta=cfg.beta if use_noisy else 0.0,
            alpha=cfg.alpha if use_inv else 0.0,
        )
        model = ast_train(pretrained, corpus, variant).model
        cache: dict = {}
        clean = bleu(
            translate_corpus(model, dev.sources, beam, cache),
            dev.targets,
            smooth=smooth,
        ).score
        pert = bleu(
            translate_corpus(model, noisy_src, beam, cache), dev.targets, smooth=smooth
        ).score
        out.append(AblationRow(name, use_true, use_noisy, use_inv, clean, pert))
    return AblationTable(out)


def evaluate_bleu(
    model: Seq2Seq, corpus: ParallelCorpus, beam: int = 10, smooth: bool = False
):
    return bleu(
        translate_corpus(model, corpus.sources, beam), corpus.targets, smooth=smooth
    )


__all__ = [
    "ABLATION_ROWS",
    "AblationRow",
    "AblationTable",
    "RobustnessReport",
    "SweepTable",
    "ablation_run",
    "corrupt_sources",
    "evaluate_bleu",
    "robustness_metrics",
    "synthetic_sweep",
]
