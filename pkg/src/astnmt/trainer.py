"""MLE pre-training and adversarial stability training.

One AST step builds a perturbed copy x' of every source sentence, then
minimises

    true_weight * L_true(x, y) + alpha * L_inv(x, x') + beta * L_noisy(x', y)

with a single backward pass and a single Adam step over encoder, decoder and
discriminator parameters together. The encoder->discriminator edges carry a
gradient-reversal gate, so the discriminator descends L_inv while the encoder
ascends it.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, ops
from .bleu import bleu
from .checkpoint import Checkpoint, save_checkpoint
from .data import Batch, ParallelCorpus, Vocabulary, collate, make_batches
from .decode import translate_corpus
from .discriminator import AdversarialTerms, Discriminator, adversarial_loss
from .model import ModelConfig, Seq2Seq
from .perturb import PerturbationSpec, perturb_lexical
from .rng import stream

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "step",
    "L_true",
    "L_inv",
    "L_inv_clean_term",
    "L_inv_noisy_term",
    "L_noisy",
    "total",
    "disc_acc",
    "dev_bleu",
]
MAX_SKIPPED_IN_A_ROW = 10


class NumericalError(RuntimeError):
    """Training produced a non-finite loss it could not recover from."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    true_weight: float = 1.0
    perturb: PerturbationSpec = field(default_factory=PerturbationSpec)
    batch_size: int = 32
    steps: int = 1000
    lr: float = 1e-3
    lr_schedule: str = "constant"
    warmup: int = 4000
    seed: int = 0
    dev_every: int = 0
    dev_beam: int = 1
    bleu_smooth: bool = False
    disc_channels: int = 8
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.true_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1 or self.steps < 0 or self.warmup < 1:
            raise ValueError("batch_size and warmup must be >= 1, steps >= 0")
        if self.lr_schedule not in ("constant", "inverse_sqrt"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.perturb.kind not in ("lexical", "feature"):
            raise ValueError("training perturbation must be 'lexical' or 'feature'")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Constant, or linear warm-up to ``cfg.lr`` followed by inverse-sqrt decay."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    s = step + 1
    return cfg.lr * min(s / cfg.warmup, math.sqrt(cfg.warmup / s))


@dataclass
class TrainStepReport:
    step: int
    L_true: float
    total: float
    L_inv: float | None = None
    L_inv_clean_term: float | None = None
    L_inv_noisy_term: float | None = None
    L_noisy: float | None = None
    disc_acc: float | None = None
    grad_norms: dict[str, float] = field(default_factory=dict)
    lr: float = 0.0
    skipped: bool = False
    dev_bleu: float | None = None
    heldout_disc_acc: float | None = None

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.step)] + [fmt(getattr(self, k)) for k in METRICS_HEADER[1:]]


def _group_norms(params: dict[str, Tensor]) -> dict[str, float]:
    sq: dict[str, float] = {}
    for name, p in params.items():
        if p.grad is not None:
            group = name.split(".", 1)[0]
            sq[group] = sq.get(group, 0.0) + float(np.sum(p.grad * p.grad))
    return {g: math.sqrt(v) for g, v in sq.items()}


def _finite(*values: float | None) -> bool:
    return all(v is None or math.isfinite(v) for v in values)


def _apply(
    params: dict[str, Tensor],
    tape: Tape,
    loss: Tensor,
    adam: AdamState,
    lr: float,
    report: TrainStepReport,
) -> TrainStepReport:
    for p in params.values():
        p.grad = None
    tape.backward(loss)
    report.grad_norms = _group_norms(params)
    if not all(math.isfinite(v) for v in report.grad_norms.values()):
        report.skipped = True
        log.warning("step %d: non-finite gradient, update skipped", report.step)
        return report
    adam_step(params, adam, lr)
    return report


def mle_step(
    model: Seq2Seq, batch: Batch, adam: AdamState, lr: float, seed: int, step: int
) -> TrainStepReport:
    with Tape() as tape:
        loss = model.sentence_nll(
            batch, train=True, rng=stream(seed, "dropout-clean", step)
        )
    value = loss.item()
    report = TrainStepReport(step=step, L_true=value, total=value, lr=lr)
    if not math.isfinite(value):
        report.skipped = True
        log.warning("step %d: non-finite loss, update skipped", step)
        return report
    return _apply(model.params, tape, loss, adam, lr, report)


def perturbed_batch(
    model: Seq2Seq, batch: Batch, spec: PerturbationSpec, rng: np.random.Generator
) -> Batch:
    """Same batch with each source row replaced word-wise by similarity sampling."""
    E = model.params["enc.src_emb"].data
    rows = []
    for i in range(len(batch)):
        x = batch.src[i, : batch.src_len[i]].tolist()
        rows.append(perturb_lexical(x, E, rng, spec.ratio))
    noisy = collate([(x, [0]) for x in rows])
    return replace(batch, src=noisy.src, src_mask=noisy.src_mask, src_len=noisy.src_len)


@dataclass
class AstLosses:
    L_true: Tensor
    L_noisy: Tensor
    adv: AdversarialTerms
    total: Tensor


def ast_losses(
    model: Seq2Seq,
    disc: Discriminator,
    batch: Batch,
    cfg: TrainConfig,
    step: int,
    noisy: Batch | None = None,
    train: bool = True,
    reverse: bool = True,
) -> AstLosses:
    """Forward pass of the joint objective; call inside a Tape to get gradients.

    Random streams are keyed on ``(cfg.seed, step)``: the clean path uses the
    same dropout stream as :func:`mle_step`, so with alpha = beta = 0 both
    produce identical updates.
    """
    rng_clean = stream(cfg.seed, "dropout-clean", step)
    rng_pert = stream(cfg.seed, "perturb", step)
    rng_noisy = stream(cfg.seed, "dropout-noisy", step)

    enc_clean = model.encode(batch.src, batch.src_mask, train, rng_clean)
    L_true = model.nll_from_states(enc_clean, batch, train, rng_clean)

    spec = cfg.perturb
    if spec.kind == "lexical":
        if noisy is None:
            noisy = perturbed_batch(model, batch, spec, rng_pert)
        enc_noisy = model.encode(noisy.src, noisy.src_mask, train, rng_noisy)
    else:
        emb = ops.gaussian_noise_add(
            model.embed_source(batch.src), spec.sigma, rng_pert
        )
        noisy = batch
        enc_noisy = model.encode_embedded(emb, batch.src_mask, train, rng_noisy)
    L_noisy = model.nll_from_states(enc_noisy, noisy, train, rng_noisy)
    adv = adversarial_loss(enc_clean, enc_noisy, disc, reverse=reverse)
    total = L_true * cfg.true_weight + adv.total * cfg.alpha + L_noisy * cfg.beta
    return AstLosses(L_true, L_noisy, adv, total)


def ast_training_step(
    model: Seq2Seq,
    disc: Discriminator,
    batch: Batch,
    cfg: TrainConfig,
    adam: AdamState,
    lr: float,
    step: int,
) -> TrainStepReport:
    with Tape() as tape:
        losses = ast_losses(model, disc, batch, cfg, step)
    adv = losses.adv
    report = TrainStepReport(
        step=step,
        L_true=losses.L_true.item(),
        total=losses.total.item(),
        L_inv=adv.total.item(),
        L_inv_clean_term=adv.clean_term.item(),
        L_inv_noisy_term=adv.noisy_term.item(),
        L_noisy=losses.L_noisy.item(),
        disc_acc=adv.accuracy,
        lr=lr,
    )
    if not _finite(report.total, report.L_true, report.L_inv, report.L_noisy):
        report.skipped = True
        log.warning("step %d: non-finite loss, update skipped", step)
        return report
    params = dict(model.params)
    params.update(disc.params)
    return _apply(params, tape, losses.total, adam, lr, report)


def heldout_disc_accuracy(
    model: Seq2Seq, disc: Discriminator, dev: ParallelCorpus, cfg: TrainConfig
) -> float:
    """Discriminator accuracy on dev sources against perturbed copies, in eval mode.

    The perturbation stream is fixed per seed, so successive calls differ
    only through the parameters.
    """
    batch = collate(list(zip(dev.sources, dev.targets)))
    rng = stream(cfg.seed, "heldout-perturb")
    clean = model.encode(batch.src, batch.src_mask)
    if cfg.perturb.kind == "lexical":
        noisy = perturbed_batch(model, batch, cfg.perturb, rng)
        enc_noisy = model.encode(noisy.src, noisy.src_mask)
    else:
        emb = ops.gaussian_noise_add(
            model.embed_source(batch.src), cfg.perturb.sigma, rng
        )
        enc_noisy = model.encode_embedded(emb, batch.src_mask)
    return adversarial_loss(clean, enc_noisy, disc).accuracy


# training loop --------------------------------------------------------------------------


class MetricsWriter:
    def __init__(self, path: Path, append: bool = False):
        self.path = path
        self._rows: list[TrainStepReport] = []
        if not (append and path.exists()):
            with open(path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def write(self, report: TrainStepReport) -> None:
        self._rows.append(report)
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(report.csv_row())


def write_curves(reports: list[TrainStepReport], path: Path) -> None:
    """Loss and dev-BLEU learning curves as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    steps = [r.step for r in reports]
    for key in ("L_true", "L_inv", "L_noisy"):
        ys = [getattr(r, key) for r in reports]
        if any(y is not None for y in ys):
            ax1.plot(
                steps,
                [np.nan if y is None else y for y in ys],
                label=key,
                linewidth=0.8,
            )
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend()
    dev = [(r.step, r.dev_bleu) for r in reports if r.dev_bleu is not None]
    if dev:
        ax2.plot([s for s, _ in dev], [100 * b for _, b in dev], marker="o")
    ax2.set_xlabel("step")
    ax2.set_ylabel("dev BLEU")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


@dataclass
class TrainResult:
    model: Seq2Seq
    disc: Discriminator | None
    adam: AdamState
    step: int
    reports: list[TrainStepReport]
    best_dev_bleu: float | None = None


def dev_bleu(model: Seq2Seq, dev: ParallelCorpus, beam: int, smooth: bool) -> float:
    hyps = translate_corpus(model, dev.sources, beam)
    return bleu(hyps, dev.targets, smooth=smooth).score


def train(
    model: Seq2Seq,
    corpus: ParallelCorpus,
    cfg: TrainConfig,
    disc: Discriminator | None = None,
    dev: ParallelCorpus | None = None,
    adam: AdamState | None = None,
    start_step: int = 0,
    run_dir: Path | None = None,
    vocabs: tuple[Vocabulary | None, Vocabulary | None] = (None, None),
    on_step: Callable[[TrainStepReport], None] | None = None,
) -> TrainResult:
    """Run steps ``start_step .. cfg.steps - 1``; AST when ``disc`` is given, MLE otherwise.

    Step ``k`` always sees the same batch and random streams regardless of
    where a run was resumed. With ``run_dir``, writes ``metrics.csv``,
    ``curves.svg`` (at dev evaluations), ``best.ckpt`` / ``last.ckpt`` /
    ``final.ckpt``.
    """
    adam = adam if adam is not None else AdamState()
    if run_dir:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    n_batches = math.ceil(len(corpus) / cfg.batch_size)
    epoch_cache: dict[int, list[Batch]] = {}
    reports: list[TrainStepReport] = []
    writer = (
        MetricsWriter(run_dir / "metrics.csv", append=start_step > 0)
        if run_dir
        else None
    )
    best: float | None = None
    skipped_in_a_row = 0

    def checkpoint(step: int) -> Checkpoint:
        return Checkpoint(
            model,
            step,
            adam,
            disc,
            vocabs[0],
            vocabs[1],
            {"mode": "ast" if disc else "mle"},
        )

    for step in range(start_step, cfg.steps):
        epoch, idx = divmod(step, n_batches)
        if epoch not in epoch_cache:
            epoch_cache.clear()
            epoch_cache[epoch] = make_batches(corpus, cfg.batch_size, cfg.seed, epoch)
        batch = epoch_cache[epoch][idx]
        lr = learning_rate(cfg, step)
        if disc is None:
            report = mle_step(model, batch, adam, lr, cfg.seed, step)
        else:
            report = ast_training_step(model, disc, batch, cfg, adam, lr, step)

        if report.skipped:
            skipped_in_a_row += 1
            if disc is None or skipped_in_a_row >= MAX_SKIPPED_IN_A_ROW:
                raise NumericalError(
                    f"non-finite loss at step {step}; last good checkpoint kept"
                )
        else:
            skipped_in_a_row = 0

        if dev is not None and cfg.dev_every and (step + 1) % cfg.dev_every == 0:
            report.dev_bleu = dev_bleu(model, dev, cfg.dev_beam, cfg.bleu_smooth)
            if disc is not None:
                report.heldout_disc_acc = heldout_disc_accuracy(model, disc, dev, cfg)
            if best is None or report.dev_bleu > best:
                best = report.dev_bleu
                if run_dir:
                    save_checkpoint(checkpoint(step + 1), run_dir / "best.ckpt")
        reports.append(report)
        if writer:
            writer.write(report)
            if report.dev_bleu is not None:
                write_curves(reports, run_dir / "curves.svg")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint(step + 1), run_dir / "last.ckpt")
        if on_step:
            on_step(report)

    final_step = max(start_step, cfg.steps)
    if run_dir:
        save_checkpoint(checkpoint(final_step), run_dir / "final.ckpt")
        if best is None:
            save_checkpoint(checkpoint(final_step), run_dir / "best.ckpt")
    return TrainResult(model, disc, adam, final_step, reports, best)


def mle_pretrain(
    corpus: ParallelCorpus,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    dev: ParallelCorpus | None = None,
    run_dir: Path | None = None,
    vocabs=(None, None),
    on_step: Callable[[TrainStepReport], None] | None = None,
) -> TrainResult:
    model = Seq2Seq(model_cfg, seed=cfg.seed)
    return train(
        model, corpus, cfg, dev=dev, run_dir=run_dir, vocabs=vocabs, on_step=on_step
    )


def ast_train(
    pretrained: Seq2Seq,
    corpus: ParallelCorpus,
    cfg: TrainConfig,
    dev: ParallelCorpus | None = None,
    run_dir: Path | None = None,
    vocabs=(None, None),
    on_step: Callable[[TrainStepReport], None] | None = None,
) -> TrainResult:
    """Fine-tune a copy of ``pretrained`` with a freshly initialised discriminator and optimiser."""
    model = pretrained.clone()
    disc = Discriminator(model.cfg.hidden_dim, cfg.disc_channels, seed=cfg.seed)
    return train(
        model,
        corpus,
        cfg,
        disc=disc,
        dev=dev,
        run_dir=run_dir,
        vocabs=vocabs,
        on_step=on_step,
    )
