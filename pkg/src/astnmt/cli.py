"""Command-line entry point: ``astnmt <command> [options]``.

Every command writes into a run directory (``runs/<timestamp>-<name>`` or
``--run-dir``) holding the resolved config, a log and its outputs. Exit
status: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import config as C
from .bleu import bleu
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .data import (
    DataError,
    ParallelCorpus,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    load_parallel,
    read_lines,
)
from .decode import translate_corpus
from .evaluate import ablation_run, robustness_metrics, synthetic_sweep
from .perturb import perturb_corpus
from .rng import stream
from .trainer import NumericalError, ast_train, mle_pretrain

log = logging.getLogger("astnmt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = (
    "build-vocab",
    "train-mle",
    "train-ast",
    "translate",
    "evaluate",
    "perturb-corpus",
    "robustness-report",
    "sweep",
    "ablate",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key",
    )
    common.add_argument(
        "--run-dir", help="write outputs here instead of runs/<timestamp>-<name>"
    )
    common.add_argument(
        "--runs-root", default="runs", help="parent of timestamped run directories"
    )
    common.add_argument("--name", help="run name (default: the command)")
    common.add_argument(
        "--force",
        action="store_true",
        help="allow writing into an existing run directory",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(
        prog="astnmt",
        description="Adversarial stability training for sequence-to-sequence translation.",
    )
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    add("build-vocab", "write source/target vocabularies built from the training files")
    add("train-mle", "maximum-likelihood pre-training")
    a = add(
        "train-ast", "adversarial stability fine-tuning from a pre-trained checkpoint"
    )
    a.add_argument(
        "--init",
        help="pre-trained checkpoint (file or run dir); overrides train.init_ckpt",
    )
    a = add("translate", "translate a source file")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--src", required=True)
    a.add_argument("--beam", type=int)
    a = add(
        "evaluate", "BLEU of a checkpoint on a parallel set (default: the dev files)"
    )
    a.add_argument("--ckpt", required=True)
    a.add_argument("--src")
    a.add_argument("--ref")
    a.add_argument("--beam", type=int)
    a = add("perturb-corpus", "write a perturbed copy of a source file")
    a.add_argument("--src", required=True)
    a.add_argument(
        "--ckpt",
        help="model whose embeddings drive lexical perturbation / whose vocabulary is used",
    )
    a.add_argument(
        "--vocab",
        help="source vocabulary file (alternative to --ckpt for synthetic kinds)",
    )
    a = add(
        "robustness-report", "changed-translation ratio and clean-vs-perturbed BLEU"
    )
    a.add_argument("--ckpt", required=True)
    a.add_argument("--src")
    a.add_argument("--beam", type=int)
    a = add(
        "sweep",
        "BLEU under synthetic swap/replace/delete corruption for several models",
    )
    a.add_argument(
        "--models", required=True, help="comma list of name=path or path entries"
    )
    a.add_argument("--ops", help="operation counts, e.g. 0..5 (overrides eval.ops)")
    a.add_argument("--src")
    a.add_argument("--ref")
    a.add_argument("--beam", type=int)
    a = add(
        "ablate", "five loss combinations fine-tuned from one pre-trained checkpoint"
    )
    a.add_argument("--init", help="pre-trained checkpoint; overrides train.init_ckpt")
    a.add_argument("--beam", type=int)
    return p


# helpers --------------------------------------------------------------------------------


def make_run_dir(args, command: str) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = Path(args.runs_root) / f"{stamp}-{args.name or command}"
    if d.exists() and any(d.iterdir()) and not args.force:
        raise UsageError(f"run directory {d} exists; pass --force to reuse it")
    d.mkdir(parents=True, exist_ok=True)
    return d


def resolve_ckpt(ref: str) -> Path:
    """A checkpoint file, a run directory (its best.ckpt), or a bare name with ``.ckpt`` implied."""
    p = Path(ref)
    if p.is_dir():
        p = p / "best.ckpt"
    elif not p.exists() and Path(ref + ".ckpt").exists():
        p = Path(ref + ".ckpt")
    if not p.is_file():
        raise CheckpointError(f"{ref}: no checkpoint found")
    return p


def _load(ref: str) -> Checkpoint:
    ckpt = load_checkpoint(resolve_ckpt(ref))
    if ckpt.src_vocab is None or ckpt.tgt_vocab is None:
        raise CheckpointError(f"{ref}: checkpoint carries no vocabularies")
    return ckpt


def _load_init(cfg, ref: str) -> Checkpoint:
    """A pre-trained checkpoint whose tensor shapes agree with the model.* keys of this run."""
    ck = _load(ref)
    have = (ck.model.cfg.emb_dim, ck.model.cfg.hidden_dim, ck.model.cfg.layers)
    want = (cfg["model.emb_dim"], cfg["model.hidden_dim"], cfg["model.layers"])
    if have != want:
        raise CheckpointError(
            f"{ref}: checkpoint has (emb_dim, hidden_dim, layers) = {have}, the config asks for {want}"
        )
    return ck


def _require(cfg, key: str, override: str | None = None) -> str:
    value = override or cfg[key]
    if not value:
        raise UsageError(f"{key} is not set (use --config or --set {key}=PATH)")
    return value


def _vocabs(cfg) -> tuple[Vocabulary, Vocabulary]:
    max_size = cfg["data.vocab_max_size"] or None
    out = []
    for side in ("src", "tgt"):
        path = cfg[f"data.{side}_vocab"]
        if path:
            out.append(Vocabulary.load(path))
        else:
            lines = [
                " ".join(t) for t in read_lines(_require(cfg, f"data.train_{side}"))
            ]
            out.append(build_vocab(lines, max_size, cfg["data.vocab_min_freq"]))
    return out[0], out[1]


def _corpus(
    cfg, src_key: str, tgt_key: str, vocabs, src=None, tgt=None
) -> ParallelCorpus:
    return load_parallel(
        _require(cfg, src_key, src),
        _require(cfg, tgt_key, tgt),
        vocabs[0],
        vocabs[1],
        cfg["data.max_len"],
    )


def _dev(cfg, vocabs) -> ParallelCorpus | None:
    if cfg["data.dev_src"] and cfg["data.dev_tgt"]:
        return _corpus(cfg, "data.dev_src", "data.dev_tgt", vocabs)
    return None


def _write_lines(path: Path, rows: Sequence[Sequence[str]]) -> None:
    path.write_text("".join(" ".join(r) + "\n" for r in rows), encoding="utf-8")


def _encode_file(path: str, vocab: Vocabulary) -> list[list[int]]:
    rows = read_lines(path)
    empty = [i + 1 for i, r in enumerate(rows) if not r]
    if empty:
        raise DataError(f"{path}: empty line(s) at {empty[:5]}")
    return [encode(r, vocab) for r in rows]


def _beam(args, cfg) -> int:
    beam = args.beam if getattr(args, "beam", None) is not None else cfg["eval.beam"]
    if beam < 1:
        raise UsageError("beam must be >= 1")
    return beam


# commands -------------------------------------------------------------------------------


def cmd_build_vocab(args, cfg, run: Path) -> dict:
    src, tgt = _vocabs(cfg)
    src.save(run / "src.vocab")
    tgt.save(run / "tgt.vocab")
    return {"src_vocab": len(src), "tgt_vocab": len(tgt)}


def _train_report(result, run: Path) -> dict:
    last = result.reports[-1] if result.reports else None
    return {
        "steps": result.step,
        "final_L_true": None if last is None else last.L_true,
        "best_dev_bleu": result.best_dev_bleu,
        "checkpoint": str(run / "final.ckpt"),
    }


def cmd_train_mle(args, cfg, run: Path) -> dict:
    vocabs = _vocabs(cfg)
    vocabs[0].save(run / "src.vocab")
    vocabs[1].save(run / "tgt.vocab")
    train = _corpus(cfg, "data.train_src", "data.train_tgt", vocabs)
    mcfg = C.model_config(cfg, len(vocabs[0]), len(vocabs[1]))
    tcfg = C.train_config(cfg)
    result = mle_pretrain(train, tcfg, mcfg, _dev(cfg, vocabs), run, vocabs)
    return _train_report(result, run)


def cmd_train_ast(args, cfg, run: Path) -> dict:
    init = _load_init(cfg, _require(cfg, "train.init_ckpt", args.init))
    vocabs = (init.src_vocab, init.tgt_vocab)
    train = _corpus(cfg, "data.train_src", "data.train_tgt", vocabs)
    tcfg = C.train_config(cfg)
    result = ast_train(init.model, train, tcfg, _dev(cfg, vocabs), run, vocabs)
    return _train_report(result, run)


def cmd_translate(args, cfg, run: Path) -> dict:
    ck = _load(args.ckpt)
    sources = _encode_file(args.src, ck.src_vocab)
    hyps = translate_corpus(ck.model, sources, _beam(args, cfg))
    out = run / "translations.txt"
    _write_lines(out, [decode(h, ck.tgt_vocab) for h in hyps])
    return {"sentences": len(hyps), "output": str(out)}


def cmd_evaluate(args, cfg, run: Path) -> dict:
    ck = _load(args.ckpt)
    vocabs = (ck.src_vocab, ck.tgt_vocab)
    corpus = _corpus(cfg, "data.dev_src", "data.dev_tgt", vocabs, args.src, args.ref)
    hyps = translate_corpus(ck.model, corpus.sources, _beam(args, cfg))
    report = bleu(hyps, corpus.targets, smooth=cfg["eval.bleu_smooth"])
    _write_lines(run / "translations.txt", [decode(h, ck.tgt_vocab) for h in hyps])
    (run / "bleu.txt").write_text(str(report) + "\n", encoding="utf-8")
    return {"bleu": report.score, "report": str(report)}


def cmd_perturb_corpus(args, cfg, run: Path) -> dict:
    spec = C.perturbation_spec(cfg)
    if spec.kind == "feature":
        raise UsageError(
            "perturb.kind=feature perturbs embeddings and has no text form"
        )
    embeddings = None
    if args.ckpt:
        ck = _load(args.ckpt)
        vocab = ck.src_vocab
        embeddings = ck.model.params["enc.src_emb"].data
    elif args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        raise UsageError("perturb-corpus needs --ckpt or --vocab")
    if spec.kind == "lexical" and embeddings is None:
        raise UsageError("lexical perturbation needs --ckpt for its embeddings")
    sources = _encode_file(args.src, vocab)
    noisy = perturb_corpus(
        sources,
        spec,
        stream(spec.seed, "perturb-corpus", spec.kind),
        len(vocab),
        embeddings,
    )
    out = run / "perturbed.src"
    _write_lines(out, [decode(x, vocab) for x in noisy])
    return {"sentences": len(noisy), "kind": spec.kind, "output": str(out)}


def cmd_robustness_report(args, cfg, run: Path) -> dict:
    ck = _load(args.ckpt)
    src = args.src or _require(cfg, "data.dev_src")
    sources = _encode_file(src, ck.src_vocab)
    spec = C.perturbation_spec(cfg)
    if spec.kind == "feature":
        raise UsageError("robustness-report needs a token-level perturb.kind")
    rep = robustness_metrics(
        ck.model, sources, spec, _beam(args, cfg), spec.seed, cfg["eval.bleu_smooth"]
    )
    result = {
        "kind": spec.kind,
        "changed_ratio": rep.changed_ratio,
        "cross_bleu": rep.cross_bleu,
        "sentences": rep.n,
    }
    (run / "robustness.json").write_text(
        json.dumps(result, indent=2) + "\n", encoding="utf-8"
    )
    return result


def parse_models(text: str) -> list[tuple[str, str]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, path = item.partition("=")
        out.append((name, path) if sep else (Path(item).stem or item, item))
    if not out:
        raise UsageError("--models is empty")
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate model names in --models: {names}")
    return out


def cmd_sweep(args, cfg, run: Path) -> dict:
    entries = parse_models(args.models)
    ckpts = {name: _load(path) for name, path in entries}
    first = next(iter(ckpts.values()))
    for name, ck in ckpts.items():
        if (
            ck.src_vocab.itos != first.src_vocab.itos
            or ck.tgt_vocab.itos != first.tgt_vocab.itos
        ):
            raise DataError(
                f"model {name} uses different vocabularies from {entries[0][0]}"
            )
    corpus = _corpus(
        cfg,
        "data.dev_src",
        "data.dev_tgt",
        (first.src_vocab, first.tgt_vocab),
        args.src,
        args.ref,
    )
    kinds = [k.strip() for k in cfg["eval.sweep_kinds"].split(",") if k.strip()]
    ops = C.parse_ops(args.ops or cfg["eval.ops"])
    try:
        table = synthetic_sweep(
            {n: ck.model for n, ck in ckpts.items()},
            corpus,
            kinds,
            ops,
            _beam(args, cfg),
            cfg["eval.seed"],
            cfg["eval.bleu_smooth"],
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    (run / "sweep.csv").write_text(table.to_csv(), encoding="utf-8")
    (run / "sweep.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text(), end="")
    return {"rows": len(table.rows), "ops": ops, "output": str(run / "sweep.csv")}


def cmd_ablate(args, cfg, run: Path) -> dict:
    init = _load_init(cfg, _require(cfg, "train.init_ckpt", args.init))
    vocabs = (init.src_vocab, init.tgt_vocab)
    train = _corpus(cfg, "data.train_src", "data.train_tgt", vocabs)
    dev = _dev(cfg, vocabs)
    if dev is None:
        raise UsageError("ablate needs data.dev_src and data.dev_tgt")
    table = ablation_run(
        init.model,
        train,
        dev,
        C.train_config(cfg),
        cfg["eval.ablation_kind"],
        cfg["eval.ablation_ops"],
        _beam(args, cfg),
        cfg["eval.bleu_smooth"],
    )
    (run / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    (run / "ablation.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text(), end="")
    return {"rows": len(table.rows), "output": str(run / "ablation.csv")}


HANDLERS = {
    "build-vocab": cmd_build_vocab,
    "train-mle": cmd_train_mle,
    "train-ast": cmd_train_ast,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "perturb-corpus": cmd_perturb_corpus,
    "robustness-report": cmd_robustness_report,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def _setup_logging(run: Path, verbose: bool) -> logging.Handler:
    handler = logging.FileHandler(run / "run.log", encoding="utf-8")
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def main(argv: Sequence[str] | None = None) -> int:
    handler = None
    try:
        args = _parser().parse_args(argv)
        cfg = C.resolve(args.config, args.set)
        run = make_run_dir(args, args.command)
        (run / "config.yaml").write_text(C.dump(cfg), encoding="utf-8")
        handler = _setup_logging(run, args.verbose)
        log.info("command %s, run dir %s", args.command, run)
        summary: dict[str, Any] = HANDLERS[args.command](args, cfg, run)
        (run / "summary.json").write_text(
            json.dumps(summary, indent=2, default=str) + "\n", encoding="utf-8"
        )
        print(f"{args.command}: done, outputs in {run}")
        return EXIT_OK
    except (UsageError, C.ConfigError) as e:
        print(f"astnmt: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as e:
        print(f"astnmt: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"astnmt: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
