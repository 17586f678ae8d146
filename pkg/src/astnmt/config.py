"""Run configuration: flat dotted keys with typed defaults.

Resolution order, later wins: built-in defaults, the config file (YAML,
either flat ``a.b: v`` keys or nested mappings), ``AST_*`` environment
variables, then ``--set key=value`` overrides.
"""

from __future__ import annotations

import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .perturb import PerturbationSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: Any
    doc: str


SCHEMA: dict[str, Key] = {
    # data
    "data.train_src": Key("", "training source file, one sentence per line"),
    "data.train_tgt": Key("", "training target file, aligned with data.train_src"),
    "data.dev_src": Key("", "dev source file (optional)"),
    "data.dev_tgt": Key("", "dev target file (optional)"),
    "data.src_vocab": Key(
        "", "source vocabulary file; built from the training source when empty"
    ),
    "data.tgt_vocab": Key(
        "", "target vocabulary file; built from the training target when empty"
    ),
    "data.max_len": Key(
        50, "pairs with either side longer than this are dropped at load"
    ),
    "data.vocab_max_size": Key(
        0, "keep at most this many words per side (0 = no limit)"
    ),
    "data.vocab_min_freq": Key(1, "words seen fewer times map to <unk>"),
    # model
    "model.emb_dim": Key(32, "word embedding size"),
    "model.hidden_dim": Key(32, "GRU state size"),
    "model.layers": Key(2, "recurrent layers per side (only 2 is supported)"),
    "model.dropout": Key(0.1, "dropout rate on embeddings and hidden states"),
    "model.max_decode_len": Key(60, "hard cap on generated length"),
    # training
    "train.steps": Key(1000, "total optimiser steps"),
    "train.batch_size": Key(32, "sentence pairs per step"),
    "train.lr": Key(1e-3, "base learning rate"),
    "train.lr_schedule": Key("constant", "constant | inverse_sqrt"),
    "train.warmup": Key(4000, "warm-up steps for inverse_sqrt"),
    "train.seed": Key(
        0, "seed for initialisation, shuffling, dropout and perturbation"
    ),
    "train.alpha": Key(1.0, "weight of the adversarial invariance loss"),
    "train.beta": Key(1.0, "weight of the perturbed-input likelihood loss"),
    "train.true_weight": Key(1.0, "weight of the clean-input likelihood loss"),
    "train.dev_every": Key(0, "dev BLEU every N steps (0 = never)"),
    "train.dev_beam": Key(1, "beam size for dev BLEU during training"),
    "train.checkpoint_every": Key(
        0, "write last.ckpt every N steps (0 = only at the end)"
    ),
    "train.disc_channels": Key(8, "discriminator channels per filter width"),
    "train.init_ckpt": Key("", "pretrained checkpoint that train-ast starts from"),
    # perturbation
    "perturb.kind": Key(
        "lexical", "lexical | feature | swap | replace-uniform | delete"
    ),
    "perturb.ratio": Key(0.2, "fraction of words replaced by lexical perturbation"),
    "perturb.sigma": Key(0.01, "standard deviation of the embedding noise"),
    "perturb.n_ops": Key(1, "operations per sentence for swap/replace-uniform/delete"),
    "perturb.seed": Key(0, "seed for perturb-corpus and robustness-report"),
    # evaluation
    "eval.beam": Key(10, "beam size for translate/evaluate/sweep/ablate"),
    "eval.bleu_smooth": Key(False, "add-one smoothing for 2- to 4-gram precisions"),
    "eval.sweep_kinds": Key(
        "swap,replace-uniform,delete", "corruption kinds in the sweep"
    ),
    "eval.ops": Key("0..5", "operation counts in the sweep: 'a..b' or a comma list"),
    "eval.ablation_kind": Key(
        "replace-uniform", "corruption used for the ablation's perturbed dev set"
    ),
    "eval.ablation_ops": Key(
        2, "operations per sentence for the ablation's perturbed dev set"
    ),
    "eval.seed": Key(0, "seed for evaluation corruptions"),
}

ENV_PREFIX = "AST_"


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def _coerce(key: str, value: Any) -> Any:
    kind = type(SCHEMA[key].default)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            if isinstance(value, bool) or (
                isinstance(value, float) and not value.is_integer()
            ):
                raise ValueError(value)
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def _flatten(doc: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        name = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def _check_known(keys: Iterable[str], where: str) -> None:
    for k in keys:
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r} ({where})")


def load_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(
            f"{path}: malformed config ({e.__class__.__name__})"
        ) from None
    if doc is None:
        return {}
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: config must be a mapping of keys to values")
    flat = _flatten(doc)
    _check_known(flat, str(path))
    return flat


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    k, v = item.split("=", 1)
    k = k.strip()
    _check_known([k], "--set")
    return k, v


def resolve(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    env: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Merge all sources into a complete, typed key -> value mapping."""
    env = os.environ if env is None else env
    cfg = {k: spec.default for k, spec in SCHEMA.items()}
    if path:
        cfg.update({k: _coerce(k, v) for k, v in load_file(path).items()})
    for k in SCHEMA:
        if env_name(k) in env:
            cfg[k] = _coerce(k, env[env_name(k)])
    for item in overrides:
        k, v = parse_override(item)
        cfg[k] = _coerce(k, yaml.safe_load(v) if v.strip() else "")
    return cfg


def dump(cfg: Mapping[str, Any]) -> str:
    """YAML text of a resolved config, keys in schema order."""
    return yaml.safe_dump(
        {k: cfg[k] for k in SCHEMA}, sort_keys=False, default_flow_style=False
    )


def parse_ops(text: str) -> list[int]:
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            ops = list(range(int(lo), int(hi) + 1))
        else:
            ops = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot read operation counts from {text!r}") from None
    if not ops or min(ops) < 0:
        raise ConfigError(
            f"operation counts must be a non-empty set of integers >= 0, got {text!r}"
        )
    return ops


def model_config(cfg: Mapping[str, Any], src_vocab: int, tgt_vocab: int) -> ModelConfig:
    try:
        return ModelConfig(
            src_vocab=src_vocab,
            tgt_vocab=tgt_vocab,
            emb_dim=cfg["model.emb_dim"],
            hidden_dim=cfg["model.hidden_dim"],
            layers=cfg["model.layers"],
            dropout=cfg["model.dropout"],
            max_decode_len=cfg["model.max_decode_len"],
        )
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None


def perturbation_spec(cfg: Mapping[str, Any]) -> PerturbationSpec:
    try:
        return PerturbationSpec(
            kind=cfg["perturb.kind"],
            ratio=cfg["perturb.ratio"],
            sigma=cfg["perturb.sigma"],
            n_ops=cfg["perturb.n_ops"],
            seed=cfg["perturb.seed"],
        )
    except ValueError as e:
        raise ConfigError(f"perturb: {e}") from None


def train_config(cfg: Mapping[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(
            alpha=cfg["train.alpha"],
            beta=cfg["train.beta"],
            true_weight=cfg["train.true_weight"],
            perturb=perturbation_spec(cfg),
            batch_size=cfg["train.batch_size"],
            steps=cfg["train.steps"],
            lr=cfg["train.lr"],
            lr_schedule=cfg["train.lr_schedule"],
            warmup=cfg["train.warmup"],
            seed=cfg["train.seed"],
            dev_every=cfg["train.dev_every"],
            dev_beam=cfg["train.dev_beam"],
            bleu_smooth=cfg["eval.bleu_smooth"],
            disc_channels=cfg["train.disc_channels"],
            checkpoint_every=cfg["train.checkpoint_every"],
        )
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
