"""Versioned checkpoint container.

Layout: 8-byte magic, little-endian uint32 format version, then an ``.npz``
archive holding every named tensor plus a JSON metadata string.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .data import Vocabulary
from .discriminator import Discriminator
from .model import ModelConfig, Seq2Seq, init_params

MAGIC = b"ASTNMTCK"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    model: Seq2Seq
    step: int = 0
    adam: AdamState | None = None
    disc: Discriminator | None = None
    src_vocab: Vocabulary | None = None
    tgt_vocab: Vocabulary | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically: a crash mid-write never clobbers an existing file."""
    path = Path(path)
    arrays = {f"param/{k}": t.data for k, t in ckpt.model.params.items()}
    if ckpt.disc is not None:
        arrays.update({f"param/{k}": t.data for k, t in ckpt.disc.params.items()})
    if ckpt.adam is not None:
        arrays.update(ckpt.adam.to_arrays())
    meta = {
        "model_config": ckpt.model.cfg.to_dict(),
        "step": ckpt.step,
        "disc_channels": None if ckpt.disc is None else ckpt.disc.channels,
        "src_vocab": None if ckpt.src_vocab is None else ckpt.src_vocab.itos,
        "tgt_vocab": None if ckpt.tgt_vocab is None else ckpt.tgt_vocab.itos,
        "extra": ckpt.meta,
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<I", VERSION) + buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(
            f"{path}: cannot read checkpoint ({e.strerror})"
        ) from None
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(
            f"{path}: not a checkpoint (bad magic header; expected format version {VERSION})"
        )
    (version,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {VERSION}"
        )
    try:
        with np.load(io.BytesIO(raw[len(MAGIC) + 4 :]), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(str(arrays.pop("meta")))
    except Exception as e:  # noqa: BLE001 - any decode failure means a damaged file
        raise CheckpointError(f"{path}: damaged checkpoint payload ({e})") from None

    cfg = ModelConfig(**meta["model_config"])
    if expect is not None and expect != cfg:
        raise CheckpointError(
            f"{path}: model config {cfg} does not match expected {expect}"
        )

    reference = init_params(cfg, seed=0)
    params = {}
    for name, ref in reference.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[key].shape != ref.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arrays[key].shape}, config implies {ref.shape}"
            )
        params[name] = Tensor(arrays[key].copy(), requires_grad=True)
    model = Seq2Seq(cfg, params=type(reference)(params))

    disc = None
    if meta.get("disc_channels"):
        dparams = type(reference)(
            (k[len("param/") :], Tensor(a.copy(), requires_grad=True))
            for k, a in arrays.items()
            if k.startswith("param/dis.")
        )
        disc = Discriminator(cfg.hidden_dim, meta["disc_channels"], params=dparams)
        expected = Discriminator.init_params(cfg.hidden_dim, meta["disc_channels"], 0)
        for name, ref in expected.items():
            if name not in dparams or dparams[name].shape != ref.shape:
                raise CheckpointError(
                    f"{path}: discriminator tensor {name} missing or mis-shaped"
                )

    adam = AdamState.from_arrays(arrays) if "adam/t" in arrays else None
    vocab = lambda itos: None if itos is None else Vocabulary(list(itos))
    return Checkpoint(
        model=model,
        step=int(meta["step"]),
        adam=adam,
        disc=disc,
        src_vocab=vocab(meta.get("src_vocab")),
        tgt_vocab=vocab(meta.get("tgt_vocab")),
        meta=meta.get("extra", {}),
    )
