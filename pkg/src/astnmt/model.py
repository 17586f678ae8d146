"""Attention-based two-layer GRU encoder-decoder with tied target embeddings.

GRU cell (used everywhere), with LN(.) a layer norm over the 3H gate block::

    xp = LN_x(x W + b)        hp = LN_h(h U)
    r  = sigmoid(xp_r + hp_r) z  = sigmoid(xp_z + hp_z)
    n  = tanh(xp_n + r * hp_n)
    h' = (1 - z) * n + z * h

Padded steps carry the previous state forward unchanged.

Encoder: layer 1 is a bidirectional GRU whose concatenated states are
projected back to H; layer 2 is a forward GRU whose output is added to the
layer-1 output (residual). Decoder: layer 1 reads the previous target
embedding, attends over the encoder states with its new state, layer 2 reads
[layer-1 state; context] and adds its output to the layer-1 state. The output
feature tanh([out2; context] W_o + b_o) is scored against the target
embedding matrix itself.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, ops
from .data import Batch
from .rng import stream


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    emb_dim: int = 32
    hidden_dim: int = 32
    layers: int = 2
    dropout: float = 0.1
    max_decode_len: int = 60

    def __post_init__(self):
        if min(self.src_vocab, self.tgt_vocab, self.emb_dim, self.hidden_dim) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.layers != 2:
            raise ValueError("the architecture is fixed at two layers")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderStates:
    H: Tensor  # (B, S, H), zero on padding
    mask: np.ndarray  # (B, S)
    proj: Tensor | None = None  # attention key projection, filled lazily

    def __len__(self) -> int:
        return self.H.shape[1]


@dataclass
class DecoderState:
    layers: list[Tensor]  # one (B, H) state per layer
    step: int = 0


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def _gru_params(rng, prefix: str, n_in: int, h: int) -> dict[str, Tensor]:
    s_in = np.sqrt(6.0 / (n_in + h))
    s_h = np.sqrt(6.0 / (2 * h))
    return {
        f"{prefix}.W": Tensor(_uniform(rng, (n_in, 3 * h), s_in), True),
        f"{prefix}.b": Tensor(np.zeros(3 * h), True),
        f"{prefix}.U": Tensor(_uniform(rng, (h, 3 * h), s_h), True),
        f"{prefix}.lnx_g": Tensor(np.ones(3 * h), True),
        f"{prefix}.lnx_b": Tensor(np.zeros(3 * h), True),
        f"{prefix}.lnh_g": Tensor(np.ones(3 * h), True),
        f"{prefix}.lnh_b": Tensor(np.zeros(3 * h), True),
    }


def init_params(cfg: ModelConfig, seed: int) -> OrderedDict[str, Tensor]:
    rng = stream(seed, "model-init")
    E, H = cfg.emb_dim, cfg.hidden_dim
    p: OrderedDict[str, Tensor] = OrderedDict()
    p["enc.src_emb"] = Tensor(_uniform(rng, (cfg.src_vocab, E), 0.1), True)
    p.update(_gru_params(rng, "enc.fwd", E, H))
    p.update(_gru_params(rng, "enc.bwd", E, H))
    p["enc.proj.W"] = Tensor(_uniform(rng, (2 * H, H), np.sqrt(6.0 / (3 * H))), True)
    p["enc.proj.b"] = Tensor(np.zeros(H), True)
    p.update(_gru_params(rng, "enc.l2", H, H))
    p["dec.tgt_emb"] = Tensor(_uniform(rng, (cfg.tgt_vocab, E), 0.1), True)
    p["dec.init.W"] = Tensor(_uniform(rng, (H, 2 * H), np.sqrt(6.0 / (3 * H))), True)
    p["dec.init.b"] = Tensor(np.zeros(2 * H), True)
    p.update(_gru_params(rng, "dec.l1", E, H))
    p["dec.att.Wh"] = Tensor(_uniform(rng, (H, H), np.sqrt(3.0 / H)), True)
    p["dec.att.Ws"] = Tensor(_uniform(rng, (H, H), np.sqrt(3.0 / H)), True)
    p["dec.att.b"] = Tensor(np.zeros(H), True)
    p["dec.att.v"] = Tensor(_uniform(rng, (H, 1), np.sqrt(3.0 / H)), True)
    p.update(_gru_params(rng, "dec.l2", 2 * H, H))
    p["dec.out.W"] = Tensor(_uniform(rng, (2 * H, E), np.sqrt(6.0 / (2 * H + E))), True)
    p["dec.out.b"] = Tensor(np.zeros(E), True)
    p["dec.out_bias"] = Tensor(np.zeros(cfg.tgt_vocab), True)
    return p


def clone_params(params) -> OrderedDict[str, Tensor]:
    return OrderedDict(
        (k, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        for k, t in params.items()
    )


class Seq2Seq:
    """Parameters plus the forward computations; all methods are tape-agnostic."""

    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def clone(self) -> Seq2Seq:
        return Seq2Seq(self.cfg, params=clone_params(self.params))

    # building blocks ----------------------------------------------------------------

    def _gru_inputs(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return ops.layer_norm(
            x @ p[f"{prefix}.W"] + p[f"{prefix}.b"],
            p[f"{prefix}.lnx_g"],
            p[f"{prefix}.lnx_b"],
        )

    def _gru_cell(
        self, prefix: str, xp: Tensor, h: Tensor, m: np.ndarray | None = None
    ) -> Tensor:
        p = self.params
        Hd = self.cfg.hidden_dim
        hp = ops.layer_norm(
            h @ p[f"{prefix}.U"], p[f"{prefix}.lnh_g"], p[f"{prefix}.lnh_b"]
        )
        rz = ops.sigmoid(xp[:, : 2 * Hd] + hp[:, : 2 * Hd])
        r, z = rz[:, :Hd], rz[:, Hd:]
        n = ops.tanh(xp[:, 2 * Hd :] + r * hp[:, 2 * Hd :])
        h_new = n + z * (h - n)
        if m is None:
            return h_new
        return h + m * (h_new - h)

    def _gru_sequence(
        self, prefix: str, x: Tensor, mask: np.ndarray, reverse: bool = False
    ) -> Tensor:
        B, S = mask.shape
        xp = self._gru_inputs(prefix, x)
        h = Tensor(np.zeros((B, self.cfg.hidden_dim)))
        outs: list[Tensor | None] = [None] * S
        steps = range(S - 1, -1, -1) if reverse else range(S)
        for t in steps:
            h = self._gru_cell(prefix, xp[:, t, :], h, mask[:, t : t + 1])
            outs[t] = h
        return ops.stack(outs, axis=1)

    # encoder ----------------------------------------------------------------------------

    def embed_source(self, src: np.ndarray) -> Tensor:
        return ops.embedding(self.params["enc.src_emb"], src)

    def encode(
        self,
        src: np.ndarray,
        mask: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> EncoderStates:
        return self.encode_embedded(self.embed_source(src), mask, train, rng)

    def encode_embedded(
        self,
        emb: Tensor,
        mask: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> EncoderStates:
        """Encode (B, S, E) source vectors; ``mask`` is (B, S) with 1 on real tokens."""
        mask = np.asarray(mask, dtype=float)
        if mask.ndim != 2 or mask.shape[1] == 0 or not mask.any(axis=1).all():
            raise ValueError("encode: empty source sentence")
        p, rate = self.params, self.cfg.dropout
        x = ops.dropout(emb, rate, rng, train)
        fwd = self._gru_sequence("enc.fwd", x, mask)
        bwd = self._gru_sequence("enc.bwd", x, mask, reverse=True)
        l1 = ops.concat([fwd, bwd], axis=-1) @ p["enc.proj.W"] + p["enc.proj.b"]
        l1 = ops.dropout(l1, rate, rng, train)
        l2 = self._gru_sequence("enc.l2", l1, mask)
        H = (l2 + l1) * mask[:, :, None]
        return EncoderStates(H, mask)

    # decoder -------------------------------------------------------------------------------

    def init_state(self, enc: EncoderStates) -> DecoderState:
        p, Hd = self.params, self.cfg.hidden_dim
        lengths = enc.mask.sum(axis=1, keepdims=True)
        pooled = ops.sum_(enc.H, axis=1) * (1.0 / lengths)
        s0 = ops.tanh(pooled @ p["dec.init.W"] + p["dec.init.b"])
        return DecoderState([s0[:, :Hd], s0[:, Hd:]], 0)

    def attention(self, s: Tensor, enc: EncoderStates) -> tuple[Tensor, Tensor]:
        """Additive attention; returns (context (B, H), weights (B, S))."""
        p = self.params
        if enc.proj is None:
            enc.proj = enc.H @ p["dec.att.Wh"] + p["dec.att.b"]
        B, S, Hd = enc.H.shape
        q = ops.reshape(s @ p["dec.att.Ws"], (B, 1, Hd))
        scores = ops.reshape(ops.tanh(enc.proj + q) @ p["dec.att.v"], (B, S))
        weights = ops.softmax(scores, axis=-1, mask=enc.mask > 0)
        ctx = ops.reshape(ops.reshape(weights, (B, 1, S)) @ enc.H, (B, Hd))
        return ctx, weights

    def _step_feature(
        self, prev_emb: Tensor, state: DecoderState, enc: EncoderStates
    ) -> tuple[Tensor, DecoderState]:
        p = self.params
        s1 = self._gru_cell(
            "dec.l1", self._gru_inputs("dec.l1", prev_emb), state.layers[0]
        )
        ctx, _ = self.attention(s1, enc)
        s2 = self._gru_cell(
            "dec.l2",
            self._gru_inputs("dec.l2", ops.concat([s1, ctx], axis=-1)),
            state.layers[1],
        )
        out2 = s2 + s1
        feat = ops.tanh(
            ops.concat([out2, ctx], axis=-1) @ p["dec.out.W"] + p["dec.out.b"]
        )
        return feat, DecoderState([s1, s2], state.step + 1)

    def output_logits(self, feat: Tensor) -> Tensor:
        p = self.params
        return feat @ p["dec.tgt_emb"].T + p["dec.out_bias"]

    def decode_step(
        self,
        prev_tokens: np.ndarray,
        state: DecoderState,
        enc: EncoderStates,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, DecoderState]:
        """One decoder step from previous tokens (B,) to next-token logits (B, V)."""
        emb = ops.dropout(
            ops.embedding(self.params["dec.tgt_emb"], prev_tokens),
            self.cfg.dropout,
            rng,
            train,
        )
        feat, state = self._step_feature(emb, state, enc)
        feat = ops.dropout(feat, self.cfg.dropout, rng, train)
        return self.output_logits(feat), state

    def teacher_forced_logits(
        self,
        enc: EncoderStates,
        tgt_in: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        rate = self.cfg.dropout
        emb = ops.dropout(
            ops.embedding(self.params["dec.tgt_emb"], tgt_in), rate, rng, train
        )
        state = self.init_state(enc)
        feats = []
        for t in range(tgt_in.shape[1]):
            feat, state = self._step_feature(emb[:, t, :], state, enc)
            feats.append(feat)
        feats = ops.dropout(ops.stack(feats, axis=1), rate, rng, train)
        return self.output_logits(feats)

    def nll_from_states(
        self,
        enc: EncoderStates,
        batch: Batch,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Sum over steps, mean over sentences, of -log P(y_n | y_<n, x)."""
        logits = self.teacher_forced_logits(enc, batch.tgt_in, train, rng)
        total = ops.categorical_cross_entropy(logits, batch.tgt_out, batch.tgt_mask)
        return total * (1.0 / len(batch))

    def sentence_nll(
        self,
        batch: Batch,
        train: bool = False,
        rng: np.random.Generator | None = None,
        embedded: Tensor | None = None,
    ) -> Tensor:
        """Batch NLL from source ids, or from pre-embedded source vectors if given."""
        if embedded is None:
            enc = self.encode(batch.src, batch.src_mask, train, rng)
        else:
            enc = self.encode_embedded(embedded, batch.src_mask, train, rng)
        return self.nll_from_states(enc, batch, train, rng)

    def step_log_probs(self, batch: Batch) -> np.ndarray:
        """Per-step log-probabilities of the reference labels, (B, T), zero on padding."""
        enc = self.encode(batch.src, batch.src_mask)
        logits = self.teacher_forced_logits(enc, batch.tgt_in).data
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
        return picked * batch.tgt_mask
