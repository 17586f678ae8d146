"""CNN discriminator over encoder state sequences and the adversarial loss."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .model import EncoderStates
from .rng import stream

WIDTHS = (3, 4, 5)


@dataclass
class AdversarialTerms:
    total: Tensor  # clean term + noisy term
    clean_term: Tensor  # mean -log D(H_x)
    noisy_term: Tensor  # mean -log(1 - D(H_x'))
    d_clean: np.ndarray
    d_noisy: np.ndarray

    @property
    def accuracy(self) -> float:
        return discriminator_accuracy(self.d_clean, self.d_noisy)


class Discriminator:
    def __init__(self, hidden_dim: int, channels: int = 8, seed: int = 0, params=None):
        self.hidden_dim = hidden_dim
        self.channels = channels
        self.params = (
            params
            if params is not None
            else self.init_params(hidden_dim, channels, seed)
        )
        missing = [w for w in WIDTHS if f"dis.conv{w}.W" not in self.params]
        if missing:
            raise ValueError(f"discriminator params lack filter widths {missing}")

    @staticmethod
    def init_params(
        hidden_dim: int, channels: int, seed: int
    ) -> OrderedDict[str, Tensor]:
        """Small uniform filters and a zero output layer, so D starts at exactly 0.5."""
        rng = stream(seed, "dis-init")
        p: OrderedDict[str, Tensor] = OrderedDict()
        for w in WIDTHS:
            scale = 1.0 / np.sqrt(w * hidden_dim)
            p[f"dis.conv{w}.W"] = Tensor(
                rng.uniform(-scale, scale, (w, hidden_dim, channels)), True
            )
            p[f"dis.conv{w}.b"] = Tensor(np.zeros(channels), True)
        p["dis.out.W"] = Tensor(np.zeros((len(WIDTHS) * channels, 1)), True)
        p["dis.out.b"] = Tensor(np.zeros(1), True)
        return p

    def __call__(self, H: Tensor, mask: np.ndarray) -> Tensor:
        return self.discriminate(H, mask)

    def discriminate(self, H: Tensor, mask: np.ndarray) -> Tensor:
        """Probability (B,) that each state sequence came from a clean input.

        Sequences shorter than the widest filter are zero-padded; windows that
        reach past a sentence's real length are left out of the max pool unless
        the sentence is shorter than the window itself.
        """
        p = self.params
        mask = np.asarray(mask, dtype=float)
        B, S = mask.shape
        need = max(WIDTHS)
        H = H * mask[:, :, None]  # padding never leaks into a window
        if S < need:
            H = ops.concat([H, np.zeros((B, need - S, H.shape[2]))], axis=1)
            S = need
        lengths = mask.sum(axis=1).astype(int)
        pooled = []
        for w in WIDTHS:
            fmap = ops.relu(ops.conv1d(H, p[f"dis.conv{w}.W"], p[f"dis.conv{w}.b"]))
            starts = np.arange(S - w + 1)
            valid = starts[None, :] + w <= np.maximum(lengths, w)[:, None]
            pooled.append(ops.max_over_time(fmap, valid))
        logit = ops.concat(pooled, axis=-1) @ p["dis.out.W"] + p["dis.out.b"]
        # float64 sigmoid rounds to exactly 0 or 1 for large logits; keep it strictly inside
        prob = ops.sigmoid(ops.reshape(logit, (B,)))
        return ops.clip(prob, ops.PROB_CLAMP, 1.0 - ops.PROB_CLAMP)


def adversarial_loss(
    clean: EncoderStates,
    noisy: EncoderStates,
    disc: Discriminator,
    reverse: bool = True,
) -> AdversarialTerms:
    """Mean -log D(H_x) + mean -log(1 - D(H_x')).

    Both state sequences pass through a gradient-reversal gate before the
    discriminator, so one minimisation step trains the discriminator on this
    loss while the encoder receives the sign-flipped gradient. ``reverse=False``
    skips the gate (used to check the reversal itself).
    """
    gate = ops.grad_reverse if reverse else (lambda t: t)
    d_clean = disc(gate(clean.H), clean.mask)
    d_noisy = disc(gate(noisy.H), noisy.mask)
    clean_term = ops.binary_cross_entropy(d_clean, 1.0)
    noisy_term = ops.binary_cross_entropy(d_noisy, 0.0)
    return AdversarialTerms(
        clean_term + noisy_term,
        clean_term,
        noisy_term,
        d_clean.data.copy(),
        d_noisy.data.copy(),
    )


def discriminator_accuracy(d_clean: np.ndarray, d_noisy: np.ndarray) -> float:
    """Fraction of correct calls: clean scored > 0.5 and perturbed scored < 0.5.

    A score of exactly 0.5 counts as half a hit, so an indifferent
    discriminator scores 0.5.
    """
    c, n = np.asarray(d_clean), np.asarray(d_noisy)
    hits = (
        np.sum(c > 0.5) + np.sum(n < 0.5) + 0.5 * (np.sum(c == 0.5) + np.sum(n == 0.5))
    )
    return float(hits) / (c.size + n.size)
