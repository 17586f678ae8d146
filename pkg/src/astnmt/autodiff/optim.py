"""Adam with bias correction; the learning rate is supplied by the caller per step."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "adam/t": np.array(self.t),
            "adam/hyper": np.array([self.beta1, self.beta2, self.eps]),
        }
        for k, a in self.m.items():
            out[f"adam/m/{k}"] = a
        for k, a in self.v.items():
            out[f"adam/v/{k}"] = a
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> AdamState:
        b1, b2, eps = (float(x) for x in arrays["adam/hyper"])
        st = cls(beta1=b1, beta2=b2, eps=eps, t=int(arrays["adam/t"]))
        for k, a in arrays.items():
            if k.startswith("adam/m/"):
                st.m[k[len("adam/m/") :]] = np.array(a)
            elif k.startswith("adam/v/"):
                st.v[k[len("adam/v/") :]] = np.array(a)
        return st


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> AdamState:
    """Apply one Adam update in place to every parameter holding a ``.grad``.

    Parameters without a gradient are skipped and a warning is recorded on the
    state. The step counter advances once per call.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            msg = f"step {t}: no gradient for {name}, skipped"
            state.warnings.append(msg)
            log.warning(msg)
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
