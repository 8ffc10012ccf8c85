"""Adam with coupled L2 weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
# With coupled decay and no gradient the step shrinks a weight geometrically
# (factor ~ 1 - lr * decay / eps), so idle weights and their first moments
# drift toward subnormal range, where x86 arithmetic runs many times slower.
# Anything below sqrt(smallest normal) is zeroed every FLUSH_EVERY steps so
# that neither the values nor their squares in the second moment go subnormal.
FLUSH_EVERY = 8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    # scratch space reused across steps; not part of the optimizer state
    _scratch: dict[str, tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False, compare=False
    )

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
):
    """One bias-corrected Adam update, applied in place.

    ``weight_decay * theta`` is added to the gradient before the moment
    updates. Returns ``(params, state)`` for convenience.
    """
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    t = state.step
    step_size = lr / (1.0 - beta1**t)
    inv_sqrt_bc2 = 1.0 / math.sqrt(1.0 - beta2**t)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        bufs = state._scratch.get(name)
        if bufs is None or bufs[0].shape != p.shape or bufs[0].dtype != p.dtype:
            bufs = state._scratch[name] = (np.empty_like(p), np.empty_like(p))
        ge, tmp = bufs
        if weight_decay:
            np.multiply(p, weight_decay, out=ge)
            ge += g
        else:
            ge[...] = g
        m, v = state.m[name], state.v[name]
        m *= beta1
        np.multiply(ge, 1.0 - beta1, out=tmp)
        m += tmp
        v *= beta2
        np.multiply(ge, ge, out=tmp)
        tmp *= 1.0 - beta2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_bc2
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p -= tmp
        if t % FLUSH_EVERY == 0:
            for a in (p, m, v):
                _flush_subnormals(a, tmp)
    return params, state


def _flush_subnormals(a: np.ndarray, buf: np.ndarray) -> None:
    np.abs(a, out=buf)
    a[buf < math.sqrt(np.finfo(a.dtype).tiny)] = 0
