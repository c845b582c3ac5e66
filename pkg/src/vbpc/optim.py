"""Adam with bias correction, a plain-gradient mode, and the cosine schedule."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators per parameter block."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state, params, grads, lr):
    """One bias-corrected adaptive-moment update. Functional: returns
    (new_state, new_params) and never mutates its inputs."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state block counts differ")
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - step)
    return AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps), new_p


def sgd_step(params, grads, lr):
    """Plain gradient descent, for hand-checkable tests."""
    return [p - lr * g for p, g in zip(params, grads)]


def cosine_lr(step, total, base):
    """Single-cycle cosine decay: base at step 0, zero at step = total."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))
