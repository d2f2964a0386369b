"""AdamW and the learning-rate schedules used by the staged trainer."""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.param = name


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr):
    """One decoupled-weight-decay Adam update.

    Only names present in ``grads`` are updated; ``params`` is not mutated and a
    new dict is returned together with the (mutated) ``state``.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = dict(params)
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p = params[name]
        if state.weight_decay:
            p = p * (1.0 - lr * state.weight_decay)
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


@dataclass(frozen=True)
class LrSchedule:
    kind: str  # "constant" | "cosine"
    peak: float
    minimum: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.minimum > self.peak:
            raise ValueError("minimum learning rate exceeds the peak")
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ValueError("bad step counts")


def warmup_steps_for(total_steps, fraction=0.05):
    return int(math.floor(fraction * total_steps))


def lr_at(schedule, step):
    """Learning rate at ``step`` in ``[0, total_steps]``.

    Warmup ramps linearly from ``minimum`` to ``peak`` so the rate never leaves
    ``[minimum, peak]``; after warmup a cosine schedule decays back to
    ``minimum`` at ``total_steps``.
    """
    if step < 0 or step > schedule.total_steps:
        warnings.warn(f"step {step} outside [0, {schedule.total_steps}]; clamped", RuntimeWarning, stacklevel=2)
        step = min(max(step, 0), schedule.total_steps)
    lo, hi = schedule.minimum, schedule.peak
    if schedule.kind == "constant" or hi == lo:
        return hi
    w = schedule.warmup_steps
    if step < w:
        return lo + (hi - lo) * step / w
    span = schedule.total_steps - w
    if span <= 0:
        return hi
    progress = (step - w) / span
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * progress))
