"""Adagrad, plateau learning-rate decay, and EMA shadow parameters.

All three are plain dict-of-ndarray state machines owned by the training
loop. None of them allocate per step beyond the gradient-sized temporaries.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .ctc import InvalidConfigError, InvalidInputError
from .model import ModelState


@dataclass
class AdagradState:
    lr: float
    eps: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    rejected_steps: int = 0

    @classmethod
    def for_model(cls, m: ModelState, lr: float, eps: float = 1e-8) -> "AdagradState":
        if lr <= 0:
            raise InvalidConfigError(f"lr must be > 0, got {lr}")
        acc = {name: np.zeros_like(p) for name, p in m.params.items()}
        return cls(lr=lr, eps=eps, accumulators=acc)


def adagrad_step(m: ModelState, grads: dict[str, np.ndarray], state: AdagradState) -> bool:
    """One accumulate-and-update step. Returns False on a rejected step.

    A non-finite gradient anywhere rejects the whole step: parameters and
    accumulators stay untouched and the rejection is counted.
    """
    if set(grads) != set(m.params):
        raise InvalidInputError("gradient names do not match parameter names")
    for name, g in grads.items():
        if g.shape != m.params[name].shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            state.rejected_steps += 1
            return False
    for name, g in grads.items():
        acc = state.accumulators[name]
        acc += g * g
        m.params[name] -= state.lr * g / (np.sqrt(acc) + state.eps)
    return True


@dataclass
class PlateauScheduler:
    """Halve the learning rate when the dev metric stops improving.

    An evaluation counts as an improvement only if it beats the best seen
    so far by more than min_delta. After `patience` non-improving
    evaluations in a row the lr halves and the counter resets (the best
    value is kept, so a later halving needs fresh stagnation, not a fresh
    best).
    """

    patience: int = 3
    min_delta: float = 1e-4
    best_metric: float = float("inf")
    evals_since_best: int = 0
    num_halvings: int = 0
    factor: float = 2.0

    def update(self, opt: AdagradState, dev_metric: float) -> float:
        if not np.isfinite(dev_metric):
            raise InvalidInputError(f"dev metric must be finite, got {dev_metric}")
        if dev_metric < self.best_metric - self.min_delta:
            self.best_metric = dev_metric
            self.evals_since_best = 0
        else:
            self.evals_since_best += 1
            if self.evals_since_best >= self.patience:
                opt.lr /= self.factor
                self.num_halvings += 1
                self.evals_since_best = 0
        return opt.lr


def plateau_update(sched: PlateauScheduler, opt: AdagradState, dev_metric: float) -> float:
    return sched.update(opt, dev_metric)


@dataclass
class EmaState:
    decay: float
    shadow: dict[str, np.ndarray]

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise InvalidConfigError(f"EMA decay must be in [0, 1), got {self.decay}")

    @classmethod
    def for_model(cls, m: ModelState, decay: float = 0.999) -> "EmaState":
        """Shadow starts as a copy of the current parameters."""
        return cls(decay=decay, shadow={n: p.copy() for n, p in m.params.items()})


def ema_update(ema: EmaState, m: ModelState) -> None:
    if set(ema.shadow) != set(m.params):
        raise InvalidInputError("EMA shadow names do not match parameter names")
    d = ema.decay
    for name, p in m.params.items():
        s = ema.shadow[name]
        if s.shape != p.shape:
            raise InvalidInputError(f"EMA shadow shape mismatch for {name}")
        s *= d
        s += (1.0 - d) * p


@contextmanager
def ema_swap_for_inference(ema: EmaState, m: ModelState):
    """Expose shadow parameters on the model for eval-mode forwards.

    The live parameters are restored on exit; do not run an optimizer step
    while the swap is held.
    """
    saved = m.params
    m.params = ema.shadow
    try:
        yield m
    finally:
        m.params = saved
