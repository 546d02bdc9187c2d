"""Adamax with linear warmup, cosine decay, gradient skipping and EMA."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class LRSchedule:
    max_lr: float = 6e-4
    min_lr: float = 3e-4
    warmup_steps: int = 50
    total_steps: int = 350000

    def __call__(self, step):
        """Learning rate for the 1-based ``step``."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.max_lr * step / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        frac = min(max(step - self.warmup_steps, 0) / span, 1.0)
        return self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class SkipEvent:
    step: int
    grad_norm: float


@dataclass
class OptimizerState:
    """Per-parameter moments plus counters.

    ``step`` advances on every call (it drives the learning-rate schedule and
    logging); ``applied`` counts the updates that were actually taken and is
    the exponent used for bias correction.
    """

    m: dict
    u: dict
    ema: dict
    step: int = 0
    applied: int = 0
    skips: list = field(default_factory=list)

    @classmethod
    def create(cls, params):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            u={k: np.zeros_like(v) for k, v in params.items()},
            ema={k: v.copy() for k, v in params.items()},
        )


@dataclass
class Adamax:
    schedule: LRSchedule = field(default_factory=LRSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.9997
    skip_threshold: float = 300.0

    def step(self, params, grads, state):
        """Update ``params`` (dict of arrays) in place.

        Returns ``(applied, grad_norm, lr)``. Grads missing from ``grads`` are
        treated as zero.
        """
        state.step += 1
        lr = self.schedule(state.step)
        sq = 0.0
        for k in params:
            g = grads.get(k)
            if g is not None:
                sq += float(np.vdot(g, g))
        norm = math.sqrt(sq) if math.isfinite(sq) else float("inf")
        if not math.isfinite(norm) or norm > self.skip_threshold:
            state.skips.append(SkipEvent(state.step, norm))
            log.info("skipping step %d: grad norm %.4g", state.step, norm)
            return False, norm, lr

        state.applied += 1
        bias = 1.0 - self.beta1 ** state.applied
        d = self.ema_decay
        for k, p in params.items():
            g = grads.get(k)
            if g is not None:
                m = state.m[k]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                u = state.u[k]
                np.maximum(self.beta2 * u, np.abs(g), out=u)
                p -= (lr / bias) * m / (u + self.eps)
            e = state.ema[k]
            e *= d
            e += (1.0 - d) * p
        return True, norm, lr
