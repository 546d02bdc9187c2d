"""Information schedules and the KL reweighting that enforces them.

Each latent group i gets a target share l_i of the total KL. During training
its KL term L_i is multiplied by a stop-gradient weight lambda that is < 1
when the layer holds too little information, 1 inside the band [a_i, b_i],
and > 1 above it.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

LAMBDA_MIN = 0.1
LAMBDA_MAX = 2.0


@dataclass(frozen=True)
class InfoSchedule:
    l_target: np.ndarray

    def __post_init__(self):
        l = np.asarray(self.l_target, dtype=np.float64)
        if l.ndim != 1 or l.size == 0:
            raise ValueError("schedule must be a nonempty vector")
        if np.any(l <= 0):
            raise ValueError("schedule entries must be positive")
        if abs(l.sum() - 1.0) > 1e-9:
            raise ValueError(f"schedule must sum to 1, got {l.sum()!r}")
        object.__setattr__(self, "l_target", l)

    def __len__(self):
        return self.l_target.size

    @classmethod
    def from_raw(cls, raw):
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw / raw.sum())

    def cumulative(self):
        return np.cumsum(self.l_target)


@dataclass(frozen=True)
class KlTargets:
    a: np.ndarray
    b: np.ndarray


def geometric_schedule(n, A=1000.0, B=10.0):
    """raw_i = A^((i-1)/(n-1)) + B for i = 1..n, normalized.

    Geometric from 1 to A plus a constant, so l_n / l_1 = (A + B) / (1 + B).
    """
    if n < 2:
        raise ValueError(f"geometric schedule needs at least 2 layers, got {n}")
    if A <= 1:
        raise ValueError(f"A must exceed 1, got {A}")
    if B < 0:
        raise ValueError(f"B must be nonnegative, got {B}")
    raw = np.power(float(A), np.arange(n) / (n - 1)) + B
    return InfoSchedule.from_raw(raw)


def resolution_schedule(group_resolutions):
    """Targets proportional to each group's side length."""
    res = np.asarray(group_resolutions, dtype=np.float64)
    if res.size == 0 or np.any(res <= 0):
        raise ValueError("resolutions must be a nonempty list of positive sides")
    return InfoSchedule.from_raw(res)


def uniform_schedule(n):
    return InfoSchedule(np.full(n, 1.0 / n))


def kl_targets(schedule, total_kl):
    """Band [a_i, b_i] = [2/3, 4/3] * l_i * total_kl."""
    if total_kl < 0:
        raise ValueError(f"total KL must be nonnegative, got {total_kl}")
    share = schedule.l_target * float(total_kl)
    return KlTargets(a=(2.0 / 3.0) * share, b=(4.0 / 3.0) * share)


def kl_weight(L, a, b):
    """Piecewise-linear weight in [0.1, 2]; 1 inside [a, b]."""
    if L < a:
        lam = max(L / a, LAMBDA_MIN)
    elif L <= b:
        lam = 1.0
    else:
        lam = 1.0 + min((L - b) / a, 1.0)
    return min(max(lam, LAMBDA_MIN), LAMBDA_MAX)


def kl_weights(layer_kls, schedule):
    """lambda for every layer given plain-float KLs (nats)."""
    L = np.asarray(layer_kls, dtype=np.float64)
    if L.size != len(schedule):
        raise ValueError(f"{L.size} layer KLs for a schedule of length {len(schedule)}")
    total = float(L.sum())
    if total <= 0:
        return np.ones(L.size)
    t = kl_targets(schedule, total)
    return np.array([kl_weight(li, ai, bi) for li, ai, bi in zip(L, t.a, t.b)])


def weighted_kl_loss(layer_kls, schedule, lambdas=None):
    """sum_i lambda_i * L_i with lambda computed on detached values.

    ``layer_kls`` is a sequence of scalar Tensors (a LatentTrace's ``kl``
    list is accepted too). ``schedule=None`` means lambda = 1. Returns
    ``(loss, lambdas)``.
    """
    layer_kls = list(getattr(layer_kls, "kl", layer_kls))
    if lambdas is None:
        if schedule is None:
            lambdas = np.ones(len(layer_kls))
        else:
            lambdas = kl_weights([float(T.stop_gradient(k).data) for k in layer_kls], schedule)
    elif len(lambdas) != len(layer_kls):
        raise ValueError(f"{len(lambdas)} weights for {len(layer_kls)} layers")
    loss = None
    for lam, kl in zip(lambdas, layer_kls):
        term = kl * float(lam)
        loss = term if loss is None else loss + term
    return loss, np.asarray(lambdas, dtype=np.float64)


def schedule_table(schedule, resolutions=None):
    """Plain-text preview: layer, resolution, l_target, cumulative fraction."""
    rows = ["layer\tresolution\tl_target\tcumulative"]
    cum = schedule.cumulative()
    for i, (l, c) in enumerate(zip(schedule.l_target, cum)):
        res = "-" if resolutions is None else str(resolutions[i])
        rows.append(f"{i + 1}\t{res}\t{l:.6g}\t{c:.6g}")
    return "\n".join(rows) + "\n"
