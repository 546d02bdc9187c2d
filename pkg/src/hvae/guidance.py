"""Classifier-free guided sampling with conditional and unconditional paths.

Both paths share every weight; the unconditional one is fed the null label.
At each stochastic layer one z is drawn from the guided distribution,
projected once, and added to both hidden states.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .distributions import DiagGaussian, to_grid, to_levels, guided_extrapolate, guided_product, reparam_sample
from .model import GeneratorState
from .tensor import NonFiniteError


@dataclass(frozen=True)
class GuidanceWeights:
    w_mu: float = 0.0
    w_sigma: float = 0.0

    def __post_init__(self):
        for name in ("w_mu", "w_sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @property
    def is_zero(self):
        return self.w_mu == 0 and self.w_sigma == 0


MODES = ("extrapolate", "product")


def _product_or_extrapolate(cond, uncond, weights):
    """Product-form guidance with weight ``w_mu``; falls back per element."""
    ext = guided_extrapolate(cond, uncond, weights.w_mu, weights.w_sigma)
    prod = guided_product(cond, uncond, weights.w_mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(prod.valid, prod.mean, ext.mean.data)
        logvar = np.where(prod.valid, np.log(prod.var), ext.logvar.data)
    return DiagGaussian(mean, logvar), int((~prod.valid).sum())


def guided_layer_step(model, state, label, weights, rng, temp=1.0, mode="extrapolate"):
    """Advance both paths of ``state`` through one stochastic layer."""
    if not state.guided:
        raise ValueError("guided_layer_step needs a dual-path state (start_state(..., guided=True))")
    i = state.layer
    null = model.null_label(state.h_c.shape[0])
    h_c = model.enter_layer(i, state.h_c)
    h_u = model.enter_layer(i, state.h_u)
    p_c, resid_c = model.prior_step(i, h_c, label)
    p_u, resid_u = model.prior_step(i, h_u, null)
    fallbacks = 0
    if mode == "extrapolate":
        g = guided_extrapolate(p_c, p_u, weights.w_mu, weights.w_sigma)
    elif mode == "product":
        g, fallbacks = _product_or_extrapolate(p_c, p_u, weights)
    else:
        raise ValueError(f"unknown guidance mode {mode!r}; choose from {MODES}")
    saturated = state.saturated + g.saturated
    if not (np.all(np.isfinite(g.mean.data)) and np.all(np.isfinite(g.logvar.data))):
        raise NonFiniteError(f"non-finite guided parameters at stochastic layer {i} "
                             f"({saturated} clamped elements so far)")
    z = reparam_sample(g, rng.standard_normal(g.shape), temp)
    inj = model.project_z(i, z)
    h_c = model.trailing(i, h_c + resid_c + inj, label)
    h_u = model.trailing(i, h_u + resid_u + inj, null)
    model._check_finite(i, h_c)
    model._check_finite(i, h_u)
    return GeneratorState(
        h_c=h_c, h_u=h_u, layer=i + 1, saturated=saturated,
        fallbacks=state.fallbacks + fallbacks,
        injections=state.injections + [inj.data],
    )


def guided_sample(model, n, label, weights, temps=1.0, output_temp=0.0, rng=None,
                  mode="extrapolate", return_state=False):
    """Guided class-conditional samples, (n, C, H, W) in [-1, 1].

    With zero weights in extrapolate mode this reproduces
    ``model.prior_sample(n, label, temps, output_temp, rng)`` bit for bit.
    """
    cfg = model.config
    if not cfg.num_classes:
        raise ValueError("guidance needs a class-conditional model")
    if cfg.label_drop_prob == 0:
        warnings.warn("model was trained without label dropout; the unconditional path is untrained",
                      RuntimeWarning, stacklevel=2)
    if not isinstance(weights, GuidanceWeights):
        weights = GuidanceWeights(*weights)
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,))
    if np.any(label == cfg.num_classes):
        raise ValueError("the null label cannot be a guidance target")
    label = model._check_label(label, n, allow_null=False)
    rng = np.random.default_rng() if rng is None else rng
    temps = model._temps(temps)
    state = model.start_state(n, guided=True)
    for t in temps:
        state = guided_layer_step(model, state, label, weights, rng, t, mode)
    img = model.render(model.decode(model.finish(state.h_c)), rng, output_temp)
    return (img, state) if return_state else img


def _class_agreement(model, images, label, rng):
    # fraction of samples whose class-conditional ELBO is highest for the target label
    n = images.shape[0]
    images = to_grid(to_levels(images))
    scores = []
    for c in range(model.config.num_classes):
        res = model.elbo(images, np.full(n, c), np.random.default_rng(rng.integers(2**63)))
        scores.append(-res.total_nats)
    return float(np.mean(np.argmax(np.stack(scores), axis=0) == label))


def sweep(model, w_mus, w_sigmas, n_per_class=4, temps=1.0, seed=0, mode="extrapolate"):
    """Run the (w_mu, w_sigma) grid; one row of metrics per cell.

    Metrics: ``class_agreement`` (the model's own ELBO classifier agrees with
    the target label), ``diversity`` (mean per-pixel std across samples of
    the same class, [0, 255] scale), and ``saturation`` (clamped elements).
    """
    K = model.config.num_classes
    if not K:
        raise ValueError("sweep needs a class-conditional model")
    label = np.repeat(np.arange(K), n_per_class)
    n = label.size
    rows = []
    for w_mu in w_mus:
        for w_sigma in w_sigmas:
            rng = np.random.default_rng(seed)
            img, state = guided_sample(model, n, label, GuidanceWeights(w_mu, w_sigma), temps, 0.0,
                                       rng, mode=mode, return_state=True)
            px = (img + 1.0) * 127.5
            div = float(np.mean([px[label == c].std(axis=0).mean() for c in range(K)]))
            rows.append({
                "w_mu": float(w_mu),
                "w_sigma": float(w_sigma),
                "class_agreement": _class_agreement(model, img, label, rng),
                "diversity": div,
                "saturation": state.saturated,
            })
    return rows
