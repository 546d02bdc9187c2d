"""Diagonal Gaussians, reconstruction likelihoods and guidance math.

Everything here works on :class:`~hvae.tensor.Tensor` so it can sit inside a
recorded graph; plain arrays are accepted and wrapped.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

LOGVAR_MIN = -20.0
LOGVAR_MAX = 10.0
MASS_FLOOR = 1e-12
NUM_LEVELS = 256
DMOL_LOG_SCALE_MIN = -7.0


class DiagGaussian:
    """N(mean, diag(exp(logvar))) with logvar clamped to [-20, 10].

    ``saturated`` counts the elements the clamp touched.
    """

    __slots__ = ("mean", "logvar", "saturated")

    def __init__(self, mean, logvar):
        mean, logvar = as_tensor(mean), as_tensor(logvar)
        if mean.shape != logvar.shape:
            raise ShapeError(f"DiagGaussian: mean {mean.shape} vs logvar {logvar.shape}")
        lv = logvar.data
        self.saturated = int(np.count_nonzero(~((lv >= LOGVAR_MIN) & (lv <= LOGVAR_MAX))))
        if self.saturated:
            logvar = T.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
        self.mean = mean
        self.logvar = logvar

    @classmethod
    def from_softplus(cls, mean, pre_variance):
        """Variance parameterized as softplus(pre_variance)."""
        return cls(mean, T.log(T.softplus(pre_variance)))

    @property
    def shape(self):
        return self.mean.shape

    @property
    def var(self):
        return np.exp(self.logvar.data)

    @property
    def std(self):
        return np.exp(0.5 * self.logvar.data)

    def __repr__(self):
        return f"DiagGaussian(shape={self.shape})"


def _check_pair(kind, q, p):
    if q.shape != p.shape:
        raise ShapeError(f"{kind}: shapes {q.shape} and {p.shape}")


def kl_diag(q, p):
    """Elementwise KL(q || p) in nats."""
    _check_pair("kl_diag", q, p)
    diff = q.mean - p.mean
    ratio = T.exp(q.logvar - p.logvar)
    return 0.5 * (p.logvar - q.logvar) + 0.5 * (ratio + T.square(diff) * T.exp(-p.logvar)) - 0.5


def reparam_sample(d, noise, temperature=1.0):
    """mean + temperature * std * noise; temperature 0 returns the mean."""
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != d.shape:
        raise ShapeError(f"reparam_sample: noise {noise.shape} vs distribution {d.shape}")
    if temperature == 0:
        return d.mean
    scale = T.exp(0.5 * d.logvar)
    if temperature != 1:
        scale = scale * temperature
    return d.mean + scale * noise


# --------------------------------------------------------------------------
# output layer


@dataclass
class OutputDistribution:
    """Parameters of p(x|z).

    gaussian: ``mean`` and ``logvar``, each (B, C, H, W).
    dmol: ``logits`` (B, K, H, W) and per-channel lists ``means``,
    ``log_scales`` of (B, K, H, W) plus ``coeffs`` (already tanh-squashed),
    one per channel pair (1,0), (2,0), (2,1).
    """

    kind: str
    mean: Tensor = None
    logvar: Tensor = None
    logits: Tensor = None
    means: list = field(default_factory=list)
    log_scales: list = field(default_factory=list)
    coeffs: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.mean.shape != self.logvar.shape:
                raise ShapeError(f"gaussian output: {self.mean.shape} vs {self.logvar.shape}")
        elif self.kind == "dmol":
            c = len(self.means)
            if len(self.log_scales) != c or len(self.coeffs) != c * (c - 1) // 2:
                raise ShapeError("dmol output: inconsistent channel parameter lists")
        else:
            raise ValueError(f"unknown output kind {self.kind!r}")

    @property
    def num_mixtures(self):
        return self.logits.shape[1]


def to_grid(levels):
    """Pixel level k in {0..255} -> 2k/255 - 1."""
    return np.asarray(levels, dtype=np.float64) * (2.0 / 255.0) - 1.0


def to_levels(x):
    return np.rint((np.asarray(x) + 1.0) * 127.5)


def check_grid(x):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    k = (x + 1.0) * 127.5
    if not np.all(np.abs(k - np.rint(k)) < 1e-6) or k.min() < -1e-6 or k.max() > 255 + 1e-6:
        raise ValueError("x is not on the 256-level grid of [-1, 1]")
    return x


def sigma_in_pixels(sigma_output):
    """Width of sigma_output on the [0, 255] scale."""
    return sigma_output * 127.5


def squared_error_weight(sigma_output):
    """gamma in gamma * ||x - xhat||^2 equivalent to a fixed-variance KL."""
    return 1.0 / (2.0 * sigma_output ** 2)


def _per_example(t):
    return T.sum(t, axis=tuple(range(1, t.ndim)))


def gaussian_recon_kl(x, out, sigma_output):
    """Sum over pixels of KL(N(x, sigma_output^2) || N(xhat, sigma_theta^2)), per example."""
    if sigma_output <= 0:
        raise ValueError(f"sigma_output must be positive, got {sigma_output}")
    if out.kind != "gaussian":
        raise ValueError("gaussian_recon_kl needs a gaussian output distribution")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    data = DiagGaussian(x, np.full(x.shape, 2.0 * math.log(sigma_output)))
    model = DiagGaussian(out.mean, out.logvar)
    return _per_example(kl_diag(data, model))


def discretized_gaussian_logprob(x, out, floor=MASS_FLOOR):
    """log p(x|z) for grid-valued x under per-pixel Gaussian bins, per example."""
    if out.kind != "gaussian":
        raise ValueError("discretized_gaussian_logprob needs a gaussian output distribution")
    x = check_grid(x)
    return _per_example(T.disc_gauss_logprob(x, out.mean, out.logvar, floor))


def _log_sigmoid(t):
    return t - T.softplus(t)


def _dmol_channel_logprob(xc, mean, log_scale, floor):
    """Log bin mass of one channel for all K components, (B, K, H, W)."""
    log_floor = math.log(floor)
    centered = xc - mean
    inv = T.exp(-log_scale)
    plus_in = inv * (centered + 1.0 / 255.0)
    min_in = inv * (centered - 1.0 / 255.0)
    mid = (inv * centered).data
    delta = T.where(
        mid > 0,
        T.sigmoid(-min_in) - T.sigmoid(-plus_in),
        T.sigmoid(plus_in) - T.sigmoid(min_in),
    )
    log_delta = T.log(T.clip(delta, floor, None))
    log_low = T.clip(_log_sigmoid(plus_in), log_floor, None)
    log_high = T.clip(-T.softplus(min_in), log_floor, None)
    xb = np.broadcast_to(xc, mean.shape)
    return T.where(xb <= -1.0, log_low, T.where(xb >= 1.0, log_high, log_delta))


def _coeff_index(c, j):
    return c * (c - 1) // 2 + j


def dmol_logprob(x, out, floor=MASS_FLOOR):
    """Discretized mixture-of-logistics log-likelihood, per example.

    Channel c's mean is shifted by coeff * x_j for every earlier channel j
    of the same pixel.
    """
    if out.kind != "dmol":
        raise ValueError("dmol_logprob needs a dmol output distribution")
    for t in [out.logits, *out.means, *out.log_scales, *out.coeffs]:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("dmol_logprob: non-finite parameters")
    x = check_grid(x)
    C = x.shape[1]
    if len(out.means) != C:
        raise ShapeError(f"dmol_logprob: {len(out.means)} channel parameter sets for {C} channels")
    total = None
    for c in range(C):
        mean = out.means[c]
        for j in range(c):
            mean = mean + out.coeffs[_coeff_index(c, j)] * x[:, j:j + 1]
        log_scale = T.clip(out.log_scales[c], DMOL_LOG_SCALE_MIN, None)
        lp = _dmol_channel_logprob(x[:, c:c + 1], mean, log_scale, floor)
        total = lp if total is None else total + lp
    per_pixel = T.logsumexp(out.logits + total, axis=1) - T.logsumexp(out.logits, axis=1)
    return _per_example(per_pixel)


def dmol_sample(out, rng, temperature=1.0):
    """Draw an image from a DMoL output; temperature 0 decodes component means.

    The same amount of noise is drawn from ``rng`` whatever the temperature.
    """
    logits = out.logits.data
    B, K, H, W = logits.shape
    C = len(out.means)
    u = rng.uniform(1e-5, 1.0 - 1e-5, size=(B, K, H, W))
    if temperature > 0:
        comp = np.argmax(logits - np.log(-np.log(u)), axis=1)
    else:
        comp = np.argmax(logits, axis=1)
    noise = rng.uniform(1e-5, 1.0 - 1e-5, size=(B, C, H, W))
    pick = comp[:, None]
    xs = np.empty((B, C, H, W))
    for c in range(C):
        m = np.take_along_axis(out.means[c].data, pick, axis=1)[:, 0]
        for j in range(c):
            coeff = np.take_along_axis(out.coeffs[_coeff_index(c, j)].data, pick, axis=1)[:, 0]
            m = m + coeff * xs[:, j]
        ls = np.maximum(np.take_along_axis(out.log_scales[c].data, pick, axis=1)[:, 0], DMOL_LOG_SCALE_MIN)
        logistic = np.log(noise[:, c]) - np.log1p(-noise[:, c])
        xs[:, c] = np.clip(m + temperature * np.exp(ls) * logistic, -1.0, 1.0)
    return xs


# --------------------------------------------------------------------------
# guidance


def guided_extrapolate(cond, uncond, w_mu, w_sigma):
    """Extrapolate mean and log-variance of ``cond`` away from ``uncond``.

    mean = mu_c + w_mu (mu_c - mu_u); logvar = lv_c + w_sigma (lv_c - lv_u),
    i.e. variance sigma_c^2 (sigma_c / sigma_u)^(2 w_sigma). The result is
    re-clamped; check ``.saturated`` for clamp hits.
    """
    _check_pair("guided_extrapolate", cond, uncond)
    mean = cond.mean if w_mu == 0 else cond.mean + w_mu * (cond.mean - uncond.mean)
    logvar = cond.logvar if w_sigma == 0 else cond.logvar + w_sigma * (cond.logvar - uncond.logvar)
    return DiagGaussian(mean, logvar)


@dataclass
class ProductGuidance:
    """Per-element result of the renormalized product p_c (p_c / p_u)^w.

    ``mean`` and ``var`` are NaN wherever ``valid`` is False.
    """

    mean: np.ndarray
    var: np.ndarray
    valid: np.ndarray
    precision: np.ndarray

    @property
    def all_valid(self):
        return bool(self.valid.all())


def guided_product(cond, uncond, w):
    if w < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w}")
    _check_pair("guided_product", cond, uncond)
    inv_c = np.exp(-cond.logvar.data)
    inv_u = np.exp(-uncond.logvar.data)
    precision = (1.0 + w) * inv_c - w * inv_u
    valid = precision > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(valid, 1.0 / precision, np.nan)
        mean = var * ((1.0 + w) * cond.mean.data * inv_c - w * uncond.mean.data * inv_u)
    return ProductGuidance(mean=mean, var=var, valid=valid, precision=precision)
