import math

import numpy as np
import pytest
from scipy import integrate

from hvae import tensor as T
from hvae.config import ModelConfig


def fd_check(fn, arrays, eps=1e-5, seed=0):
    """Compare backward() with central differences on a random projection.

    ``fn`` maps Tensors to a Tensor; the scalar checked is sum(fn * R) for a
    fixed random R. Returns the norm-wise relative error per input.
    """
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Graph() as g:
        out = fn(*tensors)
        R = np.random.default_rng(seed).standard_normal(out.shape)
        loss = T.sum(out * R)
        T.backward(loss, g)
    errs = []
    for k, t in enumerate(tensors):
        num = np.zeros_like(t.data)
        flat = num.reshape(-1)
        for j in range(t.data.size):
            vals = []
            for sign in (1, -1):
                pert = [a.copy() for a in arrays]
                pert[k].reshape(-1)[j] += sign * eps
                vals.append(float(np.sum(fn(*[T.Tensor(p) for p in pert]).data * R)))
            flat[j] = (vals[0] - vals[1]) / (2 * eps)
        ana = t.grad
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        errs.append(np.linalg.norm(ana - num) / scale)
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    """Two stochastic layers on 8x8 images."""
    base = dict(image_size=8, channels=1, resolutions=(4, 8), groups=(1, 1), base_channels=8,
                channel_mult=(1, 1), z_channels=2, emb_dim=4, num_mixtures=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_run_config(**kw):
    """Full config around ``tiny_config`` with a short training run."""
    from hvae.config import Config

    cfg = Config(model=tiny_config())
    base = dict(batch_size=4, iterations=10, warmup_steps=2, max_lr=1e-3, min_lr=1e-4,
                checkpoint_every=0, ema_decay=0.9)
    base.update(kw)
    return cfg.replace(**base)


def toy_data(count=32, size=8, seed=0, labels=True):
    from hvae.io import DatasetContainer
    from hvae.toydata import make_shapes

    px, lab = make_shapes(count, size, seed=seed)
    return DatasetContainer.from_chw(px, lab if labels else None)


def product_moments_by_quadrature(mc, sc, mu, su, w):
    """Normalized moments of N(mc, sc^2)^(1+w) N(mu, su^2)^(-w) by quadrature."""
    def logf(t):
        return -(1 + w) * 0.5 * ((t - mc) / sc) ** 2 + w * 0.5 * ((t - mu) / su) ** 2

    prec = (1 + w) / sc ** 2 - w / su ** 2
    centre = ((1 + w) * mc / sc ** 2 - w * mu / su ** 2) / prec  # mode, used only to place the window
    width = 40.0 / math.sqrt(prec)
    shift = logf(centre)
    opts = dict(epsabs=1e-14, epsrel=1e-11, limit=200)
    lo, hi = centre - width, centre + width
    z = integrate.quad(lambda t: math.exp(logf(t) - shift), lo, hi, **opts)[0]
    m1 = integrate.quad(lambda t: t * math.exp(logf(t) - shift), lo, hi, **opts)[0] / z
    m2 = integrate.quad(lambda t: (t - m1) ** 2 * math.exp(logf(t) - shift), lo, hi, **opts)[0] / z
    return m1, m2


def full_loss_fd_errors(output, num_classes=0, seed=2):
    """Relative gradient errors of the full training loss on the 2-layer 8x8 model.

    Lambda is frozen at its value for the unperturbed parameters and every
    evaluation replays the same noise. Returns ``{check: relative error}``
    for one random all-parameter direction and one coordinate in about six
    parameter groups.
    """
    from hvae.model import HVAE
    from hvae.schedule import geometric_schedule

    cfg = tiny_config(output=output, num_classes=num_classes, label_drop_prob=0.5)
    m = HVAE(cfg, seed=seed)
    x = np.random.default_rng(9).integers(0, 256, (2, 1, 8, 8)) * (2 / 255) - 1
    label = np.arange(2) % num_classes if num_classes else None
    sched = geometric_schedule(cfg.num_layers, 1000, 10)
    lams = m.training_loss(x, label, sched, np.random.default_rng(4))[1]["lambdas"]

    def loss_value():
        return m.training_loss(x, label, sched, np.random.default_rng(4), lambdas=lams)[0].item()

    with T.Graph() as g:
        loss, _ = m.training_loss(x, label, sched, np.random.default_rng(4), lambdas=lams)
        T.backward(loss, g)
    grads = {k: p.grad.copy() for k, p in m.params.items()}
    base = {k: p.data.copy() for k, p in m.params.items()}

    def rel(num, ana):
        return abs(num - ana) / max(abs(num), abs(ana), 1e-12)

    errs = {}
    r = np.random.default_rng(1)
    v = {k: r.standard_normal(p.shape) for k, p in m.params.items()}
    eps = 1e-6
    vals = []
    for sign in (1, -1):
        for k, p in m.params.items():
            p.data = base[k] + sign * eps * v[k]
        vals.append(loss_value())
    for k, p in m.params.items():
        p.data = base[k].copy()
    errs["direction"] = rel((vals[0] - vals[1]) / (2 * eps), sum(float(np.sum(grads[k] * v[k])) for k in grads))

    names = sorted(k for k in grads if np.abs(grads[k]).max() > 1e-3)
    for k in names[:: max(1, len(names) // 6)]:
        j = int(np.argmax(np.abs(grads[k])))
        p = m.params[k]
        vals = []
        for sign in (1, -1):
            p.data = base[k].copy()
            p.data.reshape(-1)[j] += sign * 1e-5
            vals.append(loss_value())
        p.data = base[k].copy()
        errs[k] = rel((vals[0] - vals[1]) / 2e-5, grads[k].reshape(-1)[j])
    return errs

