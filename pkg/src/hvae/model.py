"""Hierarchical VAE: bottom-up feature extractor plus top-down generator.

The generator starts from a learned constant at the lowest resolution. Each
stochastic layer runs a prior block on the hidden state (giving p_i and a
residual), optionally a posterior block on the hidden state concatenated with
the encoder feature of the same resolution (giving q_i), samples z_i, and
adds ``residual + proj(z_i)`` back into the hidden state before a trailing
residual block.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .distributions import (
    DiagGaussian,
    OutputDistribution,
    discretized_gaussian_logprob,
    dmol_logprob,
    dmol_sample,
    gaussian_recon_kl,
    kl_diag,
    reparam_sample,
)
from .schedule import geometric_schedule, resolution_schedule, weighted_kl_loss
from .tensor import NonFiniteError, ShapeError, Tensor

# softplus^-1(1): unit variance at initialization
_UNIT_VAR_PRE = math.log(math.expm1(1.0))
# softplus^-1(0.1^2) for the output variance
_OUTPUT_VAR_PRE = math.log(math.expm1(0.01))


class Conv:
    def __init__(self, model, name, cin, cout, k, scale=1.0, bias=0.0):
        self.w = model.add_param(f"{name}.w", model.init_rng.standard_normal((cout, cin, k, k)) * (scale / math.sqrt(cin * k * k)))
        b = np.full(cout, bias) if np.ndim(bias) == 0 else np.asarray(bias, dtype=np.float64)
        self.b = model.add_param(f"{name}.b", b)

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b)


class LabelBias:
    """Per-block class embedding, linearly projected to ``width`` channels."""

    def __init__(self, model, name, width):
        cfg = model.config
        self.table = model.add_param(f"{name}.table", model.init_rng.standard_normal((cfg.num_classes + 1, cfg.emb_dim)))
        self.proj = model.add_param(f"{name}.proj", model.init_rng.standard_normal((cfg.emb_dim, width)) * (0.1 / math.sqrt(cfg.emb_dim)))

    def __call__(self, label):
        return T.matmul(T.embedding(self.table, label), self.proj)


class Block:
    """silu -> conv3x3 [+ label bias] -> silu -> conv."""

    def __init__(self, model, name, cin, hidden, cout, out_scale=1.0, out_bias=0.0, out_k=3):
        self.conv1 = Conv(model, f"{name}.conv1", cin, hidden, 3)
        self.label = LabelBias(model, f"{name}.emb", hidden) if model.config.num_classes else None
        self.conv2 = Conv(model, f"{name}.conv2", hidden, cout, out_k, scale=out_scale, bias=out_bias)

    def __call__(self, x, label):
        a = self.conv1(T.silu(x))
        if self.label is not None:
            a = T.bias_add(a, self.label(label))
        return self.conv2(T.silu(a))


class ResBlock(Block):
    def __init__(self, model, name, width, out_scale):
        super().__init__(model, name, width, width, width, out_scale=out_scale)

    def __call__(self, x, label):
        return x + super().__call__(x, label)


@dataclass
class LayerTrace:
    posterior: DiagGaussian
    prior: DiagGaussian
    z: Tensor
    kl: Tensor  # batch mean, nats
    kl_per_example: Tensor


@dataclass
class LatentTrace:
    layers: list
    output: OutputDistribution

    def __len__(self):
        return len(self.layers)

    @property
    def kl(self):
        return [layer.kl for layer in self.layers]

    def kl_values(self):
        return np.array([float(layer.kl.data) for layer in self.layers])


@dataclass
class ElboResult:
    recon_nats: np.ndarray  # (B,)
    kl: np.ndarray  # (N, B)
    dims: int

    @property
    def rate_nats(self):
        return self.kl.sum(axis=0)

    @property
    def total_nats(self):
        return self.recon_nats + self.rate_nats

    @property
    def bpd(self):
        return self.total_nats / (self.dims * math.log(2.0))


@dataclass
class GeneratorState:
    h_c: Tensor
    h_u: Tensor = None
    layer: int = 0
    saturated: int = 0
    fallbacks: int = 0
    injections: list = field(default_factory=list)

    @property
    def guided(self):
        return self.h_u is not None


class HVAE:
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.params = {}
        self.init_rng = np.random.default_rng(seed)
        self._build()
        del self.init_rng

    # ------------------------------------------------------------------
    # construction

    def add_param(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def _build(self):
        cfg = self.config
        n = cfg.num_layers
        zc = cfg.z_channels
        res_scale = 1.0 / math.sqrt(n)
        nres = len(cfg.resolutions)

        # encoder: high resolution to low
        self.enc_in = Conv(self, "enc.in", cfg.channels, cfg.width(nres - 1), 3)
        self.enc_blocks = {}
        self.enc_down = {}
        for r in reversed(range(nres)):
            w = cfg.width(r)
            self.enc_blocks[r] = [ResBlock(self, f"enc.r{r}.block{j}", w, res_scale) for j in range(cfg.enc_blocks)]
            if r > 0 and cfg.width(r - 1) != w:
                self.enc_down[r] = Conv(self, f"enc.r{r}.down", w, cfg.width(r - 1), 1)

        # generator: low resolution to high
        r0 = cfg.resolutions[0]
        self.h_top = self.add_param("gen.h_top", np.zeros((1, cfg.width(0), r0, r0)))
        self.layer_res = []
        self.priors, self.posteriors, self.zproj, self.trailing_blocks = [], [], [], []
        self.gen_up = {}
        i = 0
        for r, g in enumerate(cfg.groups):
            w = cfg.width(r)
            if r > 0 and cfg.width(r - 1) != w:
                self.gen_up[r] = Conv(self, f"gen.r{r}.up", cfg.width(r - 1), w, 1)
            for _ in range(g):
                self.layer_res.append(r)
                prior_bias = np.zeros(2 * zc + w)
                prior_bias[zc:2 * zc] = _UNIT_VAR_PRE
                self.priors.append(Block(self, f"gen.l{i}.prior", w, w, 2 * zc + w, out_scale=0.1, out_bias=prior_bias))
                post_bias = np.zeros(2 * zc)
                post_bias[zc:] = _UNIT_VAR_PRE
                self.posteriors.append(Block(self, f"gen.l{i}.post", 2 * w, w, 2 * zc, out_scale=0.1, out_bias=post_bias))
                self.zproj.append(Conv(self, f"gen.l{i}.zproj", zc, w, 1, scale=res_scale))
                self.trailing_blocks.append(
                    [ResBlock(self, f"gen.l{i}.res{j}", w, res_scale) for j in range(cfg.blocks_per_layer)]
                )
                i += 1

        w = cfg.width(nres - 1)
        C, K = cfg.channels, cfg.num_mixtures
        if cfg.output == "gaussian":
            bias = np.concatenate([np.zeros(C), np.full(C, _OUTPUT_VAR_PRE)])
            self.out_head = Conv(self, "out.head", w, 2 * C, 3, scale=0.1, bias=bias)
        else:
            n_out = K * (1 + 2 * C + C * (C - 1) // 2)
            self.out_head = Conv(self, "out.head", w, n_out, 3, scale=0.1)

    # ------------------------------------------------------------------
    # parameter handling

    def state_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ShapeError(f"parameter mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, t in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ShapeError(f"parameter {k}: expected shape {t.shape}, got {a.shape}")
            t.data = a.copy()

    def num_parameters(self):
        return sum(t.size for t in self.params.values())

    def default_schedule(self):
        cfg = self.config
        if cfg.schedule == "geometric":
            return geometric_schedule(cfg.num_layers, cfg.schedule_A, cfg.schedule_B)
        if cfg.schedule == "resolution":
            return resolution_schedule(cfg.layer_resolutions)
        return None

    # ------------------------------------------------------------------
    # input checks

    def _check_input(self, x, label):
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        want = (cfg.channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"expected images of shape (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        return x, self._check_label(label, x.shape[0])

    def _check_label(self, label, batch, allow_null=True):
        cfg = self.config
        if not cfg.num_classes:
            return None
        if label is None:
            raise ValueError("this model is class-conditional; a label is required")
        label = np.broadcast_to(np.asarray(label, dtype=np.int64), (batch,)).copy()
        top = cfg.num_classes if allow_null else cfg.num_classes - 1
        if label.min() < 0 or label.max() > top:
            raise ValueError(f"labels must lie in [0, {top}]")
        return label

    def null_label(self, batch):
        if not self.config.num_classes:
            return None
        return np.full(batch, self.config.num_classes, dtype=np.int64)

    def label_dropout(self, label, rng, p=None):
        """Replace each label by the null token with probability ``p``."""
        if not self.config.num_classes:
            raise ValueError("label dropout needs a class-conditional model")
        p = self.config.label_drop_prob if p is None else p
        label = np.asarray(label, dtype=np.int64)
        drop = rng.random(label.shape) < p
        return np.where(drop, self.config.num_classes, label)

    # ------------------------------------------------------------------
    # network pieces

    def encode(self, x, label=None):
        """Feature map per resolution index, computed bottom-up."""
        x, label = self._check_input(x, label)
        cfg = self.config
        h = self.enc_in(x)
        feats = {}
        for r in reversed(range(len(cfg.resolutions))):
            for block in self.enc_blocks[r]:
                h = block(h, label)
            feats[r] = h
            if r > 0:
                h = T.avgpool2x(h)
                if r in self.enc_down:
                    h = self.enc_down[r](h)
        return feats

    def initial_hidden(self, batch):
        h = self.h_top
        return T.add(np.zeros((batch,) + h.shape[1:]), h)

    def enter_layer(self, i, h):
        """Move the hidden state to layer i's resolution if it starts a new one."""
        r = self.layer_res[i]
        prev = self.layer_res[i - 1] if i > 0 else 0
        while prev < r:
            prev += 1
            h = T.upsample2x(h)
            if prev in self.gen_up:
                h = self.gen_up[prev](h)
        return h

    def prior_step(self, i, h, label):
        zc = self.config.z_channels
        out = self.priors[i](h, label)
        mean, pre, resid = T.split_channels(out, [zc, zc, out.shape[1] - 2 * zc])
        return DiagGaussian.from_softplus(mean, pre), resid

    def posterior_step(self, i, h, feat, label):
        zc = self.config.z_channels
        out = self.posteriors[i](T.concat([h, feat], axis=1), label)
        mean, pre = T.split_channels(out, [zc, zc])
        return DiagGaussian.from_softplus(mean, pre)

    def project_z(self, i, z):
        return self.zproj[i](z)

    def trailing(self, i, h, label):
        for block in self.trailing_blocks[i]:
            h = block(h, label)
        return h

    def finish(self, h):
        """Bring the hidden state to full resolution after the last layer."""
        last = self.layer_res[-1]
        while last < len(self.config.resolutions) - 1:
            last += 1
            h = T.upsample2x(h)
            if last in self.gen_up:
                h = self.gen_up[last](h)
        return h

    def decode(self, h):
        cfg = self.config
        out = self.out_head(T.silu(h))
        C, K = cfg.channels, cfg.num_mixtures
        if cfg.output == "gaussian":
            mean, pre = T.split_channels(out, [C, C])
            d = DiagGaussian.from_softplus(mean, pre)
            return OutputDistribution("gaussian", mean=d.mean, logvar=d.logvar)
        ncoef = C * (C - 1) // 2
        parts = T.split_channels(out, [K] * (1 + 2 * C + ncoef))
        return OutputDistribution(
            "dmol",
            logits=parts[0],
            means=parts[1:1 + C],
            log_scales=parts[1 + C:1 + 2 * C],
            coeffs=[T.tanh(p) for p in parts[1 + 2 * C:]],
        )

    @staticmethod
    def _check_finite(i, h):
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteError(f"non-finite hidden state at stochastic layer {i}")

    # ------------------------------------------------------------------
    # inference

    def posterior_forward(self, x, label=None, rng=None, gen_label=None, prior_as_posterior=False):
        """Top-down pass with z_i ~ q_i; returns a :class:`LatentTrace`.

        ``gen_label`` (default ``label``) conditions the prior path; the
        encoder and posterior blocks always see ``label``.
        ``prior_as_posterior`` replaces every q_i by p_i (diagnostics only).
        """
        rng = np.random.default_rng() if rng is None else rng
        x, label = self._check_input(x, label)
        gen_label = label if gen_label is None else self._check_label(gen_label, x.shape[0])
        feats = self.encode(x, label)
        h = self.initial_hidden(x.shape[0])
        layers = []
        for i in range(self.config.num_layers):
            h = self.enter_layer(i, h)
            p, resid = self.prior_step(i, h, gen_label)
            if prior_as_posterior:
                q = p
            else:
                q = self.posterior_step(i, h, feats[self.layer_res[i]], label)
            z = reparam_sample(q, rng.standard_normal(q.shape), 1.0)
            kl_ex = T.sum(kl_diag(q, p), axis=(1, 2, 3))
            h = self.trailing(i, h + resid + self.project_z(i, z), gen_label)
            self._check_finite(i, h)
            layers.append(LayerTrace(q, p, z, T.mean(kl_ex), kl_ex))
        return LatentTrace(layers, self.decode(self.finish(h)))

    def log_likelihood(self, x, output):
        """log p(x|z) per example, nats, using the configured output layer."""
        if output.kind == "gaussian":
            return discretized_gaussian_logprob(x, output)
        return dmol_logprob(x, output)

    def elbo(self, x, label=None, rng=None):
        trace = self.posterior_forward(x, label, rng)
        recon = -self.log_likelihood(np.asarray(x, dtype=np.float64), trace.output).data
        kl = np.stack([layer.kl_per_example.data for layer in trace.layers])
        return ElboResult(recon_nats=recon, kl=kl, dims=self.config.dims)

    def training_loss(self, x, label=None, schedule=None, rng=None, lambdas=None):
        """Batch-mean training objective in nats per example.

        Gaussian output: continuous KL reconstruction term; DMoL: negative
        log-likelihood. KL terms are reweighted by ``schedule`` (None: plain
        sum). Returns ``(loss, info)``.
        """
        rng = np.random.default_rng() if rng is None else rng
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        gen_label = None
        if cfg.num_classes:
            label = self._check_label(label, x.shape[0], allow_null=False)
            gen_label = self.label_dropout(label, rng)
        trace = self.posterior_forward(x, label, rng, gen_label=gen_label)
        if cfg.output == "gaussian":
            recon = T.mean(gaussian_recon_kl(x, trace.output, cfg.sigma_output))
        else:
            recon = -T.mean(dmol_logprob(x, trace.output))
        kl_loss, lams = weighted_kl_loss(trace.kl, schedule, lambdas)
        loss = recon + kl_loss
        info = {
            "recon": float(recon.data),
            "kl": trace.kl_values(),
            "lambdas": lams,
            "trace": trace,
        }
        return loss, info

    # ------------------------------------------------------------------
    # generation

    def _temps(self, temps):
        n = self.config.num_layers
        if np.ndim(temps) == 0:
            temps = [float(temps)] * n
        temps = [float(t) for t in temps]
        if len(temps) != n:
            raise ValueError(f"expected {n} layer temperatures, got {len(temps)}")
        if any(t < 0 for t in temps):
            raise ValueError("temperatures must be nonnegative")
        return temps

    def render(self, output, rng, output_temp=0.0):
        """Image in [-1, 1] from an output distribution."""
        if output_temp < 0:
            raise ValueError("output temperature must be nonnegative")
        if output.kind == "dmol":
            return dmol_sample(output, rng, output_temp)
        mean = output.mean.data
        noise = rng.standard_normal(mean.shape)
        img = mean + output_temp * np.exp(0.5 * output.logvar.data) * noise if output_temp else mean
        return np.clip(img, -1.0, 1.0)

    def start_state(self, batch, guided=False):
        h = self.initial_hidden(batch)
        return GeneratorState(h_c=h, h_u=h if guided else None)

    def prior_layer_step(self, state, label, temp, rng):
        i = state.layer
        h = self.enter_layer(i, state.h_c)
        p, resid = self.prior_step(i, h, label)
        state.saturated += p.saturated
        z = reparam_sample(p, rng.standard_normal(p.shape), temp)
        h = self.trailing(i, h + resid + self.project_z(i, z), label)
        self._check_finite(i, h)
        return GeneratorState(h_c=h, layer=i + 1, saturated=state.saturated)

    def prior_sample(self, n, label=None, temps=1.0, output_temp=0.0, rng=None):
        """Draw ``n`` images from the prior; returns (n, C, H, W) in [-1, 1]."""
        rng = np.random.default_rng() if rng is None else rng
        temps = self._temps(temps)
        label = self._check_label(label, n)
        state = self.start_state(n)
        for t in temps:
            state = self.prior_layer_step(state, label, t, rng)
        return self.render(self.decode(self.finish(state.h_c)), rng, output_temp)

    def partial_walk(self, x, label=None, budget_bpd=0.0, rng=None):
        """Partial reconstruction under a per-example rate budget.

        Layers are visited in order; while an example's cumulative posterior
        KL (bits per dim) stays within budget its z_i comes from q_i, and
        from p_i at temperature 1 afterwards. Returns ``(images, switch)``
        where ``switch[b]`` is the first prior-sampled layer (N if none).
        """
        if budget_bpd < 0:
            raise ValueError("rate budget must be nonnegative")
        rng = np.random.default_rng() if rng is None else rng
        x, label = self._check_input(x, label)
        B = x.shape[0]
        feats = self.encode(x, label)
        h = self.initial_hidden(B)
        scale = 1.0 / (self.config.dims * math.log(2.0))
        cum = np.zeros(B)
        active = np.ones(B, dtype=bool)
        switch = np.full(B, self.config.num_layers)
        for i in range(self.config.num_layers):
            h = self.enter_layer(i, h)
            p, resid = self.prior_step(i, h, label)
            q = self.posterior_step(i, h, feats[self.layer_res[i]], label)
            cum += T.sum(kl_diag(q, p), axis=(1, 2, 3)).data * scale
            now = active & (cum <= budget_bpd)
            switch[active & ~now] = i
            active = now
            noise = rng.standard_normal(q.shape)
            zq = reparam_sample(q, noise, 1.0).data
            zp = reparam_sample(p, noise, 1.0).data
            z = np.where(active[:, None, None, None], zq, zp)
            h = self.trailing(i, h + resid + self.project_z(i, z), label)
        return self.render(self.decode(self.finish(h)), rng, 0.0), switch

    def partial_reconstruct(self, x, label=None, budget_bpd=0.0, rng=None):
        return self.partial_walk(x, label, budget_bpd, rng)[0]

    def reconstruct(self, x, label=None, rng=None):
        """Full-posterior reconstruction decoded at output temperature 0."""
        return self.partial_reconstruct(x, label, math.inf, rng)
