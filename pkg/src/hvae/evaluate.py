"""Rate-distortion curves, bpd decomposition, information curves and
schedule-conformance ratios. Nothing here modifies model parameters."""

import math
from dataclasses import dataclass

import numpy as np

from .schedule import geometric_schedule, kl_targets

LN2 = math.log(2.0)


@dataclass
class RdPoint:
    rate: float  # budget, bits per dim
    distortion: float  # mean RMSE on the [0, 255] scale
    stderr: float
    repeats: int


def _batches(x, label, batch_size):
    for s in range(0, len(x), batch_size):
        yield x[s:s + batch_size], None if label is None else label[s:s + batch_size]


def _check_data(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("evaluation needs a nonempty (B, C, H, W) image batch")
    return x


def rmse_pixels(a, b):
    """Per-example RMSE after mapping both [-1, 1] images to [0, 255]."""
    d = (np.asarray(a) - np.asarray(b)) * 127.5
    return np.sqrt(np.mean(d.reshape(d.shape[0], -1) ** 2, axis=1))


def rate_grid(full_rate, points=6, low=0.005):
    """``points`` log-spaced budgets from ``low`` to ``full_rate`` bpd."""
    if full_rate <= low:
        raise ValueError(f"full rate {full_rate} must exceed the lowest budget {low}")
    return list(np.geomspace(low, full_rate, points))


def elbo_terms(model, x, label=None, seed=0, batch_size=128):
    """Per-example reconstruction nats (B,) and per-layer KL nats (N, B)."""
    x = _check_data(x)
    rng = np.random.default_rng(seed)
    recon, kl = [], []
    for xb, lb in _batches(x, label, batch_size):
        res = model.elbo(xb, lb, rng)
        recon.append(res.recon_nats)
        kl.append(res.kl)
    return np.concatenate(recon), np.concatenate(kl, axis=1)


def layer_kls(model, x, label=None, seed=0, batch_size=128):
    """Dataset-mean KL per layer, nats."""
    return elbo_terms(model, x, label, seed, batch_size)[1].mean(axis=1)


def rd_curve(model, x, label=None, rates=None, repeats=10, seed=0, batch_size=128):
    """Distortion of partial reconstructions at each rate budget.

    Repeat ``r`` uses the same noise stream at every budget, so adjacent
    points differ only through the budget.
    """
    x = _check_data(x)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if rates is None:
        full = elbo_terms(model, x, label, seed, batch_size)[1].sum(axis=0).mean() / (model.config.dims * LN2)
        rates = rate_grid(full)
    rates = [float(r) for r in rates]
    if any(r < 0 for r in rates) or rates != sorted(rates):
        raise ValueError("rates must be nonnegative and ascending")
    points = []
    for rate in rates:
        per_repeat = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, r])
            errs = []
            for xb, lb in _batches(x, label, batch_size):
                errs.append(rmse_pixels(model.partial_reconstruct(xb, lb, rate, rng), xb))
            per_repeat.append(np.concatenate(errs).mean())
        per_repeat = np.array(per_repeat)
        se = per_repeat.std(ddof=1) / math.sqrt(repeats) if repeats > 1 else 0.0
        points.append(RdPoint(rate, float(per_repeat.mean()), float(se), repeats))
    return points


def rd_monotone(points, slack=1.0):
    """Adjacent points nonincreasing within ``slack`` pooled standard errors."""
    ok = []
    for a, b in zip(points, points[1:]):
        pooled = math.sqrt(a.stderr ** 2 + b.stderr ** 2)
        ok.append(b.distortion <= a.distortion + slack * pooled)
    return ok


def bpd_report(model, x, label=None, seed=0, batch_size=128):
    recon, kl = elbo_terms(model, x, label, seed, batch_size)
    scale = 1.0 / (model.config.dims * LN2)
    per_layer = kl.mean(axis=1) * scale
    rate = float(kl.sum(axis=0).mean() * scale)
    distortion = float(recon.mean() * scale)
    return {
        "nll_bpd": rate + distortion,
        "rate_bpd": rate,
        "distortion_bpd": distortion,
        "per_layer_kl_bpd": per_layer,
    }


@dataclass
class InfoCurve:
    cumulative: np.ndarray
    total_kl: float
    collapsed: bool  # total KL is zero: every layer matches its prior

    def at_middle(self):
        """c_{N/2} with 1-based layer index N/2 (rounded down)."""
        n = len(self.cumulative)
        return float(self.cumulative[max(n // 2, 1) - 1])


def info_curve_from_kls(kls):
    kls = np.asarray(kls, dtype=np.float64)
    total = float(kls.sum())
    if total <= 0:
        return InfoCurve(np.zeros_like(kls), total, True)
    return InfoCurve(np.cumsum(kls) / total, total, False)


def cumulative_info_curve(model, x, label=None, seed=0, batch_size=128):
    return info_curve_from_kls(layer_kls(model, x, label, seed, batch_size))


@dataclass
class KlRatio:
    layer: int
    kl: float
    a: float
    b: float
    ratio_a: float
    ratio_b: float
    band: str  # "below", "in" or "above"

    @property
    def within_2b(self):
        return self.band == "in" or (self.band == "above" and self.ratio_b <= 2.0)


def kl_ratios_from_kls(kls, schedule):
    kls = np.asarray(kls, dtype=np.float64)
    if len(kls) != len(schedule):
        raise ValueError(f"{len(kls)} layer KLs for a schedule of length {len(schedule)}")
    t = kl_targets(schedule, float(kls.sum()))
    rows = []
    for i, (L, a, b) in enumerate(zip(kls, t.a, t.b)):
        ra = L / a if a > 0 else 0.0
        rb = L / b if b > 0 else 0.0
        band = "below" if (a <= 0 or L < a) else ("in" if L <= b else "above")
        rows.append(KlRatio(i + 1, float(L), float(a), float(b), float(ra), float(rb), band))
    return rows


def kl_ratio_report(model, x, schedule, label=None, seed=0, batch_size=128):
    return kl_ratios_from_kls(layer_kls(model, x, label, seed, batch_size), schedule)


def format_tsv(rows, columns):
    """Tab-separated table; floats printed with 6 significant digits."""
    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(bool(v)).lower()
        if isinstance(v, (float, np.floating)):
            return f"{v:.6g}"
        return str(v)

    lines = ["\t".join(columns)]
    for row in rows:
        get = row.get if isinstance(row, dict) else (lambda k, r=row: getattr(r, k))
        lines.append("\t".join(fmt(get(c)) for c in columns))
    return "\n".join(lines) + "\n"


def ablation_metrics(model, x, label=None, schedule=None, seed=0, batch_size=128):
    """One row of the ablation table.

    ``schedule`` is used only to score conformance; it defaults to the
    model's configured schedule, or geometric if training ran without one.
    """
    recon, kl = elbo_terms(model, x, label, seed, batch_size)
    scale = 1.0 / (model.config.dims * LN2)
    kls = kl.mean(axis=1)
    if schedule is None:
        cfg = model.config
        schedule = model.default_schedule() or geometric_schedule(cfg.num_layers, cfg.schedule_A, cfg.schedule_B)
    ratios = kl_ratios_from_kls(kls, schedule)
    rate = float(kl.sum(axis=0).mean() * scale)
    distortion = float(recon.mean() * scale)
    return {
        "output": model.config.output,
        "schedule": model.config.schedule,
        "nll_bpd": rate + distortion,
        "rate_bpd": rate,
        "distortion_bpd": distortion,
        "c_mid": info_curve_from_kls(kls).at_middle(),
        "in_band_frac": float(np.mean([r.band == "in" for r in ratios])),
        "within_2b_frac": float(np.mean([r.within_2b for r in ratios])),
    }


ABLATION_COLUMNS = ["run", "output", "schedule", "nll_bpd", "rate_bpd", "distortion_bpd",
                    "c_mid", "in_band_frac", "within_2b_frac"]
