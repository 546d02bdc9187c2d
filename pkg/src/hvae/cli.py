"""Command-line interface: ``hvae <command> ...``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate as E
from .config import Config, ConfigError, load_config
from .guidance import GuidanceWeights, guided_sample, sweep
from .io import DatasetContainer, FormatError, image_grid, ingest, write_hvds, write_pnm
from .schedule import geometric_schedule, resolution_schedule, schedule_table, uniform_schedule
from .tensor import NonFiniteError
from .train import RunLockedError, Trainer, ablation_configs, model_from_checkpoint

log = logging.getLogger("hvae")


class CliError(Exception):
    pass


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_model(args):
    model, ckpt = model_from_checkpoint(args.checkpoint, use_ema=not args.raw_weights)
    log.info("loaded %s (step %d)", args.checkpoint, ckpt.step)
    return model


def _eval_data(args, model):
    """Fixed-seed evaluation subset of at most ``--limit`` images."""
    data = ingest(args.data, model.config.num_classes)
    want = (model.config.image_size, model.config.image_size, model.config.channels)
    if data.shape != want:
        raise CliError(f"{args.data}: images are {data.shape}, model expects {want}")
    idx = np.arange(len(data))
    if args.limit and len(data) > args.limit:
        idx = np.sort(np.random.default_rng(args.seed).permutation(len(data))[:args.limit])
    label = data.batch_labels(idx) if model.config.num_classes else None
    return data.images(idx), label


def _labels(model, value, n):
    if not model.config.num_classes:
        if value is not None:
            raise CliError("model is unconditional; --label is not accepted")
        return None
    if value is None:
        return np.arange(n) % model.config.num_classes
    return np.full(n, value)


# --------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = load_config(args.config)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    data = ingest(args.data, cfg.model.num_classes)
    trainer = Trainer(cfg, data, out_dir=args.out)
    with trainer.open_run(resume=not args.fresh):
        start = trainer.step_count

        def report(rec):
            if rec["step"] % max(cfg.train.log_every, 1) == 0 and rec["loss"] is not None:
                log.info("step %d loss %.4f rate %.4f lr %.3g%s", rec["step"], rec["loss"], rec["rate"],
                         rec["lr"], " (skipped)" if rec["skipped"] else "")

        trainer.train(callback=report)
    print(f"trained steps {start + 1}..{trainer.step_count}; skips: {len(trainer.state.skips)}; "
          f"output in {args.out}")
    return 0


def cmd_sample(args):
    model = _load_model(args)
    rng = np.random.default_rng(args.seed)
    label = _labels(model, args.label, args.n)
    img = model.prior_sample(args.n, label, args.temp, args.output_temp, rng)
    write_pnm(args.out, image_grid(img, args.cols))
    return 0


def cmd_guided_sample(args):
    model = _load_model(args)
    if args.label is None:
        raise CliError("--label is required for guided sampling")
    rng = np.random.default_rng(args.seed)
    weights = GuidanceWeights(args.wmu, args.wsigma)
    img, state = guided_sample(model, args.n, args.label, weights, args.temp, args.output_temp, rng,
                               mode=args.mode, return_state=True)
    write_pnm(args.out, image_grid(img, args.cols))
    print(f"saturated elements: {state.saturated}" + (f"; product fallbacks: {state.fallbacks}"
                                                       if args.mode == "product" else ""))
    return 0


def cmd_reconstruct(args):
    model = _load_model(args)
    args.limit = args.n
    x, label = _eval_data(args, model)
    rec = model.reconstruct(x, label, np.random.default_rng(args.seed))
    # originals on the top row, reconstructions below
    pair = np.concatenate([x, rec])
    write_pnm(args.out, image_grid(pair, len(x)))
    print(f"mean RMSE (0-255 scale): {E.rmse_pixels(rec, x).mean():.4f}")
    return 0


def cmd_rd_curve(args):
    model = _load_model(args)
    x, label = _eval_data(args, model)
    rates = args.rates
    if rates is None:
        full = E.bpd_report(model, x, label, args.seed)["rate_bpd"]
        rates = E.rate_grid(full, args.points)
    pts = E.rd_curve(model, x, label, rates, args.repeats, args.seed)
    _write(args.out, E.format_tsv(pts, ["rate", "distortion", "stderr", "repeats"]))
    return 0


def cmd_info_curve(args):
    model = _load_model(args)
    x, label = _eval_data(args, model)
    kls = E.layer_kls(model, x, label, args.seed)
    curve = E.info_curve_from_kls(kls)
    if curve.collapsed:
        print("warning: total KL is zero (posterior collapse)", file=sys.stderr)
    rows = [{"layer": i + 1, "resolution": r, "kl_nats": k, "cumulative": c}
            for i, (r, k, c) in enumerate(zip(model.config.layer_resolutions, kls, curve.cumulative))]
    _write(args.out, E.format_tsv(rows, ["layer", "resolution", "kl_nats", "cumulative"]))
    return 0


def cmd_kl_ratios(args):
    model = _load_model(args)
    x, label = _eval_data(args, model)
    cfg = model.config
    schedule = model.default_schedule() or geometric_schedule(cfg.num_layers, cfg.schedule_A, cfg.schedule_B)
    rows = E.kl_ratio_report(model, x, schedule, label, args.seed)
    _write(args.out, E.format_tsv(rows, ["layer", "kl", "a", "b", "ratio_a", "ratio_b", "band"]))
    return 0


def cmd_bpd(args):
    model = _load_model(args)
    x, label = _eval_data(args, model)
    rep = E.bpd_report(model, x, label, args.seed)
    rows = [{"term": k, "bpd": rep[k]} for k in ("nll_bpd", "rate_bpd", "distortion_bpd")]
    rows += [{"term": f"layer_{i + 1}", "bpd": v} for i, v in enumerate(rep["per_layer_kl_bpd"])]
    _write(args.out, E.format_tsv(rows, ["term", "bpd"]))
    return 0


def cmd_schedule_preview(args):
    resolutions = None
    if args.config:
        mc = load_config(args.config).model
        n, resolutions = mc.num_layers, mc.layer_resolutions
        mode = args.mode or mc.schedule
        A = mc.schedule_A if args.A is None else args.A
        B = mc.schedule_B if args.B is None else args.B
    else:
        if args.layers is None and args.resolutions is None:
            raise CliError("give --layers, --resolutions or --config")
        resolutions = [int(r) for r in args.resolutions] if args.resolutions else None
        n = args.layers if args.layers is not None else len(resolutions)
        mode = args.mode or "geometric"
        A = 1000.0 if args.A is None else args.A
        B = 10.0 if args.B is None else args.B
    if mode == "geometric":
        sched = geometric_schedule(n, A, B)
    elif mode == "resolution":
        if resolutions is None:
            raise CliError("--mode resolution needs --resolutions or --config")
        sched = resolution_schedule(resolutions)
    elif mode in ("uniform", "none"):
        sched = uniform_schedule(n)
    else:
        raise CliError(f"unknown schedule mode {mode!r}")
    if resolutions is not None and len(resolutions) != n:
        raise CliError(f"{len(resolutions)} resolutions for {n} layers")
    text = schedule_table(sched, resolutions)
    text += f"# last/first ratio: {sched.l_target[-1] / sched.l_target[0]:.6g}\n"
    _write(args.out, text)
    return 0


def cmd_sweep(args):
    model = _load_model(args)
    rows = sweep(model, args.wmu, args.wsigma, args.n_per_class, args.temp, args.seed, args.mode)
    _write(args.out, E.format_tsv(rows, ["w_mu", "w_sigma", "class_agreement", "diversity", "saturation"]))
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    data = ingest(args.data, cfg.model.num_classes)
    out = Path(args.out)
    eval_data = ingest(args.eval_data, cfg.model.num_classes) if args.eval_data else data
    idx = np.arange(len(eval_data))
    if args.limit and len(eval_data) > args.limit:
        idx = np.sort(np.random.default_rng(args.seed).permutation(len(eval_data))[:args.limit])
    x = eval_data.images(idx)
    label = eval_data.batch_labels(idx) if cfg.model.num_classes else None
    rows = []
    for name, run_cfg in ablation_configs(cfg).items():
        trainer = Trainer(run_cfg, data, out_dir=out / name.replace("+", "-"))
        with trainer.open_run():
            trainer.train()
        row = E.ablation_metrics(trainer.ema_model(), x, label, seed=args.seed)
        row["run"] = name
        rows.append(row)
        log.info("%s: %s", name, json.dumps({k: v for k, v in row.items() if k != "run"}))
    table = E.format_tsv(rows, E.ABLATION_COLUMNS)
    (out / "ablation.tsv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_make_toy(args):
    from .toydata import make_shapes

    px, labels = make_shapes(args.count, args.size, args.seed)
    write_hvds(args.out, DatasetContainer.from_chw(px, labels))
    print(f"wrote {args.count} {args.size}x{args.size} images to {args.out}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="hvae", description="Desk-scale hierarchical VAE toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def ckpt_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
        sp.add_argument("--seed", type=int, default=0)

    def eval_args(sp):
        ckpt_args(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--limit", type=int, default=512, help="evaluation subset size (0: all)")
        sp.add_argument("--out", default="-", help="output table (default stdout)")

    def sample_args(sp):
        ckpt_args(sp)
        sp.add_argument("--n", type=int, default=16)
        sp.add_argument("--label", type=int)
        sp.add_argument("--temp", type=float, default=1.0)
        sp.add_argument("--output-temp", type=float, default=0.0)
        sp.add_argument("--cols", type=int, default=8)
        sp.add_argument("--out", required=True, help="PGM/PPM image grid")

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--fresh", action="store_true", help="ignore existing checkpoints in --out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="prior samples")
    sample_args(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("guided-sample", help="classifier-free guided samples")
    sample_args(sp)
    sp.add_argument("--wmu", type=float, default=0.0)
    sp.add_argument("--wsigma", type=float, default=0.0)
    sp.add_argument("--mode", choices=["extrapolate", "product"], default="extrapolate")
    sp.set_defaults(func=cmd_guided_sample)

    sp = sub.add_parser("reconstruct", help="originals above full-posterior reconstructions")
    ckpt_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("rd-curve", help="rate-distortion table")
    eval_args(sp)
    sp.add_argument("--rates", type=_floats, help="comma-separated budgets in bpd")
    sp.add_argument("--points", type=int, default=6)
    sp.add_argument("--repeats", type=int, default=10)
    sp.set_defaults(func=cmd_rd_curve)

    for name, func, helptext in [("info-curve", cmd_info_curve, "cumulative KL per layer"),
                                 ("kl-ratios", cmd_kl_ratios, "layer KL against its target band"),
                                 ("bpd", cmd_bpd, "rate/distortion decomposition")]:
        sp = sub.add_parser(name, help=helptext)
        eval_args(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("schedule-preview", help="print an information schedule")
    sp.add_argument("--layers", type=int)
    sp.add_argument("--mode", choices=["geometric", "resolution", "uniform"])
    sp.add_argument("--A", type=float)
    sp.add_argument("--B", type=float)
    sp.add_argument("--resolutions", type=_floats)
    sp.add_argument("--config")
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_schedule_preview)

    sp = sub.add_parser("sweep", help="guidance weight grid")
    ckpt_args(sp)
    sp.add_argument("--wmu", type=_floats, default=[0, 0.5, 1, 1.5, 2])
    sp.add_argument("--wsigma", type=_floats, default=[0, 0.5, 1, 2, 3, 4, 5])
    sp.add_argument("--n-per-class", type=int, default=4)
    sp.add_argument("--temp", type=float, default=1.0)
    sp.add_argument("--mode", choices=["extrapolate", "product"], default="extrapolate")
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="train and score the output-layer x schedule grid")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eval-data")
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--limit", type=int, default=512)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("make-toy", help="write the synthetic shapes dataset")
    sp.add_argument("--count", type=int, default=5000)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, FormatError, RunLockedError, NonFiniteError, ValueError, OSError) as exc:
        print(f"hvae {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
