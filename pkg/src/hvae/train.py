"""Training loop: batches, Adamax updates, metrics log and checkpoints."""

import json
import logging
import os
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import Checkpoint, audit, load_checkpoint, random_flips, save_checkpoint
from .model import HVAE
from .optim import Adamax, LRSchedule, OptimizerState, SkipEvent
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

CHECKPOINT_GLOB = "ckpt-*.hvck"


class RunLockedError(RuntimeError):
    pass


class RunLock:
    """Single-writer guard on a run directory (``O_EXCL`` lock file)."""

    def __init__(self, directory):
        self.path = Path(directory) / "LOCK"
        self.held = False

    def acquire(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"{self.path} exists; another run is writing here") from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self.held = True
        return self

    def release(self):
        if self.held:
            self.path.unlink(missing_ok=True)
            self.held = False

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()


def latest_checkpoint(directory):
    found = sorted(Path(directory).glob(CHECKPOINT_GLOB))
    return found[-1] if found else None


def _summary(lams):
    lams = np.asarray(lams, dtype=np.float64)
    return {"min": float(lams.min()), "mean": float(lams.mean()), "max": float(lams.max())}


class Trainer:
    """Owns a model, its optimizer state and the training rng stream.

    Gradients are taken of the loss divided by the number of pixel
    dimensions, so the step size does not depend on image size.
    """

    def __init__(self, config, data, out_dir=None):
        self.config = config
        tc = config.train
        self.data = data
        data.check_labels(config.model.num_classes)
        if data.shape != (config.model.image_size, config.model.image_size, config.model.channels):
            raise ValueError(f"dataset images are {data.shape}, config expects "
                             f"{config.model.image_size}x{config.model.image_size}x{config.model.channels}")
        self.model = HVAE(config.model, seed=tc.seed)
        self.schedule = self.model.default_schedule()
        self.optimizer = Adamax(
            schedule=LRSchedule(tc.max_lr, tc.min_lr, tc.warmup_steps, tc.iterations),
            ema_decay=tc.ema_decay,
            skip_threshold=tc.skip_threshold,
        )
        self.state = OptimizerState.create(self.model.state_arrays())
        self.rng = np.random.default_rng([tc.seed, 1])
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._lock = None
        self._log_file = None

    # ------------------------------------------------------------------

    @property
    def step_count(self):
        return self.state.step

    def sample_batch(self):
        tc = self.config.train
        idx = self.rng.integers(0, len(self.data), tc.batch_size)
        x = self.data.images(idx)
        if tc.flip:
            x = random_flips(x, self.rng)
        return x, self.data.batch_labels(idx)

    def train_step(self):
        """One optimizer step; returns the metrics record."""
        model = self.model
        x, label = self.sample_batch()
        scale = 1.0 / model.config.dims
        try:
            with T.Graph() as g:
                loss, info = model.training_loss(x, label, self.schedule, self.rng)
                T.backward(loss * scale, g)
        except NonFiniteError as exc:
            # counted like an over-threshold gradient: advance, leave weights alone
            self.state.step += 1
            self.state.skips.append(SkipEvent(self.state.step, float("inf")))
            log.warning("step %d skipped: %s", self.state.step, exc)
            return {"step": self.state.step, "loss": None, "recon": None, "rate": None, "kl": None,
                    "lambda": None, "lr": self.optimizer.schedule(self.state.step), "skipped": True,
                    "grad_norm": None, "error": str(exc)}
        grads = {k: t.grad for k, t in model.params.items()}
        applied, norm, lr = self.optimizer.step(model.state_arrays(), grads, self.state)
        kls = info["kl"]
        return {
            "step": self.state.step,
            "loss": float(loss.data),
            "recon": info["recon"],
            "rate": float(sum(kls)),
            "kl": [float(v) for v in kls],
            "lambda": _summary(info["lambdas"]),
            "lr": lr,
            "skipped": not applied,
            "grad_norm": norm,
        }

    def train(self, steps=None, callback=None):
        """Run until ``steps`` total steps (default: configured iterations)."""
        tc = self.config.train
        target = tc.iterations if steps is None else steps
        records = []
        while self.state.step < target:
            rec = self.train_step()
            records.append(rec)
            if self._log_file is not None and rec["step"] % tc.log_every == 0:
                self._log_file.write(json.dumps(rec) + "\n")
                self._log_file.flush()
            if self.out_dir is not None and tc.checkpoint_every and rec["step"] % tc.checkpoint_every == 0:
                self.save()
            if callback is not None:
                callback(rec)
        if self.out_dir is not None and (not tc.checkpoint_every or self.state.step % tc.checkpoint_every):
            self.save()
        return records

    # ------------------------------------------------------------------
    # persistence

    def checkpoint(self):
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.model.state_arrays().items()},
            opt_state=OptimizerState(
                m={k: v.copy() for k, v in self.state.m.items()},
                u={k: v.copy() for k, v in self.state.u.items()},
                ema={k: v.copy() for k, v in self.state.ema.items()},
                step=self.state.step,
                applied=self.state.applied,
                skips=list(self.state.skips),
            ),
            rng_state=self.rng.bit_generator.state,
        )

    def restore(self, ckpt):
        audit(ckpt, self.model)
        self.model.load_arrays(ckpt.params)
        st = ckpt.opt_state
        self.state = OptimizerState(
            m={k: v.copy() for k, v in st.m.items()},
            u={k: v.copy() for k, v in st.u.items()},
            ema={k: v.copy() for k, v in st.ema.items()},
            step=st.step,
            applied=st.applied,
            skips=list(st.skips),
        )
        self.rng.bit_generator.state = ckpt.rng_state

    def save(self, path=None):
        if path is None:
            path = self.out_dir / f"ckpt-{self.state.step:08d}.hvck"
        save_checkpoint(path, self.checkpoint())
        return path

    def open_run(self, resume=True):
        """Lock the run directory, echo the config and open the metrics log.

        With ``resume`` and an existing checkpoint, training continues from it.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._lock = RunLock(self.out_dir).acquire()
        try:
            last = latest_checkpoint(self.out_dir) if resume else None
            if last is not None:
                ckpt = load_checkpoint(last, self.model)
                if ckpt.config.model != self.config.model:
                    raise ValueError(f"{last}: model config differs from the requested one")
                self.restore(ckpt)
                log.info("resumed from %s at step %d", last, self.state.step)
            (self.out_dir / "config.cfg").write_text(self.config.dumps())
            self._log_file = open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8")
        except BaseException:
            self.close()
            raise
        return self

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
        if self._lock is not None:
            self._lock.release()
            self._lock = None

    def __enter__(self):
        return self if self._lock is not None else self.open_run()

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------------

    def ema_model(self):
        """A copy of the model carrying the EMA shadow weights."""
        return model_from_arrays(self.config.model, self.state.ema)


def model_from_arrays(model_config, arrays):
    model = HVAE(model_config)
    model.load_arrays(arrays)
    return model


def model_from_checkpoint(path, use_ema=True):
    ckpt = load_checkpoint(path)
    arrays = ckpt.opt_state.ema if use_ema else ckpt.params
    return model_from_arrays(ckpt.config.model, arrays), ckpt


def ablation_configs(config):
    """The 2x2 grid {gaussian, dmol} x {schedule on, off} from one config."""
    sched = config.model.schedule if config.model.schedule != "none" else "geometric"
    grid = {}
    for output in ("gaussian", "dmol"):
        grid[f"{output}+schedule"] = config.replace(output=output, schedule=sched)
        grid[output] = config.replace(output=output, schedule="none")
    return grid
