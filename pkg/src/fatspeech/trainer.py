"""The optimization loop: warmup schedule, Adam, clipping, checkpoints, resume.

Every stochastic draw a step makes (batch order, masking, dropout) is keyed
by the step number, never by consumed generator state, so a run restarted
from a checkpoint replays the exact arithmetic of an uninterrupted one.
Checkpoints carry a sidecar file with the optimizer moments to make that
replay bitwise for the stored float32 parameters.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import derive_seed
from .corpus import schedule
from .errors import DataError, DivergenceError
from .model import load_checkpoint, save_checkpoint, average_checkpoints, build_model
from .model.checkpoint import write_raw_checkpoint
from .numerics import Tape
from .objectives import loss_fat_mlm, loss_fat_st

_TAG_DROPOUT = 0xD0

LOG_COLUMNS = ["step", "stream", "loss_s", "loss_x", "loss_y", "loss_st",
               "loss_mt", "loss_ctc", "total", "lr", "grad_norm", "dev_total"]


def noam_lr(step, d_model, warmup, lr_scale=1.0):
    """Inverse-sqrt schedule with linear warmup, in units of d_model**-0.5."""
    s = max(1, int(step))
    return lr_scale * d_model ** -0.5 * min(s ** -0.5, s * warmup ** -1.5)


class AdamState:
    """First and second moment accumulators plus the shared step count.

    Moments are created lazily per parameter, in the parameter's dtype, the
    first time that parameter receives a gradient.
    """

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0

    def moments(self, name, like):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        return self.m[name], self.v[name]

    def save(self, path, config, vocab_hash):
        tensors = {}
        for name, arr in self.m.items():
            tensors[f"m.{name}"] = arr
            tensors[f"v.{name}"] = self.v[name]
        write_raw_checkpoint(path, config, self.step, vocab_hash, tensors)

    @classmethod
    def load(cls, path):
        ck = load_checkpoint(path)
        state = cls()
        state.step = ck.step
        for name, arr in ck.tensors.items():
            kind, param = name.split(".", 1)
            target = state.m if kind == "m" else state.v
            target[param] = arr
        return state


def global_grad_norm(params):
    """L2 norm over every gradient, accumulated in float64."""
    total = math.fsum(
        float(np.sum(np.square(p.grad.astype(np.float64))))
        for _, p in sorted(params.items()) if p.grad is not None)
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in sorted(params.items()):
            if p.grad is not None:
                p.grad *= factor
    return norm


def adam_update(params, state, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """One Adam step over every parameter that received a gradient.

    Parameters without a gradient this step keep their moments untouched;
    bias correction uses the shared step count.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in sorted(params.items()):
        g = p.grad
        if g is None:
            continue
        m, v = state.moments(name, p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainSummary:
    final_path: Path
    last_step: int
    checkpoints: list = field(default_factory=list)
    log_path: Path = None


def _csv_value(parts, key):
    return f"{parts[key]:.6f}" if key in parts else ""


def _evaluate_dev(model, dev_streams, mode, weights, smoothing, seed):
    """Mean reported loss over every dev batch, forward passes only.

    Masked draws are pinned to step 0 so successive evaluations of the same
    data are comparable.
    """
    totals = []
    for name, batches in sorted(dev_streams.items()):
        for batch in batches:
            if mode == "pretrain":
                bd = loss_fat_mlm(model, batch.examples, step=0, seed=seed)
            else:
                bd = loss_fat_st(model, batch, name, step=0, seed=seed,
                                 weights=weights, smoothing=smoothing)
            totals.append(bd.report_total)
    return math.fsum(totals) / len(totals) if totals else None


def run_training(model, streams, cfg, out_dir, vocab_hash, mode,
                 start_step=0, adam=None, dev_streams=None, log_cb=None):
    """Drive `cfg.train.steps` optimization steps and write checkpoints.

    mode is "pretrain" (fused masked objective on every batch) or
    "finetune" (per-stream translation losses). Set start_step and adam to
    continue a run whose checkpoint produced `model`. Returns a TrainSummary
    whose final_path is the average of the last few checkpoints.
    """
    if mode not in ("pretrain", "finetune"):
        raise DataError(f"run_training: unknown mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    for p in params.values():
        p.requires_grad = True
    adam = adam or AdamState()
    train = cfg.train
    weights = {"st": train.weight_st, "mt": train.weight_mt,
               "mlm": train.weight_mlm, "ctc": train.weight_ctc}
    batches = schedule(streams, seed=train.seed,
                       proportional=train.proportional)
    for _ in range(start_step):
        next(batches)

    log_path = out_dir / "train_log.csv"
    fresh_log = start_step == 0 or not log_path.exists()
    log_file = open(log_path, "w" if fresh_log else "a",
                    encoding="utf-8", newline="")
    writer = csv.writer(log_file)
    if fresh_log:
        writer.writerow(LOG_COLUMNS)

    last_ckpt = None
    try:
        for step in range(start_step + 1, train.steps + 1):
            stream_name, batch = next(batches)
            rng = (np.random.default_rng(derive_seed(train.seed, step,
                                                     _TAG_DROPOUT))
                   if cfg.model.dropout > 0 else None)
            with Tape() as tape:
                if mode == "pretrain":
                    bd = loss_fat_mlm(model, batch.examples, step=step,
                                      seed=train.seed, rng=rng)
                else:
                    bd = loss_fat_st(model, batch, stream_name, step=step,
                                     seed=train.seed, rng=rng,
                                     weights=weights,
                                     smoothing=cfg.model.label_smoothing)
                total = bd.report_total
                if not math.isfinite(total):
                    raise DivergenceError(step, last_ckpt)
                tape.backward(bd.total)
            norm = clip_gradients(params, train.clip_norm)
            if not math.isfinite(norm):
                raise DivergenceError(step, last_ckpt)
            lr = noam_lr(step, cfg.model.d_model, train.warmup,
                         train.lr_scale)
            adam_update(params, adam, lr, train.beta1, train.beta2,
                        train.adam_eps)
            for p in params.values():
                p.grad = None

            at_ckpt = step % train.ckpt_interval == 0 or step == train.steps
            dev_total = None
            if at_ckpt:
                if dev_streams:
                    dev_total = _evaluate_dev(model, dev_streams, mode,
                                              weights,
                                              cfg.model.label_smoothing,
                                              train.seed)
                path = out_dir / f"step_{step:06d}.fatc"
                save_checkpoint(path, model, step, vocab_hash)
                adam.save(path.with_suffix(".opt.fatc"), model.config,
                          vocab_hash)
                last_ckpt = path
            writer.writerow([
                step, stream_name,
                _csv_value(bd.parts, "s"), _csv_value(bd.parts, "x"),
                _csv_value(bd.parts, "y"), _csv_value(bd.parts, "st"),
                _csv_value(bd.parts, "mt"), _csv_value(bd.parts, "ctc"),
                f"{total:.6f}", f"{lr:.8f}", f"{norm:.6f}",
                "" if dev_total is None else f"{dev_total:.6f}"])
            log_file.flush()
            if log_cb is not None:
                log_cb(step, stream_name, bd, lr, norm, dev_total)
    finally:
        log_file.close()

    final_path = out_dir / "final.fatc"
    saved = sorted(out_dir.glob("step_??????.fatc"))
    if not saved:
        raise DataError("run_training: no checkpoints were written")
    tail = saved[-min(train.average_last, len(saved)):]
    final = average_checkpoints([load_checkpoint(p) for p in tail])
    write_raw_checkpoint(final_path, final.config, final.step,
                         final.vocab_hash, final.tensors)
    return TrainSummary(final_path=final_path, last_step=train.steps,
                        checkpoints=saved, log_path=log_path)


def resume_state(ckpt_path):
    """Rebuild (model, adam, step) from a checkpoint and its sidecar.

    The sidecar written next to every checkpoint is required; without the
    optimizer moments a continued run would not reproduce an uninterrupted
    one.
    """
    ckpt_path = Path(ckpt_path)
    ck = load_checkpoint(ckpt_path)
    opt_path = ckpt_path.with_suffix(".opt.fatc")
    if not opt_path.exists():
        raise DataError(
            f"resume_state: missing optimizer sidecar {opt_path}")
    model = build_model(ck)
    adam = AdamState.load(opt_path)
    return model, adam, ck.step, ck.vocab_hash
