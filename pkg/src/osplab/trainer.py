"""Training loop with periodic evaluation, outlier diagnostics and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import fixed_batch, load_corpus, sample_batch, split_corpus
from .diagnostics import activation_kurtosis
from .model import backward, cross_entropy, forward, init_params
from .numerics import RngState
from .optim import apply_updates, init_state, lr_multiplier

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "tokens_seen", "lr_mult", "train_loss", "eval_loss", "mean_kurt", "max_kurt", "wall_ms"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, reason: str = "non-finite loss"):
        self.step = step
        self.loss = loss
        self.reason = reason
        super().__init__(f"{reason} at step {step} (loss={loss!r})")

    def record(self) -> dict:
        return {"step": self.step, "loss": repr(self.loss), "reason": self.reason}


@dataclass
class TrainResult:
    state: TrainState
    metrics_path: Path
    checkpoint_path: Path


def init_train_state(config: TrainConfig) -> TrainState:
    dtype = np.dtype(config.dtype)
    params = init_params(config.model, config.seed, dtype)
    opt = init_state(params, config.mode, config.hyper)
    return TrainState(config, 0, params, opt, RngState(config.seed).split("data"))


def _fmt(x: Optional[float]) -> str:
    return "nan" if x is None else repr(float(x))


def evaluate(state: TrainState, eval_inputs, eval_targets, diagnostics: bool):
    res = forward(state.params, state.model, eval_inputs, taps_requested=diagnostics)
    eval_loss = cross_entropy(res.logits, eval_targets)
    if not diagnostics:
        return eval_loss, None, None
    k = activation_kurtosis(res.taps)
    return eval_loss, k.mean, k.max


def _prepare_metrics(path: Path, resume_step: Optional[int]) -> None:
    """Fresh header, or (on resume) keep only rows logged before the resume step."""
    rows = []
    if resume_step is not None and path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows = [r for r in reader if r and int(r[0]) < resume_step]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "tokens_seen") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def train(config: TrainConfig, out_dir, resume: Optional[TrainState] = None,
          stop_at: Optional[int] = None) -> TrainResult:
    """Run (or continue) training, writing ``metrics.csv`` and checkpoints under ``out_dir``.

    ``stop_at`` ends the run early after that many updates (with a
    checkpoint), which is how interrupted-run resumption is exercised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokens = load_corpus(config.corpus)
    train_toks, heldout = split_corpus(tokens)
    eval_in, eval_tgt = fixed_batch(heldout, config.eval_sequences, config.seq_len)
    schedule = config.schedule
    total = config.total_steps
    end = total if stop_at is None else min(stop_at, total)

    state = resume if resume is not None else init_train_state(config)
    metrics_path = out / "metrics.csv"
    _prepare_metrics(metrics_path, state.step if resume is not None else None)
    t0 = time.perf_counter()

    def log_row(step, train_loss):
        do_eval = step % config.eval_interval == 0 or step == total
        do_diag = step % config.diagnostics_interval == 0 or step == total
        if not (do_eval or do_diag):
            return
        eval_loss, mk, xk = evaluate(state, eval_in, eval_tgt, do_diag)
        wall = int((time.perf_counter() - t0) * 1000) if config.record_wall_time else 0
        row = [step, step * config.tokens_per_step, _fmt(lr_multiplier(step, schedule)), _fmt(train_loss),
               _fmt(eval_loss if do_eval else None), _fmt(mk), _fmt(xk), wall]
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)
        log.info("step %d loss %.4f eval %.4f kurt %s", step, train_loss, eval_loss, mk)

    while state.step < end:
        step = state.step
        inputs, targets, rng = sample_batch(train_toks, config.batch_size, config.seq_len, state.rng)
        loss, grads = backward(state.params, state.model, inputs, targets)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(step, loss, "non-finite gradient")
        state.rng = rng
        log_row(step, loss)
        params, opt = apply_updates(state.params, grads, state.opt, lr_multiplier(step, schedule))
        if not all(np.all(np.isfinite(w)) for w in params.values()):
            raise TrainingDiverged(step, loss, "non-finite parameters")
        state.params, state.opt, state.step = params, opt, step + 1
        if config.checkpoint_interval and state.step % config.checkpoint_interval == 0 and state.step < total:
            save_checkpoint(state, out / f"step_{state.step:06d}.ckpt")

    if state.step == total:
        inputs, targets, rng = sample_batch(train_toks, config.batch_size, config.seq_len, state.rng)
        loss = cross_entropy(forward(state.params, state.model, inputs).logits, targets)
        if not math.isfinite(loss):
            raise TrainingDiverged(total, loss)
        state.rng = rng
        log_row(total, loss)
        ckpt = out / "final.ckpt"
    else:
        ckpt = out / f"step_{state.step:06d}.ckpt"
    save_checkpoint(state, ckpt)
    return TrainResult(state, metrics_path, ckpt)


def resume_training(checkpoint_path, out_dir, stop_at: Optional[int] = None) -> TrainResult:
    state = load_checkpoint(checkpoint_path)
    return train(state.config, out_dir, resume=state, stop_at=stop_at)
