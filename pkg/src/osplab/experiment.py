"""Desk-scale Adam-vs-OSP comparison with a small learning-rate sweep.

Arm ``adam``: AdamAll + RMSNorm.  Arm ``osp``: MuonDecoupled + SSNorm +
EmbProj.  Each arm is trained at every sweep LR; the run with the lowest
final held-out loss represents the arm.  Finished runs (``final.ckpt``
present) are reused, so the sweep can be interrupted and restarted.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .config import TrainConfig
from .data import load_corpus, split_corpus
from .model import ModelConfig
from .optim import Hyper
from .quant import QuantConfig, absorb_emb_proj, perplexity, prepare
from .trainer import read_metrics, train

log = logging.getLogger(__name__)

DESK_MODEL = ModelConfig(n_layers=4, d_model=128, n_heads=4, d_ffn=512, vocab_size=257, max_seq_len=256)
ARMS = {
    "adam": dict(mode="adam_all", norm_kind="rmsnorm", use_emb_proj=False),
    "osp": dict(mode="muon_decoupled", norm_kind="ssnorm", use_emb_proj=True),
}
SWEEP_LRS = (3e-4, 1e-3, 3e-3)
BATCH, SEQ = 16, 256
DEFAULT_STEPS = 4883  # 4883 * 4096 tokens ~= 20M
EVAL_WINDOWS = 64


@dataclass
class ArmResult:
    arm: str
    lr: float
    run_dir: str
    final_eval_loss: float
    final_mean_kurt: float
    final_max_kurt: float
    late_max_mean_kurt: float  # max of mean kurtosis over the last 25% of logged steps
    ppl_fp: float
    ppl_444: float
    ppl_444_hadamard: float

    @property
    def quant_ratio(self) -> float:
        return self.ppl_444 / self.ppl_fp

    @property
    def heldout_loss(self) -> float:
        # 64 windows (16k tokens): a steadier selection signal than the 8-sequence eval batch
        return math.log(self.ppl_fp)


def arm_config(arm: str, lr: float, corpus: str, total_steps: int, seed: int = 0,
               interval: int = 100) -> TrainConfig:
    arm_def = ARMS[arm]
    model = replace(DESK_MODEL, norm_kind=arm_def["norm_kind"], use_emb_proj=arm_def["use_emb_proj"])
    return TrainConfig(
        corpus=str(corpus), total_tokens=total_steps * BATCH * SEQ, mode=arm_def["mode"], model=model,
        hyper=Hyper(adam_lr=lr, muon_lr=lr), batch_size=BATCH, seq_len=SEQ, seed=seed,
        eval_interval=interval, diagnostics_interval=interval,
    )


def run_dir(out_dir, arm: str, lr: float) -> Path:
    return Path(out_dir) / f"{arm}_lr{lr:g}"


def evaluate_run(arm: str, lr: float, directory: Path, heldout: np.ndarray,
                 windows: int = EVAL_WINDOWS) -> ArmResult:
    rows = read_metrics(directory / "metrics.csv")
    total = rows[-1]["step"]
    late = [r["mean_kurt"] for r in rows if r["step"] >= 0.75 * total and not math.isnan(r["mean_kurt"])]
    state = load_checkpoint(directory / "final.ckpt")
    params, cfg = state.params, state.model
    if cfg.use_emb_proj:
        # deployment form: projections folded into the embedding tables
        params, cfg = absorb_emb_proj(params, cfg)
    ppl = {}
    for label, q in (("fp", QuantConfig()), ("q", QuantConfig.parse("4-4-4")),
                     ("qh", QuantConfig.parse("4-4-4", hadamard_ffn=True))):
        qp, qc = prepare(params, cfg, q)
        ppl[label] = perplexity(qp, qc, q, heldout, max_windows=windows)
    return ArmResult(arm, lr, str(directory), rows[-1]["eval_loss"], rows[-1]["mean_kurt"],
                     rows[-1]["max_kurt"], max(late), ppl["fp"], ppl["q"], ppl["qh"])


def run_desk_experiment(corpus, out_dir, total_steps: int = DEFAULT_STEPS,
                        lrs: Sequence[float] = SWEEP_LRS, arms: Sequence[str] = tuple(ARMS),
                        seed: int = 0, interval: int = 100) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, heldout = split_corpus(load_corpus(corpus))
    sweep: dict[str, list[ArmResult]] = {arm: [] for arm in arms}
    # arms interleaved per LR so a partial sweep already compares like with like
    for lr in lrs:
        for arm in arms:
            d = run_dir(out, arm, lr)
            cfg = arm_config(arm, lr, corpus, total_steps, seed, interval)
            if not _finished(d, cfg):
                log.info("training %s lr=%g for %d steps", arm, lr, total_steps)
                train(cfg, d)
            result = evaluate_run(arm, lr, d, heldout)
            log.info("%s lr=%g: %s", arm, lr, _as_dict(result))
            sweep[arm].append(result)
    best = {arm: min(res, key=lambda r: r.heldout_loss) for arm, res in sweep.items()}
    summary = {
        "total_steps": total_steps,
        "tokens": total_steps * BATCH * SEQ,
        "sweep": {arm: [_as_dict(r) for r in res] for arm, res in sweep.items()},
        "best": {arm: _as_dict(r) for arm, r in best.items()},
    }
    (out / "results.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _finished(directory: Path, cfg: TrainConfig) -> bool:
    ckpt = directory / "final.ckpt"
    if not ckpt.exists() or not (directory / "metrics.csv").exists():
        return False
    saved = load_checkpoint(ckpt).config
    # the same corpus may be named by a relative or an absolute path
    same_corpus = Path(saved.corpus).resolve() == Path(cfg.corpus).resolve()
    return same_corpus and replace(saved, corpus=cfg.corpus) == cfg


def _as_dict(r: ArmResult) -> dict:
    d = dict(r.__dict__)
    d["quant_ratio"] = r.quant_ratio
    d["heldout_loss"] = r.heldout_loss
    return d


def load_summary(out_dir) -> Optional[dict]:
    p = Path(out_dir) / "results.json"
    return json.loads(p.read_text()) if p.exists() else None
