"""``osplab`` command line: train, quant-eval, diagnose, export-hist, absorb.

Exit codes: 0 success, 1 usage or configuration error, 2 training
divergence, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
QUANT_EVAL_HEADER = ["bits", "hadamard", "absorbed", "fp_ppl", "quant_ppl", "mean_kurt", "max_kurt"]

log = logging.getLogger("osplab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="osplab", description="Outlier-safe pre-training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--out-dir")

    q = sub.add_parser("quant-eval", help="perplexity under W-A-KV fake quantization")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--bits", required=True, metavar="W-A-KV")
    q.add_argument("--hadamard", action="store_true", help="online Hadamard on the FFN hidden state")
    q.add_argument("--absorb", action="store_true", help="fold EmbProj into the embeddings first")
    q.add_argument("--corpus", required=True)
    q.add_argument("--max-windows", type=int, default=None)
    q.add_argument("--full-corpus", action="store_true", help="evaluate on all of the corpus, not the held-out tail")
    q.add_argument("--out-dir")

    for name, hist_only in (("diagnose", False), ("export-hist", True)):
        d = sub.add_parser(name, help="outlier diagnostics" if not hist_only else "activation histograms only")
        d.add_argument("--ckpt", required=True)
        d.add_argument("--corpus", required=True)
        d.add_argument("--sink-eps", type=float, default=0.3)
        d.add_argument("--buckets", type=int, default=64)
        d.add_argument("--scale", choices=("linear", "symlog"), default="linear")
        d.add_argument("--sequences", type=int, default=8)
        if not hist_only:
            d.add_argument("--hist-only", action="store_true")
        d.set_defaults(hist_only=hist_only)
        d.add_argument("--out-dir")

    a = sub.add_parser("absorb", help="absorb EmbProj matrices into the embeddings")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--out", required=True)
    return p


def _out_dir(arg: Optional[str]) -> Path:
    path = Path(arg) if arg else Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _threads():
    n = os.environ.get("OSPLAB_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        k = int(n)
    except ValueError:
        raise UsageError("OSPLAB_THREADS must be a positive integer") from None
    if k < 1:
        raise UsageError("OSPLAB_THREADS must be a positive integer")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import load_config
    from .trainer import TrainingDiverged, train

    config = load_config(_require_file(args.config, "config file"))
    resume = None
    if args.resume:
        resume = load_checkpoint(_require_file(args.resume, "checkpoint"))
        if resume.config != config:
            raise UsageError("checkpoint was written with a different configuration")
    _require_file(config.corpus, "corpus")
    out = _out_dir(args.out_dir)
    try:
        res = train(config, out, resume=resume)
    except TrainingDiverged as exc:
        (out / "divergence.json").write_text(json.dumps(exc.record(), indent=2) + "\n")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"metrics: {res.metrics_path}")
    print(f"checkpoint: {res.checkpoint_path}")
    return EXIT_OK


def _load_model(path: str, absorb: bool = False):
    from .checkpoint import load_checkpoint
    from .quant import absorb_emb_proj

    state = load_checkpoint(_require_file(path, "checkpoint"))
    params, cfg = state.params, state.model
    if absorb:
        if not cfg.use_emb_proj:
            raise UsageError("--absorb given but the checkpoint has no EmbProj matrices")
        params, cfg = absorb_emb_proj(params, cfg)
    return params, cfg


def _eval_tokens(corpus: str, full: bool) -> np.ndarray:
    from .data import load_corpus, split_corpus

    toks = load_corpus(_require_file(corpus, "corpus"))
    return toks if full else split_corpus(toks)[1]


def cmd_quant_eval(args) -> int:
    from .diagnostics import activation_kurtosis
    from .model import forward
    from .quant import QuantConfig, QuantError, perplexity, prepare
    from .data import fixed_batch

    try:
        quant = QuantConfig.parse(args.bits, hadamard_ffn=args.hadamard)
    except QuantError as exc:
        raise UsageError(str(exc)) from exc
    params, cfg = _load_model(args.ckpt, args.absorb)
    tokens = _eval_tokens(args.corpus, args.full_corpus)
    out = _out_dir(args.out_dir)

    fp_ppl = perplexity(params, cfg, QuantConfig(), tokens, max_windows=args.max_windows)
    qp, qc = prepare(params, cfg, quant)
    quant_ppl = perplexity(qp, qc, quant, tokens, max_windows=args.max_windows)
    probe, _ = fixed_batch(tokens, 4, min(cfg.max_seq_len, len(tokens) - 1))
    kurt = activation_kurtosis(forward(params, cfg, probe, taps_requested=True).taps)

    row = [quant.label, int(args.hadamard), int(args.absorb), repr(fp_ppl), repr(quant_ppl),
           repr(kurt.mean), repr(kurt.max)]
    path = out / "quant_eval.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(QUANT_EVAL_HEADER)
        w.writerow(row)
    print(",".join(QUANT_EVAL_HEADER))
    print(",".join(map(str, row)))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .data import fixed_batch
    from .diagnostics import export_histograms, run_diagnostics, write_histogram_csv, write_report
    from .model import forward

    if args.buckets < 2 or args.sequences < 1:
        raise UsageError("--buckets must be >= 2 and --sequences >= 1")
    params, cfg = _load_model(args.ckpt)
    tokens = _eval_tokens(args.corpus, False)
    probe, _ = fixed_batch(tokens, args.sequences, min(cfg.max_seq_len, len(tokens) - 1))
    out = _out_dir(args.out_dir)
    if args.hist_only:
        hists = export_histograms(forward(params, cfg, probe, taps_requested=True).taps,
                                  args.buckets, args.scale)
    else:
        report = run_diagnostics(params, cfg, probe, sink_eps=args.sink_eps,
                                 buckets=args.buckets, scale=args.scale)
        write_report(report, out / "diagnostics.json")
        hists = report.histograms
        print(f"mean_kurt={report.aggregate_mean_kurtosis!r} max_kurt={report.aggregate_max_kurtosis!r} "
              f"sink_heads={len(report.sink_heads())} massive={len(report.massive_activations)}")
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    for (layer, site), h in hists.items():
        write_histogram_csv(h, hist_dir / f"layer{layer}_{site}.csv")
    print(f"wrote {len(hists)} histograms to {hist_dir}")
    return EXIT_OK


def cmd_absorb(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import BOS, forward
    from .numerics import RngState, randint
    from .quant import absorb_emb_proj

    state = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    if not state.model.use_emb_proj:
        raise UsageError("checkpoint has no EmbProj matrices (already absorbed?)")
    params, cfg = absorb_emb_proj(state.params, state.model)

    seq = min(64, cfg.max_seq_len)
    ids, _ = randint(RngState(0).split("probe"), 4 * seq, BOS)
    probe = np.concatenate([np.full((4, 1), BOS), ids.reshape(4, seq)[:, :-1]], axis=1)
    before = forward(state.params, state.model, probe).logits.astype(np.float64)
    after = forward(params, cfg, probe).logits.astype(np.float64)
    dev = float(np.max(np.abs(after - before)) / max(np.max(np.abs(before)), 1e-30))

    for name in list(state.opt.tensors):
        if name not in params:
            del state.opt.tensors[name]
    state.params, state.model = params, cfg
    save_checkpoint(state, args.out)
    print(f"max relative logit deviation: {dev:.3e}")
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "quant-eval": cmd_quant_eval,
    "diagnose": cmd_diagnose,
    "export-hist": cmd_diagnose,
    "absorb": cmd_absorb,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import CorpusError
    from .model import ModelError

    try:
        with _threads():
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ModelError) as exc:
        print(f"osplab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, CorpusError, OSError) as exc:
        print(f"osplab {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
