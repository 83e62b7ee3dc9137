"""Round-to-nearest fake quantization, FFN Hadamard fold, EmbProj absorption, perplexity."""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np

from .data import eval_windows
from .model import ModelConfig, ModelError, Params, cross_entropy, forward, is_norm_param
from .numerics import hadamard_matrix, is_power_of_two

FULL_PRECISION = 16
# axis along which one quantization group extends (None = whole tensor)
GRANULARITY_AXES = {
    "per_token": -1,
    "per_head_per_token": -1,
    "per_output_channel": 0,
    "per_tensor": None,
}
_BITS_RE = re.compile(r"^(\d+)-(\d+)-(\d+)$")


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    w_bits: int = 16
    a_bits: int = 16
    kv_bits: int = 16
    w_symmetric: bool = True
    a_symmetric: bool = False
    kv_symmetric: bool = False
    hadamard_ffn: bool = False
    w_granularity: str = "per_output_channel"
    a_granularity: str = "per_token"
    kv_granularity: str = "per_head_per_token"

    def __post_init__(self):
        for name in ("w_bits", "a_bits", "kv_bits"):
            _check_bits(getattr(self, name))

    @classmethod
    def parse(cls, text: str, hadamard_ffn: bool = False) -> "QuantConfig":
        """Parse a ``W-A-KV`` triple such as ``4-8-16``."""
        m = _BITS_RE.match(text.strip())
        if not m:
            raise QuantError(f"bit config must look like W-A-KV (e.g. 4-8-16), got {text!r}")
        w, a, kv = (int(g) for g in m.groups())
        return cls(w_bits=w, a_bits=a, kv_bits=kv, hadamard_ffn=hadamard_ffn)

    @property
    def label(self) -> str:
        return f"{self.w_bits}-{self.a_bits}-{self.kv_bits}"

    @property
    def is_full_precision(self) -> bool:
        return self.w_bits == self.a_bits == self.kv_bits == FULL_PRECISION


def _check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not 2 <= bits <= 16:
        raise QuantError(f"bit-width must be an integer in [2, 16], got {bits!r}")


def rtn_fake_quantize(x: np.ndarray, bits: int, granularity: str = "per_token",
                      symmetric: bool = False) -> np.ndarray:
    """Quantize to an n-bit grid with round-to-nearest, then dequantize.

    Asymmetric groups use the [min, max] range widened to include zero, so
    the zero point always lands on the grid.  A group whose scale would be
    zero (all zeros) is passed through, as is everything at 16 bits.
    """
    _check_bits(bits)
    if bits == FULL_PRECISION:
        return x
    if granularity not in GRANULARITY_AXES:
        raise QuantError(f"unknown granularity {granularity!r}")
    axis = GRANULARITY_AXES[granularity]
    x = np.asarray(x)
    if symmetric:
        qmax = 2 ** (bits - 1) - 1
        scale = np.max(np.abs(x), axis=axis, keepdims=True) / qmax
        safe = np.where(scale > 0, scale, 1.0)
        q = np.clip(np.rint(x / safe), -qmax - 1, qmax)
        out = q * safe
    else:
        levels = 2**bits - 1
        lo = np.minimum(np.min(x, axis=axis, keepdims=True), 0)
        hi = np.maximum(np.max(x, axis=axis, keepdims=True), 0)
        scale = (hi - lo) / levels
        safe = np.where(scale > 0, scale, 1.0)
        zero = np.clip(np.rint(-lo / safe), 0, levels)
        q = np.clip(np.rint(x / safe) + zero, 0, levels)
        out = safe * (q - zero)
    return np.where(scale > 0, out, x).astype(x.dtype, copy=False)


def quantize_weights(params: Params, quant: QuantConfig) -> Params:
    """Fake-quantize every matmul weight (embeddings included); norm gains untouched."""
    if quant.w_bits == FULL_PRECISION:
        return dict(params)
    return {
        name: w if (is_norm_param(name) or w.ndim != 2)
        else rtn_fake_quantize(w, quant.w_bits, quant.w_granularity, quant.w_symmetric)
        for name, w in params.items()
    }


def fold_hadamard(params: Params, config: ModelConfig, inverse: bool = False) -> tuple[Params, ModelConfig]:
    """Rotate each W_down by H^T so the FFN hidden state can be rotated by H online.

    ``inverse=True`` undoes a previous fold.
    """
    if not is_power_of_two(config.d_ffn):
        raise QuantError(f"d_ffn={config.d_ffn} is not a power of two")
    if config.ffn_hadamard == (not inverse):
        raise QuantError("model is already folded" if not inverse else "model is not folded")
    had = hadamard_matrix(config.d_ffn)
    rot = had if inverse else had.T
    out = dict(params)
    for i in range(config.n_layers):
        name = f"layers.{i}.w_down"
        out[name] = (rot @ params[name].astype(np.float64)).astype(params[name].dtype)
    return out, dataclasses.replace(config, ffn_hadamard=not inverse)


def absorb_emb_proj(params: Params, config: ModelConfig) -> tuple[Params, ModelConfig]:
    """Merge the two EmbProj matrices into the embedding and unembedding tables."""
    if not config.use_emb_proj or "emb_proj_in" not in params:
        raise QuantError("model has no embedding projections to absorb")
    out = {k: v for k, v in params.items() if not k.startswith("emb_proj")}
    dt = params["token_embedding"].dtype
    out["token_embedding"] = (params["token_embedding"].astype(np.float64)
                              @ params["emb_proj_in"].astype(np.float64)).astype(dt)
    out["unembedding"] = (params["emb_proj_out"].astype(np.float64)
                          @ params["unembedding"].astype(np.float64)).astype(dt)
    # keep canonical parameter order
    order = [k for k in params if not k.startswith("emb_proj")]
    return {k: out[k] for k in order}, dataclasses.replace(config, use_emb_proj=False)


def prepare(params: Params, config: ModelConfig, quant: QuantConfig) -> tuple[Params, ModelConfig]:
    """Fold Hadamard (if requested) and then quantize weights."""
    if quant.hadamard_ffn and not config.ffn_hadamard:
        params, config = fold_hadamard(params, config)
    return quantize_weights(params, quant), config


def hooks(quant: QuantConfig):
    act = None
    kv = None
    if quant.a_bits != FULL_PRECISION:
        act = partial(rtn_fake_quantize, bits=quant.a_bits, granularity=quant.a_granularity,
                      symmetric=quant.a_symmetric)
    if quant.kv_bits != FULL_PRECISION:
        kv = partial(rtn_fake_quantize, bits=quant.kv_bits, granularity=quant.kv_granularity,
                     symmetric=quant.kv_symmetric)
    return act, kv


def quantized_forward(params: Params, config: ModelConfig, quant: QuantConfig, tokens) -> np.ndarray:
    """Forward pass with dynamic activation and KV fake quantization.

    Weights are expected to have gone through :func:`prepare`.
    """
    if quant.hadamard_ffn and not config.ffn_hadamard:
        raise QuantError("hadamard_ffn requested but W_down has not been folded")
    act, kv = hooks(quant)
    return forward(params, config, tokens, act_quant=act, kv_quant=kv).logits


def perplexity(params: Params, config: ModelConfig, quant: Optional[QuantConfig], corpus_tokens,
               max_windows: Optional[int] = None, batch_size: int = 8) -> float:
    """exp(mean token cross-entropy) over non-overlapping max_seq_len windows."""
    quant = quant or QuantConfig()
    toks = np.asarray(corpus_tokens)
    if toks.size < 2:
        raise QuantError("corpus must hold at least 2 tokens")
    total, count = 0.0, 0
    for inputs, targets in eval_windows(toks, config.max_seq_len, max_windows, batch_size):
        logits = quantized_forward(params, config, quant, inputs)
        n = targets.size
        total += cross_entropy(logits, targets) * n
        count += n
    if count == 0:
        raise ModelError("no evaluation windows")
    return float(math.exp(total / count))
