"""LLaMA-style decoder with hand-written forward and backward passes.

Weights are stored input-major (``x @ W``), so a projection from ``d_in``
to ``d_out`` is a ``[d_in, d_out]`` array and its output channels are the
columns.  Parameters are a plain ordered ``dict[str, np.ndarray]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import RngState, gaussian, hadamard_matrix, is_power_of_two, orthogonal_init

NORM_KINDS = ("rmsnorm", "srmsnorm", "ssnorm")
SITES = ("mhsa_input", "ffn_input")
NORM_EPS = 1e-6
INIT_STD = 0.02
BOS = 256

Params = dict[str, np.ndarray]
Hook = Callable[[np.ndarray], np.ndarray]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 257
    max_seq_len: int = 256
    norm_kind: str = "rmsnorm"
    use_emb_proj: bool = False
    rope_base: float = 10000.0
    # set by fold_hadamard: W_down is pre-rotated and the FFN hidden state is rotated online
    ffn_hadamard: bool = False

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ModelError("head dimension must be even for rotary embeddings")
        if self.norm_kind not in NORM_KINDS:
            raise ModelError(f"norm_kind must be one of {NORM_KINDS}")
        if self.ffn_hadamard and not is_power_of_two(self.d_ffn):
            raise ModelError("d_ffn must be a power of two for the Hadamard fold")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ActivationTap:
    layer: int
    site: str
    values: np.ndarray  # [tokens, d_model], post-normalization


@dataclass
class ForwardResult:
    logits: np.ndarray
    taps: list[ActivationTap] = field(default_factory=list)
    attention_maps: Optional[list[np.ndarray]] = None  # per layer, [batch, heads, q, k]


# --- parameters -----------------------------------------------------------

def is_norm_param(name: str) -> bool:
    return name.endswith("norm")


def layer_matrix_names(i: int) -> list[str]:
    return [f"layers.{i}.{w}" for w in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    norm_shape = {"rmsnorm": (d,), "ssnorm": (1,), "srmsnorm": None}[config.norm_kind]
    shapes: dict[str, tuple[int, ...]] = {"token_embedding": (v, d)}
    if config.use_emb_proj:
        shapes["emb_proj_in"] = (d, d)
    for i in range(config.n_layers):
        if norm_shape:
            shapes[f"layers.{i}.attn_norm"] = norm_shape
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"layers.{i}.{w}"] = (d, d)
        if norm_shape:
            shapes[f"layers.{i}.ffn_norm"] = norm_shape
        shapes[f"layers.{i}.w_gate"] = (d, f)
        shapes[f"layers.{i}.w_up"] = (d, f)
        shapes[f"layers.{i}.w_down"] = (f, d)
    if norm_shape:
        shapes["final_norm"] = norm_shape
    if config.use_emb_proj:
        shapes["emb_proj_out"] = (d, d)
    shapes["unembedding"] = (d, v)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Params:
    """Gaussian(0.02) matrices, orthogonal EmbProj, zero unembedding.

    SSNorm's gamma starts at sqrt(d) so every norm kind begins with the
    same activation scale as a unit-gain RMSNorm.
    """
    root = RngState(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        rng = root.split(name)
        if name == "unembedding":
            w = np.zeros(shape)
        elif name.startswith("emb_proj"):
            w, _ = orthogonal_init(*shape, rng)
        elif is_norm_param(name):
            w = np.full(shape, math.sqrt(config.d_model) if config.norm_kind == "ssnorm" else 1.0)
        else:
            w, _ = gaussian(rng, int(np.prod(shape)), 0.0, INIT_STD)
            w = w.reshape(shape)
        params[name] = w.astype(dtype)
    return params


def check_params(params: Params, config: ModelConfig) -> None:
    shapes = param_shapes(config)
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ModelError(f"parameter set mismatch (missing={missing}, unexpected={extra})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ModelError(f"{name}: expected shape {shape}, got {params[name].shape}")


def count_params(params: Params) -> int:
    return sum(int(w.size) for w in params.values())


# --- building blocks --------------------------------------------------------

def normalize(x: np.ndarray, kind: str, gamma: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise normalization of ``x[..., d]``."""
    return _norm_fwd(x, kind, gamma)[0]


def _norm_fwd(x, kind, gamma):
    d = x.shape[-1]
    n = np.sqrt(_rowdot(x, x))
    # eps acts as a floor so non-degenerate inputs are normalized exactly
    nc = np.maximum(n, NORM_EPS)
    u = x / nc
    if kind == "rmsnorm":
        y = u * (math.sqrt(d) * gamma)
    elif kind == "srmsnorm":
        y = u * math.sqrt(d)
    elif kind == "ssnorm":
        y = u * gamma
    else:
        raise ModelError(f"unknown norm kind {kind!r}")
    return y, (u, nc, n > NORM_EPS)


def _norm_bwd(dy, kind, gamma, cache):
    u, nc, active = cache
    d = u.shape[-1]
    dgamma = None
    if kind == "rmsnorm":
        dgamma = math.sqrt(d) * np.sum(dy * u, axis=0)
        du = dy * (math.sqrt(d) * gamma)
    elif kind == "srmsnorm":
        du = dy * math.sqrt(d)
    else:
        dgamma = np.sum(dy * u).reshape(1)
        du = dy * gamma
    radial = u * _rowdot(u, du)
    dx = np.where(active, du - radial, du) / nc
    return dx, dgamma


def rope_tables(seq_len: int, d_head: int, base: float, dtype=np.float64):
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(dtype)
    return cos, sin


def _rotate_half(x):
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_t(y):
    half = y.shape[-1] // 2
    return np.concatenate([y[..., half:], -y[..., :half]], axis=-1)


def apply_rope(x, cos, sin):
    return x * cos + _rotate_half(x) * sin


def _rope_bwd(dy, cos, sin):
    return dy * cos + _rotate_half_t(dy * sin)


def _softmax(s, out=None):
    out = np.subtract(s, s.max(axis=-1, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def _sigmoid(x):
    # tanh form: no overflow for large |x|
    t = np.multiply(x, 0.5)
    np.tanh(t, out=t)
    t += 1.0
    t *= 0.5
    return t


def _rowdot(a, b):
    return np.einsum("...i,...i->...", a, b)[..., None]


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean next-token cross-entropy in nats."""
    z = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    t = np.asarray(targets).reshape(-1)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    return float(np.mean(lse - z[np.arange(t.size), t]))


# --- forward / backward -------------------------------------------------------

def _as_batch(tokens, config: ModelConfig) -> np.ndarray:
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or tok.shape[1] < 1:
        raise ModelError("tokens must be a non-empty 1-D or 2-D integer array")
    if tok.shape[1] > config.max_seq_len:
        raise ModelError(f"sequence length {tok.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tok.min() < 0 or tok.max() >= config.vocab_size:
        raise ModelError("token id out of range")
    return tok


def _run(params, config, tokens, *, want_taps=False, want_attention=False,
         keep_cache=False, act_quant: Optional[Hook] = None, kv_quant: Optional[Hook] = None):
    tok = _as_batch(tokens, config)
    B, T = tok.shape
    N, D, H, dh = B * T, config.d_model, config.n_heads, config.d_head
    dtype = params["token_embedding"].dtype
    kind = config.norm_kind
    aq = act_quant if act_quant is not None else (lambda a: a)
    cos, sin = rope_tables(T, dh, config.rope_base, dtype)
    mask = np.triu(np.full((T, T), -np.inf, dtype=dtype), 1)
    scale = 1.0 / math.sqrt(dh)
    had = hadamard_matrix(config.d_ffn).astype(dtype) if config.ffn_hadamard else None

    cache: dict = {"tok": tok, "cos": cos, "sin": sin, "layers": []}
    taps: list[ActivationTap] = []
    maps: list[np.ndarray] = []

    x0 = params["token_embedding"][tok.reshape(-1)]
    if config.use_emb_proj:
        cache["x0"] = x0
        x = aq(x0) @ params["emb_proj_in"]
    else:
        x = x0

    def heads(m):
        return m.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    for i in range(config.n_layers):
        p = f"layers.{i}."
        lc: dict = {}
        h1, lc["n1"] = _norm_fwd(x, kind, params.get(p + "attn_norm"))
        if want_taps:
            taps.append(ActivationTap(i, "mhsa_input", h1))
        h1q = aq(h1)
        q = heads(h1q @ params[p + "wq"])
        k = heads(h1q @ params[p + "wk"])
        v = heads(h1q @ params[p + "wv"])
        q_r = apply_rope(q, cos, sin)
        k_r = apply_rope(k, cos, sin)
        if kv_quant is not None:
            k_r = kv_quant(k_r)
            v = kv_quant(v)
        s = q_r @ k_r.transpose(0, 1, 3, 2)
        s *= scale
        s += mask
        P = _softmax(s, out=s)
        if want_attention:
            maps.append(P)
        o = (P @ v).transpose(0, 2, 1, 3).reshape(N, D)
        oq = aq(o)
        x_mid = x + oq @ params[p + "wo"]

        h2, lc["n2"] = _norm_fwd(x_mid, kind, params.get(p + "ffn_norm"))
        if want_taps:
            taps.append(ActivationTap(i, "ffn_input", h2))
        h2q = aq(h2)
        g = h2q @ params[p + "w_gate"]
        up = h2q @ params[p + "w_up"]
        sg = _sigmoid(g)
        a = g * sg * up
        if had is not None:
            a = a @ had
        aq_ = aq(a)
        x = x_mid + aq_ @ params[p + "w_down"]
        if keep_cache:
            lc.update(h1=h1, q_r=q_r, k_r=k_r, v=v, P=P, o=o, h2=h2, g=g, up=up, sg=sg, a=a)
            cache["layers"].append(lc)

    xf, cache["nf"] = _norm_fwd(x, kind, params.get("final_norm"))
    if config.use_emb_proj:
        cache["xf"] = xf
        z = aq(xf) @ params["emb_proj_out"]
    else:
        z = xf
    cache["z"] = z
    logits = aq(z) @ params["unembedding"]
    return logits.reshape(B, T, -1), taps, (maps if want_attention else None), cache


def forward(params: Params, config: ModelConfig, tokens, taps_requested: bool = False,
            attention: bool = False, *, act_quant: Optional[Hook] = None,
            kv_quant: Optional[Hook] = None) -> ForwardResult:
    """Run the decoder on ``tokens`` ([T] or [B, T]).

    ``act_quant`` is applied to the input of every linear projection and
    ``kv_quant`` to post-RoPE keys and values; both default to identity
    and are skipped entirely when absent.
    """
    logits, taps, maps, _ = _run(params, config, tokens, want_taps=taps_requested,
                                 want_attention=attention, act_quant=act_quant, kv_quant=kv_quant)
    if np.asarray(tokens).ndim == 1:
        logits = logits[0]
    return ForwardResult(logits, taps, maps)


def backward(params: Params, config: ModelConfig, tokens, targets) -> tuple[float, Params]:
    """Mean cross-entropy loss and its exact gradient for every parameter."""
    logits, _, _, c = _run(params, config, tokens, keep_cache=True)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    tok = c["tok"]
    B, T = tok.shape
    N, D, H, dh = B * T, config.d_model, config.n_heads, config.d_head
    if tgt.size != N:
        raise ModelError("targets must match tokens in shape")
    if tgt.min() < 0 or tgt.max() >= config.vocab_size:
        raise ModelError("target id out of range")
    kind = config.norm_kind
    cos, sin = c["cos"], c["sin"]
    scale = 1.0 / math.sqrt(dh)
    had = hadamard_matrix(config.d_ffn).astype(logits.dtype) if config.ffn_hadamard else None
    grads: Params = {}

    z2 = logits.reshape(N, -1)
    loss = cross_entropy(z2, tgt)
    probs = _softmax(z2)
    probs[np.arange(N), tgt] -= 1.0
    dlogits = probs / N

    grads["unembedding"] = c["z"].T @ dlogits
    dz = dlogits @ params["unembedding"].T
    if config.use_emb_proj:
        grads["emb_proj_out"] = c["xf"].T @ dz
        dxf = dz @ params["emb_proj_out"].T
    else:
        dxf = dz
    dx, dg = _norm_bwd(dxf, kind, params.get("final_norm"), c["nf"])
    if dg is not None:
        grads["final_norm"] = dg

    def heads(m):
        return m.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    def merge(m):
        return m.transpose(0, 2, 1, 3).reshape(N, D)

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        lc = c["layers"][i]
        # FFN
        grads[p + "w_down"] = lc["a"].T @ dx
        da = dx @ params[p + "w_down"].T
        if had is not None:
            da = da @ had.T
        g, up, sg = lc["g"], lc["up"], lc["sg"]
        dup = da * g
        dup *= sg
        # silu'(g) = sg * (1 + g * (1 - sg))
        dgate = 1.0 - sg
        dgate *= g
        dgate += 1.0
        dgate *= sg
        dgate *= up
        dgate *= da
        h2 = lc["h2"]
        grads[p + "w_gate"] = h2.T @ dgate
        grads[p + "w_up"] = h2.T @ dup
        dh2 = dgate @ params[p + "w_gate"].T + dup @ params[p + "w_up"].T
        dxm, dg = _norm_bwd(dh2, kind, params.get(p + "ffn_norm"), lc["n2"])
        if dg is not None:
            grads[p + "ffn_norm"] = dg
        dx = dx + dxm
        # attention
        grads[p + "wo"] = lc["o"].T @ dx
        do = heads(dx @ params[p + "wo"].T)
        P, v, q_r, k_r = lc["P"], lc["v"], lc["q_r"], lc["k_r"]
        dP = do @ v.transpose(0, 1, 3, 2)
        dv = P.transpose(0, 1, 3, 2) @ do
        dP -= _rowdot(dP, P)
        dP *= P
        dP *= scale
        dS = dP
        dq = merge(_rope_bwd(dS @ k_r, cos, sin))
        dk = merge(_rope_bwd(dS.transpose(0, 1, 3, 2) @ q_r, cos, sin))
        dv = merge(dv)
        h1 = lc["h1"]
        grads[p + "wq"] = h1.T @ dq
        grads[p + "wk"] = h1.T @ dk
        grads[p + "wv"] = h1.T @ dv
        dh1 = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        dxa, dg = _norm_bwd(dh1, kind, params.get(p + "attn_norm"), lc["n1"])
        if dg is not None:
            grads[p + "attn_norm"] = dg
        dx = dx + dxa

    if config.use_emb_proj:
        grads["emb_proj_in"] = c["x0"].T @ dx
        dx = dx @ params["emb_proj_in"].T
    demb = np.zeros_like(params["token_embedding"])
    np.add.at(demb, tok.reshape(-1), dx)
    grads["token_embedding"] = demb
    return loss, {name: grads[name] for name in params}
