"""Adam and Muon update rules, per-tensor routing and the trapezoidal schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .model import Params, is_norm_param
from .numerics import NS_STEPS, newton_schulz_orthogonalize

MODES = ("adam_all", "muon_decoupled", "muon_all")
EMBEDDING_NAMES = ("token_embedding", "unembedding")


class OptimError(ValueError):
    pass


@dataclass(frozen=True)
class Hyper:
    adam_lr: float = 5e-3
    muon_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.95
    weight_decay: float = 0.01
    ns_steps: int = NS_STEPS


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class MuonState:
    buf: np.ndarray


TensorState = Union[AdamState, MuonState]


@dataclass
class OptimizerState:
    mode: str
    hyper: Hyper
    tensors: dict[str, TensorState] = field(default_factory=dict)

    def rule(self, name: str) -> str:
        return "muon" if isinstance(self.tensors[name], MuonState) else "adam"


def route(name: str, shape: tuple[int, ...], mode: str) -> str:
    """Which update rule a tensor gets under ``mode``.

    Norm gains are always Adam; embedding tables are Adam unless the run
    is the no-decoupling ablation (``muon_all``).
    """
    if mode not in MODES:
        raise OptimError(f"unknown optimizer mode {mode!r}")
    if mode == "adam_all" or is_norm_param(name) or len(shape) != 2:
        return "adam"
    if mode == "muon_decoupled" and name in EMBEDDING_NAMES:
        return "adam"
    return "muon"


def init_state(params: Params, mode: str, hyper: Hyper = Hyper()) -> OptimizerState:
    state = OptimizerState(mode, hyper)
    for name, w in params.items():
        if route(name, w.shape, mode) == "muon":
            state.tensors[name] = MuonState(np.zeros_like(w))
        else:
            state.tensors[name] = AdamState(np.zeros_like(w), np.zeros_like(w))
    return state


def _check_grad(w, grad):
    if w.shape != grad.shape:
        raise OptimError(f"shape mismatch: weight {w.shape} vs grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimError("non-finite gradient")


def adam_step(w: np.ndarray, grad: np.ndarray, state: AdamState, hyper: Hyper,
              lr_scale: float = 1.0) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam with decoupled weight decay."""
    _check_grad(w, grad)
    b1, b2 = hyper.beta1, hyper.beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    lr = lr_scale * hyper.adam_lr
    w_new = w - lr * (m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * w)
    return w_new.astype(w.dtype, copy=False), AdamState(m, v, t)


def muon_scale(shape: tuple[int, int]) -> float:
    rows, cols = shape
    return math.sqrt(max(1.0, rows / cols))


def muon_step(w: np.ndarray, grad: np.ndarray, state: MuonState, hyper: Hyper,
              lr_scale: float = 1.0) -> tuple[np.ndarray, MuonState]:
    """Momentum + Nesterov blend, orthogonalized by Newton-Schulz."""
    if w.ndim != 2:
        raise OptimError("Muon only updates 2-D matrices")
    _check_grad(w, grad)
    buf = hyper.momentum * state.buf + grad
    blend = hyper.momentum * buf + grad
    lr = lr_scale * hyper.muon_lr
    if np.any(blend):
        ortho = newton_schulz_orthogonalize(blend.astype(np.float64), hyper.ns_steps)
        w_new = w - lr * (muon_scale(w.shape) * ortho + hyper.weight_decay * w)
    else:
        w_new = w - lr * hyper.weight_decay * w
    return w_new.astype(w.dtype, copy=False), MuonState(buf)


def apply_updates(params: Params, grads: Params, state: OptimizerState,
                  lr_scale: float = 1.0) -> tuple[Params, OptimizerState]:
    """One optimizer step over every tensor, in parameter order."""
    new_params: Params = {}
    new_state = OptimizerState(state.mode, state.hyper)
    for name, w in params.items():
        if name not in state.tensors:
            raise OptimError(f"no optimizer state for {name}")
        if name not in grads:
            raise OptimError(f"no gradient for {name}")
        ts = state.tensors[name]
        if isinstance(ts, MuonState):
            new_params[name], new_state.tensors[name] = muon_step(w, grads[name], ts, state.hyper, lr_scale)
        else:
            new_params[name], new_state.tensors[name] = adam_step(w, grads[name], ts, state.hyper, lr_scale)
    return new_params, new_state


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    warmup_steps: int = 0
    decay_fraction: float = 0.2

    def __post_init__(self):
        if self.total_steps < 1 or self.warmup_steps < 0:
            raise OptimError("total_steps must be positive and warmup_steps non-negative")
        if not 0.0 < self.decay_fraction < 1.0:
            raise OptimError("decay_fraction must lie in (0, 1)")
        if self.warmup_steps + self.decay_fraction * self.total_steps > self.total_steps:
            raise OptimError("warmup and decay phases overlap")


def lr_multiplier(step: int, schedule: ScheduleConfig) -> float:
    """Trapezoid: linear warmup from 0, flat top, linear decay to 0 over the last fraction."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise OptimError(f"step {step} outside [0, {total}]")
    decay_len = schedule.decay_fraction * total
    decay_start = total - decay_len
    if step < schedule.warmup_steps:
        return step / schedule.warmup_steps
    if step <= decay_start:
        return 1.0
    return (total - step) / decay_len
