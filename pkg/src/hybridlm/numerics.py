"""Dense math primitives, the Adam optimizer, and token-based LR schedules.

Everything here is a pure function of its inputs: callers get fresh arrays
back and may share inputs across threads. Reference precision is float64
throughout; half precision exists in this codebase only as planner byte
widths.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

ADAM_EPS_DEFAULT = 1e-8

ParamDict = dict[str, np.ndarray]


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise ValueError(f"{name}: input contains non-finite values")


def gelu(x, approximate: bool = False):
    """GELU activation x * Phi(x), exact erf form.

    ``approximate=True`` selects the tanh approximation; the erf form is the
    reference and the one the tests pin down.
    """
    arr = np.asarray(x, dtype=np.float64)
    _check_finite("gelu", arr)
    if approximate:
        inner = math.sqrt(2.0 / math.pi) * (arr + 0.044715 * arr**3)
        out = 0.5 * arr * (1.0 + np.tanh(inner))
    else:
        out = kernels.gelu(arr)
    return float(np.ravel(out)[0]) if np.ndim(x) == 0 else out


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis. Outputs are nonnegative and sum to 1."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise ValueError("softmax: empty input")
    _check_finite("softmax", arr)
    return kernels.softmax(arr)


def layer_norm(v, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """gain * (v - mean) / sqrt(var + eps) + bias with population variance."""
    arr = np.asarray(v, dtype=np.float64)
    g = np.asarray(gain, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if arr.shape[-1] < 1:
        raise ValueError("layer_norm: empty vector")
    if g.shape != (arr.shape[-1],) or b.shape != (arr.shape[-1],):
        raise ValueError(
            f"layer_norm: length mismatch (v last dim {arr.shape[-1]}, "
            f"gain {g.shape}, bias {b.shape})"
        )
    _check_finite("layer_norm", arr)
    y, _, _ = kernels.layer_norm(arr, g, b, eps)
    return y


def cross_entropy(logits, target: int) -> float:
    """-log softmax(logits)[target]; always >= 0."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("cross_entropy: logits must be a vector")
    if not 0 <= target < arr.shape[0]:
        raise ValueError(f"cross_entropy: target {target} out of range for {arr.shape[0]} logits")
    loss, _ = kernels.cross_entropy_rows(arr[None, :], np.array([target]))
    return float(loss[0])


@dataclass
class OptimizerState:
    """Adam moment accumulators shaped like the parameter set."""

    step: int = 0
    m: ParamDict = field(default_factory=dict)
    v: ParamDict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ParamDict) -> "OptimizerState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: ParamDict,
    grads: ParamDict,
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = ADAM_EPS_DEFAULT,
    weight_decay: float = 0.0,
) -> tuple[ParamDict, OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay; returns new copies.

    The decay term is applied outside the moment update, on the pre-step
    parameter value: p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps).
    """
    if lr < 0:
        raise ValueError("adam_step: lr must be >= 0")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("adam_step: params, grads and state must share the same keys")
    beta1, beta2 = betas
    step = state.step + 1
    new_params: ParamDict = {}
    new_m: ParamDict = {}
    new_v: ParamDict = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for {name}: {p.shape} vs {g.shape}")
        np_ = np.ascontiguousarray(p, dtype=np.float64).copy()
        nm = np.ascontiguousarray(state.m[name], dtype=np.float64).copy()
        nv = np.ascontiguousarray(state.v[name], dtype=np.float64).copy()
        kernels.adam_update(np_, g, nm, nv, step, lr, beta1, beta2, eps, weight_decay)
        new_params[name] = np_
        new_m[name] = nm
        new_v[name] = nv
    return new_params, OptimizerState(step=step, m=new_m, v=new_v)


def clip_grad_norm(grads: ParamDict, max_norm: float) -> tuple[ParamDict, float]:
    """Scale the gradient set so its global L2 norm is at most max_norm.

    Returns (grads, scale). Gradients under the threshold are returned as-is
    with scale 1.
    """
    if max_norm <= 0:
        raise ValueError("clip_grad_norm: max_norm must be > 0")
    total = 0.0
    for name, g in grads.items():
        _check_finite(f"clip_grad_norm[{name}]", g)
        total += kernels.sumsq(g)
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads, 1.0
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, scale


@dataclass(frozen=True)
class Schedule:
    """Token-based learning-rate schedule.

    Linear warmup from 0 to peak over warmup_tokens, then either a cosine
    decay to min_lr at decay_tokens (clamped to min_lr beyond) or a constant
    hold at peak.
    """

    peak_lr: float
    min_lr: float
    warmup_tokens: int
    decay_tokens: int
    style: str = "cosine"

    def __post_init__(self):
        if self.peak_lr <= 0 or self.min_lr <= 0:
            raise ValueError("Schedule: rates must be positive")
        if self.min_lr > self.peak_lr:
            raise ValueError("Schedule: min_lr must be <= peak_lr")
        if self.style not in ("cosine", "constant"):
            raise ValueError(f"Schedule: unknown style {self.style!r}")
        if self.style == "cosine" and not self.warmup_tokens < self.decay_tokens:
            raise ValueError("Schedule: cosine style needs warmup_tokens < decay_tokens")


def lr_at(schedule: Schedule, tokens_seen: int) -> float:
    """Learning rate after tokens_seen training tokens."""
    if tokens_seen < 0:
        raise ValueError("lr_at: tokens_seen must be >= 0")
    n = float(tokens_seen)
    warm = float(schedule.warmup_tokens)
    if n < warm:
        return schedule.peak_lr * n / warm
    if schedule.style == "constant" or n == warm:
        return schedule.peak_lr  # warmup endpoint forced exactly to peak
    decay = float(schedule.decay_tokens)
    if n >= decay:
        return schedule.min_lr
    frac = (n - warm) / (decay - warm)
    return schedule.min_lr + (schedule.peak_lr - schedule.min_lr) * 0.5 * (
        1.0 + math.cos(math.pi * frac)
    )
