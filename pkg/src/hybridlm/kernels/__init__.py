"""Hot-loop kernels with a compiled core and a pure-NumPy fallback.

The compiled Cython extension (``hybridlm.kernels._core``) is preferred when
present; otherwise the NumPy implementations in ``_pure`` are used. Set the
environment variable ``HYBRIDLM_KERNELS`` to ``pure`` or ``compiled`` to force
a backend (forcing ``compiled`` raises if the extension was not built).

Both backends implement identical flat/2D primitives; the wrappers here
normalize arbitrary-rank float64 arrays onto them. ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

import numpy as np

from . import _pure

try:
    from . import _core
except ImportError:
    _core = None

_requested = os.environ.get("HYBRIDLM_KERNELS", "").strip().lower()
if _requested in ("", "auto"):
    _impl = _core if _core is not None else _pure
elif _requested == "pure":
    _impl = _pure
elif _requested in ("compiled", "cython"):
    if _core is None:
        raise RuntimeError(
            "HYBRIDLM_KERNELS=compiled but the extension is not built; "
            "install with `pip install -e . --no-build-isolation`"
        )
    _impl = _core
else:
    raise RuntimeError(f"unknown HYBRIDLM_KERNELS value: {_requested!r}")


def backend_name() -> str:
    """Name of the active backend: 'compiled' or 'pure'."""
    return _impl.NAME


def available_backends() -> dict:
    """Map of backend name -> raw implementation module."""
    out = {"pure": _pure}
    if _core is not None:
        out["compiled"] = _core
    return out


def _as_c64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def gelu(x: np.ndarray) -> np.ndarray:
    x = _as_c64(x)
    return _impl.gelu(x.ravel()).reshape(x.shape)


def gelu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x = _as_c64(x)
    return _impl.gelu_grad(x.ravel(), _as_c64(dy).ravel()).reshape(x.shape)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis."""
    x = _as_c64(x)
    return _impl.softmax(_rows(x)).reshape(x.shape)


def softmax_grad(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    y = _as_c64(y)
    return _impl.softmax_grad(_rows(y), _rows(_as_c64(dy))).reshape(y.shape)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Layer norm over the last axis; returns (y, xhat, rstd) for backward."""
    x = _as_c64(x)
    y, xhat, rstd = _impl.layer_norm(_rows(x), _as_c64(gain), _as_c64(bias), eps)
    return y.reshape(x.shape), xhat, rstd


def layer_norm_grad(dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray):
    dy = _as_c64(dy)
    dx, dgain, dbias = _impl.layer_norm_grad(_rows(dy), xhat, rstd, _as_c64(gain))
    return dx.reshape(dy.shape), dgain, dbias


def cross_entropy_rows(logits: np.ndarray, targets: np.ndarray):
    """Per-row -log softmax(logits)[target] plus the unscaled logit gradient."""
    logits = _as_c64(logits)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    return _impl.cross_entropy(_rows(logits), targets.ravel())


def adam_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> None:
    """In-place Adam update on same-shaped C-contiguous float64 arrays."""
    for name, arr in (("p", p), ("m", m), ("v", v)):
        if arr.dtype != np.float64 or not arr.flags.c_contiguous:
            raise ValueError(f"adam_update: {name} must be C-contiguous float64")
    _impl.adam_update(
        p.ravel(), _as_c64(g).ravel(), m.ravel(), v.ravel(),
        step, lr, beta1, beta2, eps, weight_decay,
    )


def sumsq(x: np.ndarray) -> float:
    return float(_impl.sumsq(_as_c64(x).ravel()))
