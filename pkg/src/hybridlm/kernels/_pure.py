"""NumPy reference implementations of the hot training kernels.

Same numerical contracts as the compiled backend in ``_core.pyx``; every
function takes/returns C-contiguous float64 arrays with the documented
shapes. Shape normalization for arbitrary-rank inputs lives one level up
in ``hybridlm.kernels``.
"""

import numpy as np
from scipy.special import erf

NAME = "pure"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact-erf GELU on a flat array: x * Phi(x)."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x, dy):
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x), chained with dy."""
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return (cdf + x * phi) * dy


def softmax(x):
    """Row-wise stable softmax on a 2D array. -inf entries map to 0."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_grad(y, dy):
    """Row-wise softmax backward: dx = y * (dy - sum(y * dy))."""
    inner = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - inner)


def layer_norm(x, gain, bias, eps):
    """Row-wise layer norm with population variance.

    Returns (y, xhat, rstd) where xhat is the normalized input before the
    affine and rstd the per-row reciprocal standard deviation, both cached
    for the backward pass.
    """
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return gain * xhat + bias, xhat, rstd[:, 0].copy()


def layer_norm_grad(dy, xhat, rstd, gain):
    """Backward of layer_norm. Returns (dx, dgain, dbias)."""
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    mean_dxhat = dxhat.mean(axis=1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


def cross_entropy(logits, targets):
    """Fused row-wise -log softmax(logits)[target] and its logit gradient.

    Returns (loss, dlogits) with dlogits = softmax(logits) - onehot(target),
    unscaled.
    """
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = (m[:, 0] + np.log(z[:, 0])) - logits[rows, targets]
    dlogits = e / z
    dlogits[rows, targets] -= 1.0
    return loss, dlogits


def adam_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One bias-corrected Adam step with decoupled weight decay, in place.

    `step` is the post-increment step count (1 on the first update). The
    decay term uses the pre-update parameter value.
    """
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    if weight_decay != 0.0:
        update = update + lr * weight_decay * p
    p -= update


def sumsq(x):
    """Sum of squares of a flat array."""
    return float(np.dot(x, x))
