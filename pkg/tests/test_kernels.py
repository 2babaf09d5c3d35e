"""Backend parity and kernel-level gradient checks."""

import os
import subprocess
import sys

import numpy as np
import pytest

from hybridlm import kernels

RNG = np.random.default_rng(1234)

HAS_COMPILED = "compiled" in kernels.available_backends()

pairs = pytest.mark.skipif(not HAS_COMPILED, reason="compiled extension not built")


def _backends():
    return kernels.available_backends()


@pairs
def test_gelu_parity():
    x = RNG.normal(size=257)
    pure = _backends()["pure"].gelu(x)
    comp = _backends()["compiled"].gelu(x.copy())
    np.testing.assert_allclose(comp, pure, rtol=1e-14, atol=1e-15)


@pairs
def test_gelu_grad_parity():
    x = RNG.normal(size=129)
    dy = RNG.normal(size=129)
    pure = _backends()["pure"].gelu_grad(x, dy)
    comp = _backends()["compiled"].gelu_grad(x, dy)
    np.testing.assert_allclose(comp, pure, rtol=1e-14, atol=1e-15)


@pairs
def test_softmax_parity_including_neg_inf():
    x = RNG.normal(size=(17, 9))
    x[3, 5:] = -np.inf
    x[10, 1:] = -np.inf
    pure = _backends()["pure"].softmax(np.ascontiguousarray(x))
    comp = _backends()["compiled"].softmax(np.ascontiguousarray(x))
    np.testing.assert_allclose(comp, pure, rtol=1e-14, atol=0)
    assert (comp[3, 5:] == 0).all()


@pairs
def test_layer_norm_parity():
    x = RNG.normal(size=(11, 13))
    g = RNG.normal(size=13)
    b = RNG.normal(size=13)
    py, pxh, prs = _backends()["pure"].layer_norm(x, g, b, 1e-5)
    cy, cxh, crs = _backends()["compiled"].layer_norm(x, g, b, 1e-5)
    np.testing.assert_allclose(cy, py, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(cxh, pxh, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(crs, prs, rtol=1e-12)


@pairs
def test_cross_entropy_parity():
    logits = RNG.normal(size=(21, 7))
    targets = RNG.integers(0, 7, size=21)
    pl, pd = _backends()["pure"].cross_entropy(logits, targets)
    cl, cd = _backends()["compiled"].cross_entropy(logits, targets)
    np.testing.assert_allclose(cl, pl, rtol=1e-13)
    np.testing.assert_allclose(cd, pd, rtol=1e-13, atol=1e-15)


@pairs
def test_adam_parity():
    n = 101
    p0 = RNG.normal(size=n)
    g = RNG.normal(size=n)
    m0 = RNG.normal(size=n) * 0.1
    v0 = np.abs(RNG.normal(size=n)) * 0.1
    states = {}
    for name, impl in _backends().items():
        p, m, v = p0.copy(), m0.copy(), v0.copy()
        impl.adam_update(p, g, m, v, 3, 1e-2, 0.9, 0.95, 1e-8, 0.1)
        states[name] = (p, m, v)
    for a, b in zip(states["pure"], states["compiled"]):
        np.testing.assert_allclose(b, a, rtol=1e-13, atol=1e-16)


@pairs
def test_sumsq_parity():
    x = RNG.normal(size=1001)
    a = _backends()["pure"].sumsq(x)
    b = _backends()["compiled"].sumsq(x)
    assert abs(a - b) <= 1e-12 * abs(a)


def test_kernel_gradients_match_finite_differences():
    """Every differentiable kernel vs central differences, h=1e-5, rel < 1e-6."""
    h = 1e-5
    x = RNG.normal(size=24)

    # gelu
    dy = RNG.normal(size=24)
    analytic = kernels.gelu_grad(x, dy)
    fd = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = ((kernels.gelu(xp) * dy).sum() - (kernels.gelu(xm) * dy).sum()) / (2 * h)
    assert np.linalg.norm(fd - analytic) / np.linalg.norm(fd) < 1e-6

    # softmax
    v = RNG.normal(size=(1, 9))
    dy = RNG.normal(size=(1, 9))
    y = kernels.softmax(v)
    analytic = kernels.softmax_grad(y, dy)
    fd = np.zeros_like(v)
    for i in range(9):
        vp, vm = v.copy(), v.copy()
        vp[0, i] += h
        vm[0, i] -= h
        fd[0, i] = ((kernels.softmax(vp) * dy).sum() - (kernels.softmax(vm) * dy).sum()) / (2 * h)
    assert np.linalg.norm(fd - analytic) / np.linalg.norm(fd) < 1e-6

    # layer_norm (input, gain, and bias gradients)
    xm2 = RNG.normal(size=(3, 7))
    g = RNG.normal(size=7)
    b = RNG.normal(size=7)
    dy = RNG.normal(size=(3, 7))
    y, xhat, rstd = kernels.layer_norm(xm2, g, b, 1e-5)
    dx, dgain, dbias = kernels.layer_norm_grad(dy, xhat, rstd, g)

    def ln_obj(xv, gv, bv):
        out, _, _ = kernels.layer_norm(xv, gv, bv, 1e-5)
        return float((out * dy).sum())

    for arr, analytic_grad, kind in ((xm2, dx, "x"), (g, dgain, "gain"), (b, dbias, "bias")):
        fd = np.zeros_like(arr)
        flat, fd_flat = arr.ravel(), fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = ln_obj(xm2, g, b)
            flat[i] = orig - h
            down = ln_obj(xm2, g, b)
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * h)
        rel = np.linalg.norm(fd - analytic_grad) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-6, f"layer_norm {kind}: rel={rel}"

    # cross_entropy logit gradient
    logits = RNG.normal(size=(1, 8))
    target = np.array([3])
    _, dlogits = kernels.cross_entropy_rows(logits, target)
    fd = np.zeros(8)
    for i in range(8):
        lp, lm = logits.copy(), logits.copy()
        lp[0, i] += h
        lm[0, i] -= h
        fd[i] = (kernels.cross_entropy_rows(lp, target)[0][0]
                 - kernels.cross_entropy_rows(lm, target)[0][0]) / (2 * h)
    assert np.linalg.norm(fd - dlogits[0]) / np.linalg.norm(fd) < 1e-6


def test_backend_env_override():
    code = (
        "from hybridlm import kernels; print(kernels.backend_name())"
    )
    env = dict(os.environ, HYBRIDLM_KERNELS="pure")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "pure"


@pairs
def test_backend_default_prefers_compiled():
    env = dict(os.environ)
    env.pop("HYBRIDLM_KERNELS", None)
    code = "from hybridlm import kernels; print(kernels.backend_name())"
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "compiled"


def test_adam_update_requires_contiguous():
    p = np.zeros((4, 4))[::2]  # non-contiguous view
    with pytest.raises(ValueError):
        kernels.adam_update(p, np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((2, 4)),
                            1, 0.1, 0.9, 0.95, 1e-8, 0.0)
