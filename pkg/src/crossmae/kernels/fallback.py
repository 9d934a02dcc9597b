"""Pure-numpy reference implementations of the hot inner-loop kernels.

The compiled extension (``_ckern``) implements the same signatures; either
backend may be active at runtime. Keep the two in lockstep: the parity tests
compare them element-for-element.

All kernels operate on float64 C-contiguous arrays. 2-D inputs are treated
row-wise (softmax and layernorm normalize the last axis).
"""
import numpy as np
from scipy.special import erf

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_fwd(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * INV_SQRT2))


def gelu_bwd(x, gy):
    """d/dx of exact GELU times the upstream gradient."""
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return gy * (cdf + x * pdf)


def softmax_fwd(x):
    """Row softmax of a 2-D array, shifted for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    """Row-softmax backward given the forward output y."""
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, gain, bias, eps):
    """Row layernorm with affine scale/shift.

    Returns (y, xhat, inv_std); xhat and inv_std are consumed by the backward.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layernorm_bwd(xhat, inv_std, gain, gy):
    """Backward of layernorm_fwd. Returns (gx, ggain, gbias)."""
    d = xhat.shape[1]
    gxhat = gy * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * inv_std[:, None]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bias_c1, bias_c2):
    """Fused decoupled-weight-decay Adam step, in place on flat float64 arrays.

    bias_c1/bias_c2 are the precomputed 1 - beta^t correction terms.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / bias_c1
    vhat = v / bias_c2
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
