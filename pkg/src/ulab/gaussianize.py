"""Differentiable Gaussianization of loss samples and Gaussian-kernel MMD.

Losses are pushed through a temperature-smoothed empirical CDF and then the
standard normal quantile function, so any continuous sample maps to values
that are approximately i.i.d. N(0, 1) while staying differentiable.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

from . import autodiff as ad
from .errors import InputError

DEFAULT_K = 100.0
CDF_EPS = 1e-4

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=np.float64) / _SQRT2)


def normal_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _lower_tail_quantile(q, max_iter=200):
    """Solve Phi(z) = q for q in (0, 0.5] by Newton's method from z = 0.

    Phi is convex on z <= 0, so Newton started at 0 (right of the root)
    decreases monotonically onto the root and never overshoots.
    """
    z = np.zeros_like(q)
    active = np.ones(q.shape, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        za = z[active]
        step = (normal_cdf(za) - q[active]) / normal_pdf(za)
        z[active] = za - step
        active[active] = np.abs(step) > 1e-15 * (1.0 + np.abs(za))
    return z


def _probit_values(q):
    q = np.asarray(q, dtype=np.float64)
    if np.any((q <= 0.0) | (q >= 1.0) | ~np.isfinite(q)):
        raise InputError("probit is only defined on the open interval (0, 1)")
    upper = q > 0.5
    # solve in the lower tail where erfc keeps full relative precision
    tail = np.where(upper, 1.0 - q, q)
    z = _lower_tail_quantile(np.atleast_1d(tail)).reshape(q.shape)
    return np.where(upper, -z, z)


def probit(q):
    """Standard normal quantile; derivative 1/phi(probit(q))."""
    z = _probit_values(ad.value(q))
    if not ad.is_var(q):
        return z if np.ndim(z) else float(z)
    return ad.custom(q, z, 1.0 / normal_pdf(z), "probit")


def soft_cdf(x, K=DEFAULT_K):
    """``Q_i = mean_j sigmoid(K (x_i - x_j))`` for a 1-D sample ``x``."""
    if K <= 0:
        raise InputError("temperature K must be positive")
    n = np.shape(ad.value(x))[0]
    if n < 1:
        raise InputError("soft_cdf needs at least one value")
    col = ad.reshape(x, (n, 1))
    row = ad.reshape(x, (1, n))
    return ad.mean(ad.sigmoid(ad.mul(ad.sub(col, row), K)), axis=1)


def gaussianize(x, K=DEFAULT_K, eps=CDF_EPS):
    q = ad.clip(soft_cdf(x, K), eps, 1.0 - eps)
    return probit(q)


def gaussianize_losses(losses, K=DEFAULT_K, eps=CDF_EPS):
    """Map a loss vector ``log(1 + CE)`` to approximately standard normal scores."""
    n = np.shape(ad.value(losses))[0]
    if n < 2:
        raise InputError("need at least two losses to estimate ranks")
    return gaussianize(losses, K, eps)


def gaussian_kernel(a, b):
    """``exp(-(a_i - b_j)^2 / 2)`` for 1-D samples ``a``, ``b``."""
    na, nb = np.shape(ad.value(a))[0], np.shape(ad.value(b))[0]
    d = ad.sub(ad.reshape(a, (na, 1)), ad.reshape(b, (1, nb)))
    return ad.exp(ad.mul(ad.square(d), -0.5))


def mmd(zf, zt):
    """Biased (V-statistic) squared MMD with unit-bandwidth Gaussian kernel."""
    if np.size(ad.value(zf)) == 0 or np.size(ad.value(zt)) == 0:
        raise InputError("MMD needs two non-empty samples")
    kff = ad.mean(gaussian_kernel(zf, zf))
    ktt = ad.mean(gaussian_kernel(zt, zt))
    kft = ad.mean(gaussian_kernel(zf, zt))
    out = ad.sub(ad.add(kff, ktt), ad.mul(kft, 2.0))
    if not ad.is_var(out):
        # rounding can leave a -1e-17 residue; the estimator is a squared norm
        return max(float(out), 0.0)
    return out
