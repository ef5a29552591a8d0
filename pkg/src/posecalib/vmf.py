"""von Mises-Fisher density on the 2-sphere and its maximum-likelihood fit."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import EmptyInput

KAPPA_MAX = 1e4
LOG_UNIFORM = -np.log(4.0 * np.pi)


def vmf_log_normalizer(kappa):
    """``log C(kappa)`` with ``C = kappa / (4 pi sinh kappa)``; 0 maps to the
    uniform density. Written in terms of ``exp(-2 kappa)`` so large
    concentrations cannot overflow."""
    kappa = np.asarray(kappa, dtype=float)
    small = kappa < 1e-8
    k = np.where(small, 1.0, kappa)
    out = np.log(k) - np.log(2.0 * np.pi) - k - np.log(-np.expm1(-2.0 * k))
    # log(k / sinh k) ~ -k^2/6 near zero
    out_small = LOG_UNIFORM - kappa**2 / 6.0
    return np.where(small, out_small, out)


def vmf_log_pdf(v, mu, kappa):
    """Log-density of ``vMF(mu, kappa)`` at unit vector(s) ``v``.

    Broadcasts over leading dimensions of ``v`` and ``mu``.
    """
    v = np.asarray(v, dtype=float)
    mu = np.asarray(mu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    cos = np.sum(v * mu, axis=-1)
    # log C + kappa cos == log k - log 2pi - k (1 - cos) - log(1 - e^{-2k})
    return vmf_log_normalizer(kappa) + kappa * cos


class VmfFit(NamedTuple):
    mean: np.ndarray
    kappa: float
    degenerate: bool


def _mean_resultant(kappa):
    """Expected resultant length ``coth k - 1/k`` and its derivative."""
    k = np.maximum(kappa, 1e-6)
    e = np.exp(-2.0 * k)
    coth = (1.0 + e) / (1.0 - e)
    csch2 = 4.0 * e / (1.0 - e) ** 2
    return coth - 1.0 / k, 1.0 / k**2 - csch2


def kappa_from_resultant(rbar, kappa_max=KAPPA_MAX, n_newton=8):
    """Concentration whose expected resultant length equals ``rbar``.

    Starts from the closed-form approximation ``r (3 - r^2) / (1 - r^2)`` and
    polishes with Newton steps on ``coth k - 1/k = r``, which is the exact
    likelihood equation on the 2-sphere.
    """
    rbar = np.clip(np.asarray(rbar, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = rbar * (3.0 - rbar**2) / (1.0 - rbar**2)
    k = np.clip(np.nan_to_num(k, nan=kappa_max, posinf=kappa_max), 0.0, kappa_max)
    live = (rbar > 1e-3) & (k < kappa_max)
    for _ in range(n_newton):
        a, da = _mean_resultant(k)
        step = np.where(live & (da > 0), (a - rbar) / np.where(da > 0, da, 1.0), 0.0)
        k = np.clip(k - step, 0.5 * k, 2.0 * k + 1e-3)
    k = np.where(rbar >= 1.0, kappa_max, k)
    return np.clip(k, 0.0, kappa_max)


def vmf_fit_mle(vectors, kappa_max=KAPPA_MAX, tol=1e-12):
    """Fit mean direction and concentration to unit vectors ``(n, 3)``.

    Antipodal cancellation (zero resultant) yields ``kappa = 0``, an arbitrary
    unit mean and ``degenerate=True``.
    """
    v = np.asarray(vectors, dtype=float).reshape(-1, 3)
    if len(v) == 0:
        raise EmptyInput("vmf_fit_mle needs at least one vector")
    s = v.sum(axis=0)
    norm = np.linalg.norm(s)
    if norm <= tol * len(v):
        return VmfFit(np.array([0.0, 0.0, 1.0]), 0.0, True)
    rbar = norm / len(v)
    return VmfFit(s / norm, float(kappa_from_resultant(rbar, kappa_max)), False)


def vmf_fit_batch(vectors, mask, kappa_max=KAPPA_MAX, min_count=1):
    """Fit one vMF per leading index over axis ``-2``.

    Parameters
    ----------
    vectors : ndarray, shape (..., n, 3)
    mask : ndarray of bool, shape (..., n)

    Returns
    -------
    mean : ndarray (..., 3)
    kappa : ndarray (...)
    ok : ndarray of bool (...)
        At least ``min_count`` samples and a non-vanishing resultant.
    """
    w = mask.astype(float)
    s = np.einsum("...n,...ni->...i", w, vectors)
    n = w.sum(axis=-1)
    norm = np.linalg.norm(s, axis=-1)
    ok = (n >= min_count) & (norm > 1e-12 * np.maximum(n, 1.0))
    mean = np.where(ok[..., None], s / np.where(ok, norm, 1.0)[..., None], 0.0)
    rbar = np.where(ok, norm / np.maximum(n, 1.0), 0.0)
    kappa = np.where(ok, kappa_from_resultant(rbar, kappa_max), 0.0)
    return mean, kappa, ok
