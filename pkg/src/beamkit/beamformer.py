"""Batch distortionless beamformers: MPDR, Mask-MVDR and the MLDR family.

Observations are ``(M, T, K)`` spectrograms, steering vectors ``(K, M)`` and
filters ``(K, M)``; outputs ``Y = w^H x`` are ``(T, K)``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import NumericalError
from .linalg import DEFAULT_LOADING, diagonal_load, quad_form
from .models import (
    BeamformerVariant,
    ModelParams,
    median_magnitude,
    target_weights,
    tvv_from_output,
    weight_mask_mvdr,
)

__all__ = [
    "accumulate_wscm",
    "distortionless_filter",
    "apply_filter",
    "mvdr_from_mask",
    "run_batch",
    "negative_log_likelihood",
    "to_reference",
]

log = logging.getLogger(__name__)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BEAMKIT_THREADS", "1")))
    except ValueError:
        return 1


def accumulate_wscm(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``V_k = 1/T sum_tau phi_k(tau) x_k(tau) x_k(tau)^H`` as a ``(K, M, M)``
    stack."""
    x = np.asarray(x)
    n_frames = x.shape[1]
    if n_frames == 0:
        raise ValueError("cannot accumulate a wSCM over zero frames")
    if np.shape(phi) != x.shape[1:]:
        raise ValueError(f"weight shape {np.shape(phi)} != (T, K) {x.shape[1:]}")
    return np.einsum("tk,mtk,ntk->kmn", phi, x, x.conj(), optimize=True) / n_frames


def _distortionless(v, h, delta):
    vl = diagonal_load(v, delta)
    u = np.linalg.solve(vl, h[..., None])[..., 0]
    den = np.einsum("...i,...i->...", h.conj(), u)
    if np.any(~np.isfinite(den)) or np.any(np.real(den) <= 0):
        raise NumericalError("h^H V^-1 h is not positive")
    # dividing by the complex h^H u makes w^H h = 1 up to rounding, even
    # when the solve itself is slightly inexact
    return u / den[..., None]


def distortionless_filter(v: np.ndarray, h: np.ndarray,
                          delta: float = DEFAULT_LOADING) -> np.ndarray:
    """``w = V^{-1} h / (h^H V^{-1} h)`` after diagonal loading ``delta``.

    Stacks over leading dimensions.  With ``BEAMKIT_THREADS > 1`` large stacks
    are split across worker threads.
    """
    v = np.asarray(v)
    h = np.asarray(h, dtype=complex)
    workers = worker_count()
    if workers == 1 or v.ndim < 3 or v.shape[0] < 2 * workers:
        return _distortionless(v, h, delta)
    chunks = np.array_split(np.arange(v.shape[0]), workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(lambda idx: _distortionless(v[idx], h[idx], delta), chunks)
    return np.concatenate(list(parts))


def apply_filter(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``Y_k(tau) = w_k^H x_k(tau)``."""
    return np.einsum("km,mtk->tk", w.conj(), x)


def mvdr_from_mask(x: np.ndarray, mask: np.ndarray, h: np.ndarray,
                   delta: float = DEFAULT_LOADING) -> np.ndarray:
    """Mask-MVDR filter from the ``(1 - M)``-weighted noise SCM.

    A mask of all ones leaves a zero noise SCM; the absolute fallback of
    :func:`diagonal_load` then turns the filter into ``h / ||h||^2``.
    """
    return distortionless_filter(accumulate_wscm(x, weight_mask_mvdr(mask)), h, delta)


def negative_log_likelihood(x: np.ndarray, w: np.ndarray, tau0: int = 1) -> float:
    """Gaussian TVV negative log-likelihood ``sum log lam + |Y|^2 / lam`` with
    ``lam`` the moving-average output power of filter ``w``."""
    y = apply_filter(w, x)
    lam = tvv_from_output(y, tau0)
    return float(np.sum(np.log(lam) + np.abs(y) ** 2 / lam))


def run_batch(x: np.ndarray, h: np.ndarray, variant, mask: np.ndarray | None = None,
              iters: int = 10, params: ModelParams | None = None,
              delta: float = DEFAULT_LOADING, callback=None):
    """Batch beamforming with a fixed steering field.

    Iterative variants start from ``w = e_1`` and repeat ``iters`` rounds of
    output, TVV, weight, wSCM and filter updates; the others are solved once.
    ``callback(round, w, y)`` runs after every filter update.

    Returns ``(w, Y)``.  With ``iters = 0`` an iterative variant returns the
    initial ``e_1`` filter, which is generally not distortionless.
    """
    variant = BeamformerVariant.parse(variant)
    variant.check_mask(mask)
    params = params or ModelParams()
    x = np.asarray(x)
    h = np.asarray(h, dtype=complex)
    n_ch, _, n_bins = x.shape
    medmag = median_magnitude(x, params.excluded_channels) if variant.needs_mask else None

    w = np.zeros((n_bins, n_ch), dtype=complex)
    w[:, 0] = 1.0
    rounds = iters if variant.iterative else 1
    for it in range(rounds):
        y = apply_filter(w, x)
        phi = target_weights(variant, y, mask, medmag, params)
        v = accumulate_wscm(x, phi)
        w = distortionless_filter(v, h, delta)
        if callback is not None:
            callback(it, w, apply_filter(w, x))
    return w, apply_filter(w, x)


def to_reference(y: np.ndarray, h: np.ndarray, ref: int = 0) -> np.ndarray:
    """Rescale a distortionless output ``(T, K)`` to the reference-mic image.

    ``h`` is ``(K, M)`` or a per-frame ``(T, K, M)`` trace.
    """
    return y * np.asarray(h)[..., ref]


def weighted_power(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.real(quad_form(v, w))
