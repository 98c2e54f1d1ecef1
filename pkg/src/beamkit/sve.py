"""Steering-vector estimation by covariance subtraction.

The target SCM is the observation SCM minus a (scaled) normalized noise SCM;
its principal eigenvector, unit-normalized and phase-aligned to the reference
channel, is the steering estimate.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ConvergenceError, NumericalError
from .linalg import power_iteration

__all__ = [
    "align_phase",
    "normalize_steering",
    "masked_observations",
    "scm_observations",
    "noise_scm_from_ratio",
    "noise_scm_from_weights",
    "subtract_and_extract",
    "steering_cosine",
]

log = logging.getLogger(__name__)


def align_phase(h: np.ndarray, ref: int = 0) -> np.ndarray:
    """Rotate each vector so its ``ref`` component is real and non-negative."""
    h = np.asarray(h, dtype=complex)
    a = h[..., ref]
    mag = np.abs(a)
    rot = np.where(mag > 0, a.conj() / np.where(mag > 0, mag, 1.0), 1.0)
    out = h * rot[..., None]
    out[..., ref] = np.abs(out[..., ref])
    return out


def normalize_steering(h: np.ndarray, ref: int = 0) -> np.ndarray:
    h = np.asarray(h, dtype=complex)
    nrm = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(nrm == 0):
        raise NumericalError("zero steering vector")
    return align_phase(h / nrm, ref)


def masked_observations(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return np.asarray(x)
    return np.sqrt(np.clip(mask, 0.0, None))[None] * x


def _weighted_scm(x, weights):
    return np.einsum("tk,mtk,ntk->kmn", weights, x, x.conj(), optimize=True)


def scm_observations(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``R_x = 1/T sum x~ x~^H`` with ``x~ = sqrt(M) x`` when a mask is given."""
    xt = masked_observations(x, mask)
    n_frames = xt.shape[1]
    if n_frames == 0:
        raise ValueError("no frames")
    return _weighted_scm(xt, np.ones(xt.shape[1:])) / n_frames


def noise_scm_from_ratio(x: np.ndarray, r_n: np.ndarray,
                         mask: np.ndarray | None = None) -> np.ndarray:
    """Ratio-weighted, normalized noise SCM.

    Bins whose ratios sum to zero fall back to ``R_x`` (logged).
    """
    xt = masked_observations(x, mask)
    r_n = np.asarray(r_n, dtype=float)
    total = r_n.sum(axis=0)
    rn = _weighted_scm(xt, r_n)
    empty = total <= 0
    if np.any(empty):
        log.info("noise ratio vanishes in %d bins; using R_x there", int(empty.sum()))
        rx = _weighted_scm(xt[:, :, empty], np.ones((xt.shape[1], int(empty.sum()))))
        rn[empty] = rx / xt.shape[1]
    return rn / np.where(empty, 1.0, total)[:, None, None]


def noise_scm_from_weights(x: np.ndarray, phi: np.ndarray,
                           mask: np.ndarray | None = None) -> np.ndarray:
    """Weight-driven noise SCM ``sum phi x~ x~^H / sum phi``."""
    phi = np.asarray(phi, dtype=float)
    total = phi.sum(axis=0)
    if np.any(total <= 0):
        raise NumericalError(f"weights sum to zero in {int(np.sum(total <= 0))} bins")
    return _weighted_scm(masked_observations(x, mask), phi) / total[:, None, None]


def subtract_and_extract(r_x: np.ndarray, r_n: np.ndarray, nu: float = 1.0, ref: int = 0,
                         v0: np.ndarray | None = None, max_iter: int = 100,
                         tol: float = 1e-8, strict: bool = False) -> np.ndarray:
    """Principal eigenvector of ``R_x - nu R_n``, normalized and phase-aligned.

    No PSD projection is applied: over-subtraction returns the eigenvector of
    the largest-magnitude eigenvalue.  Bins where power iteration misses
    ``tol`` are finished with a Hermitian eigensolver unless ``strict``, in
    which case :class:`~beamkit.errors.ConvergenceError` is raised.  Bins
    whose target SCM vanishes keep ``v0`` (or the all-ones direction).
    """
    if not 0.0 <= nu <= 1.0:
        raise ValueError("nu must lie in [0, 1]")
    r_s = np.asarray(r_x) - nu * np.asarray(r_n)
    v, ok = power_iteration(r_s, v0=v0, max_iter=max_iter, tol=tol)
    if not np.all(ok):
        if strict:
            raise ConvergenceError(f"power iteration failed in {int(np.sum(~ok))} bins")
        lam, vec = np.linalg.eigh(r_s[~ok])
        pick = np.argmax(np.abs(lam), axis=-1)
        v[~ok] = np.take_along_axis(vec, pick[:, None, None], axis=-1)[..., 0]
    dead = np.linalg.norm(r_s, axis=(-2, -1)) <= 1e-14 * np.maximum(
        np.linalg.norm(r_x, axis=(-2, -1)), 1e-300)
    if np.any(dead):
        fallback = np.ones(v.shape, complex) if v0 is None else np.broadcast_to(v0, v.shape)
        v[dead] = fallback[dead]
    return normalize_steering(v, ref)


def steering_cosine(h_est: np.ndarray, h_true: np.ndarray) -> np.ndarray:
    """Per-bin ``|h_est^H h_true|`` for unit-norm stacks."""
    return np.abs(np.einsum("...i,...i->...", np.conj(h_est), h_true))
