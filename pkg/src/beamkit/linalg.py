"""Complex Hermitian primitives shared by every per-bin update.

All functions broadcast over leading dimensions, so a stack of per-bin
matrices ``(K, M, M)`` with vectors ``(K, M)`` is processed in one call.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, NumericalError

__all__ = [
    "DEFAULT_LOADING",
    "hermitize",
    "quad_form",
    "diagonal_load",
    "solve_hermitian",
    "sm_inverse_update",
    "principal_eigenvector",
    "power_iteration",
]

DEFAULT_LOADING = 1e-6


def hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def quad_form(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``v^H A v`` over a stack; returns complex values."""
    return np.einsum("...i,...ij,...j->...", v.conj(), a, v)


def diagonal_load(v: np.ndarray, delta: float) -> np.ndarray:
    """Return ``V + delta * trace(V) / M * I``.

    A matrix with zero trace receives absolute loading ``delta * I`` instead,
    so the all-zero wSCM of a fully masked bin still yields a solvable system.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    v = np.asarray(v)
    if delta == 0:
        return v.copy()
    m = v.shape[-1]
    scale = np.real(np.trace(v, axis1=-2, axis2=-1)) / m
    scale = np.where(scale > 0, scale, 1.0)
    return v + (delta * scale)[..., None, None] * np.eye(m)


def solve_hermitian(v: np.ndarray, b: np.ndarray, delta: float = 0.0) -> np.ndarray:
    """Solve ``V x = b`` for Hermitian positive-definite ``V``.

    ``delta`` applies :func:`diagonal_load` first.  Positive definiteness is
    checked with a Cholesky factorization; failure raises
    :class:`NumericalError`.
    """
    v = diagonal_load(v, delta) if delta else np.asarray(v)
    try:
        np.linalg.cholesky(v)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite after loading") from exc
    return np.linalg.solve(v, b[..., None])[..., 0]


def sm_inverse_update(u: np.ndarray, x: np.ndarray, rho, phi) -> np.ndarray:
    """Inverse of ``rho * U^{-1} + (1 - rho) * phi * x x^H`` via the matrix
    inversion lemma, given the current inverse ``U``.

    ``rho`` must lie in (0, 1]; ``phi`` is non-negative.  Both may be arrays
    broadcasting against the leading dimensions of ``U``.
    """
    rho = np.asarray(rho, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(rho <= 0) or np.any(rho > 1):
        raise ValueError("rho must lie in (0, 1]")
    if np.any(phi < 0):
        raise ValueError("phi must be non-negative")
    gain = (1.0 - rho) * phi
    ux = np.einsum("...ij,...j->...i", u, x)
    xux = np.real(np.einsum("...i,...i->...", x.conj(), ux))
    active = gain > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = np.where(active, rho ** 2 / np.where(active, gain, 1.0) + rho * xux, 1.0)
    if np.any(denom <= 0) or not np.all(np.isfinite(denom)):
        raise NumericalError("matrix inversion lemma denominator is not positive")
    coef = np.where(active, 1.0 / denom, 0.0)
    outer = ux[..., :, None] * ux.conj()[..., None, :]
    return u / rho[..., None, None] - coef[..., None, None] * outer


def power_iteration(r: np.ndarray, v0: np.ndarray | None = None, max_iter: int = 100,
                    tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Batched power iteration.

    Returns ``(v, converged)``; ``v`` is unit-norm and ``converged`` flags the
    stack entries whose residual ``||Rv - (v^H R v) v||`` dropped to
    ``tol * ||R||_F``.  The iteration tracks the eigenvalue of largest
    magnitude, which is also what indefinite inputs return.
    """
    r = np.asarray(r)
    m = r.shape[-1]
    if v0 is None:
        v = np.ones(r.shape[:-1], dtype=complex) / np.sqrt(m)
    else:
        v = np.array(np.broadcast_to(v0, r.shape[:-1]), dtype=complex)
        v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-300)
    rnorm = np.linalg.norm(r, axis=(-2, -1))
    tiny = 1e-300 + 1e-13 * rnorm

    # start vectors orthogonal to the dominant subspace: restart from the
    # largest column of R, which always has a component along it
    rv = np.einsum("...ij,...j->...i", r, v)
    dead = np.linalg.norm(rv, axis=-1) <= tiny
    if np.any(dead):
        cols = np.linalg.norm(r, axis=-2)
        pick = np.argmax(cols, axis=-1)
        alt = np.take_along_axis(r, pick[..., None, None], axis=-1)[..., 0]
        alt = alt / np.maximum(np.linalg.norm(alt, axis=-1, keepdims=True), 1e-300)
        v = np.where(dead[..., None], alt, v)

    converged = np.zeros(r.shape[:-2], dtype=bool)
    for _ in range(max_iter):
        rv = np.einsum("...ij,...j->...i", r, v)
        lam = np.einsum("...i,...i->...", v.conj(), rv)
        resid = np.linalg.norm(rv - lam[..., None] * v, axis=-1)
        converged = resid <= tol * rnorm
        if np.all(converged):
            break
        nrm = np.linalg.norm(rv, axis=-1, keepdims=True)
        step = np.where(nrm > tiny[..., None], rv / np.maximum(nrm, 1e-300), v)
        v = np.where(converged[..., None], v, step)
    return v, converged


def principal_eigenvector(r: np.ndarray, tol: float = 1e-8, max_iter: int = 100,
                          v0: np.ndarray | None = None) -> np.ndarray:
    """Unit eigenvector of the largest-magnitude eigenvalue of Hermitian ``R``.

    Starts from the normalized all-ones vector unless ``v0`` is given.  Raises
    :class:`ConvergenceError` if any stack entry misses ``tol`` within
    ``max_iter`` iterations, and :class:`NumericalError` for an all-zero input.
    """
    r = np.asarray(r)
    if np.any(np.linalg.norm(r, axis=(-2, -1)) == 0):
        raise NumericalError("principal eigenvector of an all-zero matrix")
    v, ok = power_iteration(r, v0=v0, max_iter=max_iter, tol=tol)
    if not np.all(ok):
        raise ConvergenceError(
            f"power iteration did not converge for {int(np.size(ok) - np.count_nonzero(ok))}"
            f" matrices within {max_iter} iterations"
        )
    return v
