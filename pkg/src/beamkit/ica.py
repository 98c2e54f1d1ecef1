"""Spatially constrained ICA for joint beamforming and steering estimation.

Per bin ``k`` the demixing matrix ``W_k`` holds the filters as rows
(``W[k, m] = w_m^H``): row 0 is the beamformer, rows ``1..M-1`` extract noise.
Three constraint modes are supported:

* ``LC``: distortionless and null constraints via Lagrange multipliers.
* ``PC``: both relaxed to power penalties with weights ``a1`` and ``az``.
* ``HC``: Lagrangian distortionless constraint plus a null power penalty.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .beamformer import accumulate_wscm, distortionless_filter
from .errors import BeamkitError, NumericalError
from .linalg import DEFAULT_LOADING, diagonal_load, quad_form
from .models import (
    BeamformerVariant,
    ModelParams,
    median_magnitude,
    target_weights,
    weight_noise_gaussian,
    weight_noise_laplacian,
)
from .sve import noise_scm_from_ratio, normalize_steering, scm_observations, subtract_and_extract

__all__ = [
    "ConstraintMode",
    "DemixingState",
    "IcaOutputs",
    "init_demixing",
    "demix",
    "mdp_normalize",
    "power_ratio",
    "update_target_lc",
    "update_target_hc",
    "update_target_pc",
    "update_noise_lc",
    "update_noise_pc",
    "run_batch_ica",
]


class ConstraintMode(str, enum.Enum):
    LC = "LC"
    PC = "PC"
    HC = "HC"

    @classmethod
    def parse(cls, name) -> "ConstraintMode":
        if isinstance(name, cls):
            return name
        key = str(name).upper().replace("ICA_", "").replace("ICA-", "")
        try:
            return cls(key)
        except ValueError:
            raise BeamkitError(f"unknown constraint mode {name!r}") from None


@dataclass
class DemixingState:
    W: np.ndarray
    A: np.ndarray
    mode: ConstraintMode = ConstraintMode.HC
    a1: float = math.inf
    az: float = 1.0

    def __post_init__(self):
        self.mode = ConstraintMode.parse(self.mode)
        if self.mode is ConstraintMode.LC:
            self.a1 = self.az = math.inf
        elif self.mode is ConstraintMode.HC:
            self.a1 = math.inf
            if not math.isfinite(self.az) or self.az < 0:
                raise BeamkitError("ICA-HC needs a finite, non-negative az")
        elif not (math.isfinite(self.a1) and math.isfinite(self.az)):
            raise BeamkitError("ICA-PC needs finite penalties a1 and az")

    @property
    def n_channels(self) -> int:
        return self.W.shape[-1]

    def row(self, m: int) -> np.ndarray:
        """Filter vectors ``w_m`` for all bins, ``(K, M)``."""
        return self.W[:, m].conj()

    def set_row(self, m: int, w: np.ndarray) -> None:
        self.W[:, m] = w.conj()

    def refresh(self) -> None:
        self.A = np.linalg.inv(self.W)

    def drift(self) -> float:
        """``max_k ||W_k A_k - I||_F``."""
        eye = np.eye(self.n_channels)
        return float(np.max(np.linalg.norm(self.W @ self.A - eye, axis=(-2, -1))))


@dataclass
class IcaOutputs:
    Y: np.ndarray
    Z: np.ndarray
    S_hat: np.ndarray
    N_hat: np.ndarray
    h_trace: list = field(default_factory=list)


def init_demixing(h: np.ndarray, mode="HC", a1: float = math.inf,
                  az: float = 1.0) -> DemixingState:
    """``W_k = [h_k | e_2 ... e_M]^{-1}``."""
    h = np.asarray(h, dtype=complex)
    if np.any(np.abs(h[:, 0]) == 0):
        raise NumericalError("steering vector with zero reference component")
    n_bins, n_ch = h.shape
    a = np.broadcast_to(np.eye(n_ch, dtype=complex), (n_bins, n_ch, n_ch)).copy()
    a[:, :, 0] = h
    return DemixingState(np.linalg.inv(a), a, mode, a1, az)


def identity_demixing(n_bins: int, n_ch: int, mode="HC", a1: float = math.inf,
                      az: float = 1.0) -> DemixingState:
    eye = np.broadcast_to(np.eye(n_ch, dtype=complex), (n_bins, n_ch, n_ch))
    return DemixingState(eye.copy(), eye.copy(), mode, a1, az)


def demix(state: DemixingState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Target ``(T, K)`` and noise ``(T, K, M-1)`` outputs of ``W x``."""
    u = np.einsum("kmn,ntk->tkm", state.W, x, optimize=True)
    return u[..., 0], u[..., 1:]


def mdp_normalize(state: DemixingState, y: np.ndarray, z: np.ndarray):
    """Minimal-distortion rescaling by ``diag(A_k)``."""
    d = np.einsum("kmm->km", state.A)
    return d[:, 0] * y, d[:, 1:] * z


def power_ratio(s_hat: np.ndarray, n_hat: np.ndarray) -> np.ndarray:
    """``||n||^2 / (|S|^2 + ||n||^2)``; 0/0 is 0."""
    pn = np.sum(np.abs(n_hat) ** 2, axis=-1)
    tot = np.abs(s_hat) ** 2 + pn
    return np.divide(pn, tot, out=np.zeros_like(pn), where=tot > 0)


def update_target_lc(v: np.ndarray, h: np.ndarray, delta: float = DEFAULT_LOADING):
    return distortionless_filter(v, h, delta)


update_target_hc = update_target_lc


def update_target_pc(state: DemixingState, v: np.ndarray, h: np.ndarray, a1: float,
                     delta: float = DEFAULT_LOADING) -> np.ndarray:
    """One fixed-point step of ``(V + a1 h h^H) w_1 = A e_1 + a1 h``, with ``A``
    frozen at the previous iterate."""
    if not (math.isfinite(a1) and a1 > 0):
        raise BeamkitError("penalty update needs finite a1 > 0")
    hh = a1 * h[:, :, None] * h.conj()[:, None, :]
    rhs = state.A[:, :, 0] + a1 * h
    return np.linalg.solve(diagonal_load(v, delta) + hh, rhs[..., None])[..., 0]


def _normalize_rows(w_tilde, metric):
    q = np.real(quad_form(metric, w_tilde))
    if np.any(q <= 0) or not np.all(np.isfinite(q)):
        raise NumericalError("noise filter normalization is not positive")
    return w_tilde / np.sqrt(q)[:, None]


def update_noise_lc(state: DemixingState, vz: np.ndarray, h: np.ndarray,
                    delta: float = DEFAULT_LOADING, rows=None) -> None:
    """Null-constrained noise rows, in place, refreshing ``A`` after each row.

    ``G = Vz^-1 - Vz^-1 h h^H Vz^-1 / (h^H Vz^-1 h)`` projects out the steered
    direction; ``w = G A e_m`` is then scaled to ``w^H Vz w = 1``.
    """
    vzl = diagonal_load(vz, delta)
    ui = np.linalg.inv(vzl)
    uh = np.einsum("kij,kj->ki", ui, h)
    den = np.real(np.einsum("ki,ki->k", h.conj(), uh))
    if np.any(den <= 0):
        raise NumericalError("h^H Vz^-1 h is not positive")
    g = ui - uh[:, :, None] * uh.conj()[:, None, :] / den[:, None, None]
    for m in rows or range(1, state.n_channels):
        w_tilde = np.einsum("kij,kj->ki", g, state.A[:, :, m])
        state.set_row(m, _normalize_rows(w_tilde, vzl))
        state.refresh()


def update_noise_pc(state: DemixingState, vz: np.ndarray, h: np.ndarray, az: float,
                    delta: float = DEFAULT_LOADING, rows=None) -> None:
    """Penalty-relaxed noise rows (shared by ICA-PC and ICA-HC), in place.

    ``H_z = Vz + az h h^H``; ``w = (W H_z)^{-1} e_m`` scaled to
    ``w^H H_z w = 1``.  ``az = 0`` is the unconstrained iterative projection.
    """
    if az < 0 or not math.isfinite(az):
        raise BeamkitError("az must be finite and non-negative")
    hz = diagonal_load(vz, delta) + az * h[:, :, None] * h.conj()[:, None, :]
    n_ch = state.n_channels
    for m in rows or range(1, n_ch):
        e = np.zeros((hz.shape[0], n_ch), complex)
        e[:, m] = 1.0
        w_tilde = np.linalg.solve(state.W @ hz, e[..., None])[..., 0]
        state.set_row(m, _normalize_rows(w_tilde, hz))
        state.refresh()


def noise_metric(state: DemixingState, vz: np.ndarray, h: np.ndarray,
                 delta: float = DEFAULT_LOADING) -> np.ndarray:
    """The matrix the noise rows are normalized against (``Vz`` or ``H_z``)."""
    vzl = diagonal_load(vz, delta)
    if state.mode is ConstraintMode.LC:
        return vzl
    return vzl + state.az * h[:, :, None] * h.conj()[:, None, :]


def run_batch_ica(x: np.ndarray, variant="MaskSMLDR", mask: np.ndarray | None = None,
                  mode="HC", a1: float = math.inf, az: float = 1.0, iters: int = 10,
                  params: ModelParams | None = None, h_init: np.ndarray | None = None,
                  init: str = "steering", noise_model: str = "laplacian",
                  delta: float = DEFAULT_LOADING, callback=None):
    """Alternate steering estimation and constrained demixing updates.

    Each round computes outputs, MDP-normalizes them, forms the noise power
    ratio, re-estimates ``h`` by covariance subtraction, then updates the
    target row (per ``variant`` weighting) and the noise rows.  ``init`` is
    ``"steering"`` (``W = [h | e_2..e_M]^{-1}``, with ``h = 1`` by default) or
    ``"identity"`` for unknown target directions.

    ``callback(round, state, h, vz)`` is called after each round.  Returns
    ``(IcaOutputs, DemixingState, h_trace)`` where ``h_trace[0]`` is the
    normalized initial steering and ``h_trace[r]`` the one used in round ``r``.
    """
    variant = BeamformerVariant.parse(variant)
    variant.check_mask(mask)
    mode = ConstraintMode.parse(mode)
    params = params or ModelParams()
    x = np.asarray(x)
    n_ch, _, n_bins = x.shape
    if h_init is None:
        h_init = np.ones((n_bins, n_ch), complex)
    if init == "identity":
        state = identity_demixing(n_bins, n_ch, mode, a1, az)
    elif init == "steering":
        state = init_demixing(h_init, mode, a1, az)
    else:
        raise BeamkitError(f"unknown init {init!r}")
    h = normalize_steering(h_init)
    trace = [h.copy()]
    medmag = median_magnitude(x, params.excluded_channels) if variant.needs_mask else None
    r_x = scm_observations(x, mask)

    for it in range(iters):
        y, z = demix(state, x)
        s_hat, n_hat = mdp_normalize(state, y, z)
        r_n = power_ratio(s_hat, n_hat)
        h = subtract_and_extract(r_x, noise_scm_from_ratio(x, r_n, mask), 1.0, v0=h)
        trace.append(h.copy())

        phi = target_weights(variant, y, mask, medmag, params)
        if noise_model == "laplacian":
            phi_z = weight_noise_laplacian(z, params.phi0)
        else:
            phi_z = weight_noise_gaussian(y.shape)
        v = accumulate_wscm(x, phi)
        vz = accumulate_wscm(x, phi_z)

        if mode is ConstraintMode.PC:
            w1 = update_target_pc(state, v, h, state.a1, delta)
        else:
            w1 = distortionless_filter(v, h, delta)
        state.set_row(0, w1)
        state.refresh()
        if mode is ConstraintMode.LC:
            update_noise_lc(state, vz, h, delta)
        else:
            update_noise_pc(state, vz, h, state.az, delta)
        if callback is not None:
            callback(it, state, h, vz)

    y, z = demix(state, x)
    s_hat, n_hat = mdp_normalize(state, y, z)
    return IcaOutputs(y, z, s_hat, n_hat, trace), state, trace
