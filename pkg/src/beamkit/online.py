"""Frame-by-frame RLS beamforming with online steering estimation.

:class:`OnlineBeamformer` keeps the whole per-bin state of the online
algorithm and consumes one STFT frame per :meth:`OnlineBeamformer.process_frame`
call.  Every per-frame step is vectorized across bins.

Per frame, in order: outputs with the previous filters, MDP normalization,
smoothed noise power and ratio, recursive observation/noise SCMs, covariance
subtraction and a warm-started power step for ``h``, TVV and weights, inverse
wSCM updates via the matrix inversion lemma, the distortionless target row,
the noise rows, and finally the enhanced output with the new target filter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BeamkitError, NumericalError
from .linalg import hermitize, quad_form
from .models import BeamformerVariant, ModelParams
from .sve import normalize_steering, steering_cosine

__all__ = ["OnlineParams", "OnlineBeamformer", "rho", "schedule", "tvv_step", "run_online"]

log = logging.getLogger(__name__)

SVE_MODES = ("fixed", "mask_only", "wscm", "ica_lc", "ica_hc", "ica_pc")
DENOM_FLOOR = 1e-12
DRIFT_GUARD = 1e-9


@dataclass(frozen=True)
class OnlineParams:
    """Online hyperparameters; defaults are the published online settings.

    ``nu_after = None`` resolves to 0.99 with masks and 0.8 without.
    """

    alpha_initial: float = 0.96
    alpha_after: float = 0.99
    t_switch: int = 100
    gamma: float = 0.1
    gamma_n: float = 0.9
    nu_initial: float = 0.0
    nu_after: float | None = None
    epsilon: float = 1e-2
    az: float = 1.0
    a1: float = math.inf
    delta_init: float = 1e-3
    eig_iters: int = 3

    def __post_init__(self):
        for name in ("alpha_initial", "alpha_after", "gamma", "gamma_n", "nu_initial", "epsilon"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if self.nu_after is not None and not 0.0 <= self.nu_after <= 1.0:
            raise ValueError("nu_after must lie in [0, 1]")
        if self.t_switch < 1:
            raise ValueError("t_switch must be >= 1")
        if self.delta_init <= 0:
            raise ValueError("delta_init must be > 0")

    def resolved(self, masked: bool) -> "OnlineParams":
        if self.nu_after is not None:
            return self
        return replace(self, nu_after=0.99 if masked else 0.8)


def rho(t: int, alpha: float) -> float:
    """``1 - 1 / sum_{tau=1}^t alpha^(t - tau)`` (direct form)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    s = 0.0
    for _ in range(t):
        s = 1.0 + alpha * s
    return 1.0 - 1.0 / s


def schedule(params: OnlineParams, t: int) -> tuple[float, float]:
    """``(alpha_t, nu_t)``: step change at frame ``t_switch`` (1-based)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    p = params if params.nu_after is not None else params.resolved(True)
    if t >= p.t_switch:
        return p.alpha_after, p.nu_after
    return p.alpha_initial, p.nu_initial


def tvv_step(variant: BeamformerVariant, lam_prev, gamma: float, y_prev=None,
             masked_power=None, alpha_lambda: float = 1.0, floor: float = 1e-10):
    """One recursive TVV update.

    ``masked_power`` is ``M * median|X|^2`` for the current frame and
    ``y_prev`` the output of the previous filter.
    """
    v = variant
    if v is BeamformerVariant.MLDR:
        drive = np.abs(y_prev) ** 2
    elif v is BeamformerVariant.MaskMLDR:
        drive = masked_power
    elif v is BeamformerVariant.MaskPMLDR:
        drive = (masked_power + np.abs(y_prev) ** 2) / (alpha_lambda + 2.0)
    elif v is BeamformerVariant.MaskSMLDR:
        drive = masked_power / 4.0
    else:
        return lam_prev
    return np.maximum(gamma * lam_prev + (1.0 - gamma) * drive, floor)


def _mv(a, v):
    """Stacked matrix-vector product ``a @ v`` over the leading axis."""
    return np.matmul(a, v[..., None])[..., 0]


def _dot(a, b):
    """Stacked ``a^H b``."""
    return np.sum(a.conj() * b, axis=-1)


def _median_rows(a):
    srt = np.sort(a, axis=1)
    n = a.shape[1]
    if n % 2:
        return srt[:, n // 2]
    return 0.5 * (srt[:, n // 2 - 1] + srt[:, n // 2])


def _outer(a):
    return a[:, :, None] * a.conj()[:, None, :]


@dataclass
class FrameDiagnostics:
    t: int
    distortionless: float
    null: float
    normalization: float
    drift: float
    h_cosine_drift: float
    reloads: int = 0


@dataclass
class OnlineBeamformer:
    """Streaming beamformer for ``n_bins`` bins of an ``n_ch``-channel array.

    ``sve`` selects the steering source: ``fixed`` (``h`` given and frozen),
    ``mask_only`` (ratio ``1 - M``), ``wscm`` (ratio = target weight) or one of
    the ICA modes ``ica_lc`` / ``ica_hc`` / ``ica_pc``.  ``noise_model`` is
    ``laplacian`` or ``gaussian`` for the noise-row weights.
    """

    n_bins: int
    n_ch: int
    variant: BeamformerVariant = BeamformerVariant.MaskSMLDR
    sve: str = "ica_hc"
    params: OnlineParams = field(default_factory=OnlineParams)
    model: ModelParams = field(default_factory=ModelParams)
    masked: bool = True
    h_init: np.ndarray | None = None
    noise_model: str = "laplacian"
    init: str = "steering"
    ref: int = 0

    def __post_init__(self):
        self.variant = BeamformerVariant.parse(self.variant)
        if self.sve not in SVE_MODES:
            raise BeamkitError(f"unknown sve mode {self.sve!r}")
        if self.variant.needs_mask and not self.masked:
            raise BeamkitError(f"beamformer {self.variant.value} requires a target mask")
        if self.sve == "mask_only" and not self.masked:
            raise BeamkitError("sve=mask_only requires a target mask")
        if self.sve == "fixed" and self.h_init is None:
            raise BeamkitError("sve=fixed requires a steering field")
        if self.sve == "ica_pc" and not math.isfinite(self.params.a1):
            raise BeamkitError("sve=ica_pc requires a finite a1")
        self.params = self.params.resolved(self.masked)
        k, m = self.n_bins, self.n_ch
        eye = np.eye(m, dtype=complex)
        h0 = np.ones((k, m), complex) if self.h_init is None else np.asarray(self.h_init, complex)
        if self.init == "identity":
            a = np.broadcast_to(eye, (k, m, m)).copy()
        else:
            a = np.broadcast_to(eye, (k, m, m)).copy()
            a[:, :, 0] = h0
        self.A = a
        self.W = np.linalg.inv(a)
        self.h = normalize_steering(h0, self.ref)
        d = self.params.delta_init
        self.U = np.broadcast_to(eye / d, (k, m, m)).copy()
        self.Uz = self.U.copy()
        self.V = np.broadcast_to(eye * d, (k, m, m)).copy()
        self.Vz = self.V.copy()
        self.Rx = np.zeros((k, m, m), complex)
        self.Rn = np.zeros((k, m, m), complex)
        self.lam = np.full(k, 1e-10)
        self.Pn = np.zeros(k)
        self.sum_alpha = 0.0
        self.sum_ratio = np.zeros(k)
        self.t = 0
        self.reloads = 0
        self.last: FrameDiagnostics | None = None

    # -- helpers ---------------------------------------------------------

    def _rank1_inverse(self, u, v, x, rho_t, phi):
        """Inverse and matrix updates for ``rho V + (1 - rho) phi x x^H``.

        The inverse is re-symmetrized every frame: the ``1 / rho`` factor
        would otherwise amplify rounding asymmetry geometrically.
        """
        v_new = rho_t * v + ((1.0 - rho_t) * phi)[:, None, None] * _outer(x)
        if rho_t == 0.0:
            # first frame: the prior is forgotten completely; load the rank-1
            # matrix so it stays invertible
            loaded = v_new + self._loading(v_new)[:, None, None] * np.eye(self.n_ch)
            return hermitize(np.linalg.inv(loaded)), loaded
        gain = (1.0 - rho_t) * phi
        ux = _mv(u, x)
        xux = np.real(_dot(x, ux))
        with np.errstate(divide="ignore"):
            denom = np.where(gain > 0, rho_t ** 2 / np.where(gain > 0, gain, 1.0) + rho_t * xux,
                             np.inf)
        u_new = u / rho_t
        u_new -= _outer(ux) / denom[:, None, None]
        u_new = hermitize(u_new)
        bad = (denom <= DENOM_FLOOR) | ~np.isfinite(xux)
        if np.any(bad):
            self.reloads += int(bad.sum())
            loaded = v_new[bad] + self._loading(v_new[bad])[:, None, None] * np.eye(self.n_ch)
            u_new[bad] = hermitize(np.linalg.inv(loaded))
        return u_new, v_new

    def _loading(self, v):
        tr = np.real(np.trace(v, axis1=1, axis2=2)) / self.n_ch
        return np.where(tr > 0, 1e-6 * tr, self.params.delta_init)

    def _refresh_row(self, m, w_new):
        """Replace row ``m`` of ``W`` and update ``A`` by the rank-1 inverse formula."""
        dw = w_new - self.W[:, m].conj()
        a_em = self.A[:, :, m].copy()
        dwa = np.matmul(dw.conj()[:, None, :], self.A)[:, 0]
        den = 1.0 + _dot(dw, a_em)
        ok = np.abs(den) > DENOM_FLOOR
        self.W[:, m] = w_new.conj()
        self.A -= a_em[:, :, None] * (dwa / np.where(ok, den, 1.0)[:, None])[:, None, :]
        if not np.all(ok):
            self.A[~ok] = np.linalg.inv(self.W[~ok])

    # -- main step -------------------------------------------------------

    def process_frame(self, x_t: np.ndarray, mask_t: np.ndarray | None = None) -> np.ndarray:
        """Consume one frame ``x_t`` of shape ``(K, M)``; return ``Y_t`` ``(K,)``."""
        x_t = np.asarray(x_t, dtype=complex)
        if x_t.shape != (self.n_bins, self.n_ch):
            raise BeamkitError(f"frame shape {x_t.shape} != {(self.n_bins, self.n_ch)}")
        if not np.all(np.isfinite(x_t)):
            raise NumericalError(f"non-finite input at frame {self.t + 1}")
        p, mp = self.params, self.model
        if self.masked:
            if mask_t is None:
                raise BeamkitError("masked engine needs a mask for every frame")
            mask_t = np.maximum(np.clip(np.asarray(mask_t, float), 0.0, 1.0), p.epsilon)
        self.t += 1
        t = self.t
        alpha, nu = schedule(p, t)

        # outputs with the previous filters
        u = _mv(self.W, x_t)
        y_prev, z_prev = u[:, 0], u[:, 1:]

        # steering estimation
        a_diag = np.einsum("kmm->km", self.A)
        s_hat = a_diag[:, 0] * y_prev
        n_hat = a_diag[:, 1:] * z_prev
        self.Pn = p.gamma_n * self.Pn + (1.0 - p.gamma_n) * np.sum(np.abs(n_hat) ** 2, axis=1)
        tot = np.abs(s_hat) ** 2 + self.Pn
        r_n = np.divide(self.Pn, tot, out=np.zeros_like(tot), where=tot > 0)

        self.sum_alpha = 1.0 + alpha * self.sum_alpha
        rho_t = 1.0 - 1.0 / self.sum_alpha

        x_sve = x_t * np.sqrt(mask_t)[:, None] if self.masked else x_t
        if self.sve == "mask_only":
            x_sve = x_t
        xx = _outer(x_sve)
        self.Rx = rho_t * self.Rx + (1.0 - rho_t) * xx

        medmag = None
        if self.masked:
            keep = [m for m in range(self.n_ch) if m not in set(mp.excluded_channels)]
            medmag = _median_rows(np.abs(x_t[:, keep]))
        masked_power = mask_t * medmag ** 2 if self.masked else None
        self.lam = tvv_step(self.variant, self.lam, p.gamma, y_prev, masked_power, mp.alpha_lambda)
        phi = self._target_weight(y_prev, mask_t)

        h_old = self.h
        if self.sve != "fixed":
            if self.sve == "mask_only":
                ratio = 1.0 - mask_t
            elif self.sve == "wscm":
                ratio = phi
            else:
                ratio = r_n
            self.sum_ratio = ratio + alpha * self.sum_ratio
            upd = self.sum_ratio > DENOM_FLOOR
            rho_n = np.where(upd, 1.0 - ratio / np.where(upd, self.sum_ratio, 1.0), 1.0)
            self.Rn = np.where(upd[:, None, None],
                               rho_n[:, None, None] * self.Rn + (1.0 - rho_n)[:, None, None] * xx,
                               self.Rn)
            r_s = self.Rx - nu * self.Rn
            # a few warm-started power steps; the previous h is already close
            v = self.h
            for _ in range(p.eig_iters):
                v = _mv(r_s, v)
            nrm = np.linalg.norm(v, axis=1)
            live = nrm > 1e-300
            if not np.all(live):
                v = np.where(live[:, None], v, self.h)
            self.h = normalize_steering(v, self.ref)
        h = self.h

        # weighted SCMs
        if self.noise_model == "laplacian":
            with np.errstate(divide="ignore"):
                phi_z = np.minimum(1.0 / (2.0 * np.linalg.norm(z_prev, axis=1)), mp.phi0)
        else:
            phi_z = np.ones(self.n_bins)
        ica = self.sve.startswith("ica_")
        self.U, self.V = self._rank1_inverse(self.U, self.V, x_t, rho_t, phi)
        if ica:
            self.Uz, self.Vz = self._rank1_inverse(self.Uz, self.Vz, x_t, rho_t, phi_z)

        # target row
        if self.sve == "ica_pc":
            hh = p.a1 * _outer(h)
            rhs = self.A[:, :, 0] + p.a1 * h
            w1 = np.linalg.solve(self.V + hh, rhs[..., None])[..., 0]
        else:
            uh = _mv(self.U, h)
            den = _dot(h, uh)
            if np.any(np.real(den) <= 0):
                raise NumericalError(f"h^H U h is not positive at frame {t}")
            w1 = uh / den[:, None]

        # without ICA-based steering the noise rows and A are never read, so
        # only the target row is maintained
        norm_resid = math.nan
        if not ica:
            self.W[:, 0] = w1.conj()
        else:
            self._refresh_row(0, w1)
            norm_resid = 0.0
        if ica and self.n_ch > 1:
            # noise rows
            if self.sve == "ica_lc":
                uzh = _mv(self.Uz, h)
                g = self.Uz - uzh[:, :, None] * uzh.conj()[:, None, :] / np.real(
                    _dot(h, uzh))[:, None, None]
                metric = self.Vz
            else:
                az = p.az
                metric = self.Vz + az * _outer(h)
                if az > 0:
                    uzh = _mv(self.Uz, h)
                    g = self.Uz - uzh[:, :, None] * uzh.conj()[:, None, :] / (
                        1.0 / az + np.real(_dot(h, uzh)))[:, None, None]
                else:
                    g = self.Uz
            for m in range(1, self.n_ch):
                w_tilde = _mv(g, self.A[:, :, m])
                q = np.real(quad_form(metric, w_tilde))
                if np.any(q <= 0):
                    raise NumericalError(f"noise row normalization collapsed at frame {t}")
                w_m = w_tilde / np.sqrt(q)[:, None]
                self._refresh_row(m, w_m)
                norm_resid = max(norm_resid, float(np.max(np.abs(np.real(quad_form(metric, w_m)) - 1.0))))

        # guard against accumulated drift of the rank-1 inverse refreshes
        drift = np.full(1, math.nan)
        if ica:
            eye = np.eye(self.n_ch)
            drift = np.linalg.norm(self.W @ self.A - eye, axis=(1, 2))
            if np.any(drift > DRIFT_GUARD):
                bad = drift > DRIFT_GUARD
                self.A[bad] = np.linalg.inv(self.W[bad])
                drift = np.linalg.norm(self.W @ self.A - eye, axis=(1, 2))

        w1 = self.W[:, 0].conj()
        y_t = _dot(w1, x_t)
        if not np.all(np.isfinite(y_t)) or not np.all(np.isfinite(self.W)):
            raise NumericalError(f"non-finite state at frame {t}")
        null = math.nan
        if ica and self.n_ch > 1:
            null = float(np.max(np.abs(_mv(self.W[:, 1:], h))))
        self.last = FrameDiagnostics(
            t=t,
            distortionless=float(np.max(np.abs(_dot(w1, h) - 1.0))),
            null=null,
            normalization=norm_resid,
            drift=float(np.max(drift)),
            h_cosine_drift=float(1.0 - np.min(steering_cosine(h_old, h))),
            reloads=self.reloads,
        )
        return y_t

    def _target_weight(self, y_prev, mask_t):
        v, mp = self.variant, self.model
        if v is BeamformerVariant.MPDR:
            return np.ones(self.n_bins)
        if v is BeamformerVariant.MaskMVDR:
            return 1.0 - mask_t
        if v is BeamformerVariant.MaskSMLDR:
            mag = np.maximum(np.abs(y_prev), 1e-10)
            return np.minimum(1.0 / (2.0 * np.sqrt(self.lam) * mag), mp.phi0)
        return np.minimum(1.0 / self.lam, mp.phi0)

    @property
    def target_filter(self) -> np.ndarray:
        return self.W[:, 0].conj()


def run_online(x: np.ndarray, mask: np.ndarray | None = None, callback=None, **kwargs):
    """Run an :class:`OnlineBeamformer` over a whole ``(M, T, K)`` spectrogram.

    Returns ``(Y, engine, h_trace)`` with ``Y`` ``(T, K)`` and ``h_trace``
    ``(T, K, M)``.  ``callback(engine)`` runs after every frame.
    """
    x = np.asarray(x)
    n_ch, n_frames, n_bins = x.shape
    engine = OnlineBeamformer(n_bins, n_ch, masked=mask is not None, **kwargs)
    y = np.zeros((n_frames, n_bins), complex)
    trace = np.zeros((n_frames, n_bins, n_ch), complex)
    for t in range(n_frames):
        y[t] = engine.process_frame(x[:, t, :].T, None if mask is None else mask[t])
        trace[t] = engine.h
        if callback is not None:
            callback(engine)
    return y, engine, trace
