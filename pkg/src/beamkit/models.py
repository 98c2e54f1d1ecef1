"""Source models: time-varying variances (TVVs) and weighting functions.

Fields are plain ``(T, K)`` arrays (frames by bins).  Every TVV estimator
floors its result at ``TVV_FLOOR`` and every weighting function clips at
``phi0``, so downstream wSCMs stay finite in silent bins.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import BeamkitError

__all__ = [
    "TVV_FLOOR",
    "MAG_FLOOR",
    "BeamformerVariant",
    "ModelParams",
    "moving_average",
    "median_magnitude",
    "tvv_from_output",
    "tvv_from_mask",
    "tvv_map",
    "tvv_sparse",
    "weight_gaussian",
    "weight_sparse",
    "weight_mask_mvdr",
    "weight_noise_laplacian",
    "weight_noise_gaussian",
]

TVV_FLOOR = 1e-10
MAG_FLOOR = 1e-10


class BeamformerVariant(str, enum.Enum):
    MPDR = "MPDR"
    MaskMVDR = "MaskMVDR"
    MLDR = "MLDR"
    MaskMLDR = "MaskMLDR"
    MaskPMLDR = "MaskPMLDR"
    MaskSMLDR = "MaskSMLDR"

    @property
    def needs_mask(self) -> bool:
        return self in _MASKED

    @property
    def iterative(self) -> bool:
        """Whether the weighting depends on the beamformer output."""
        return self in _ITERATIVE

    @classmethod
    def parse(cls, name) -> "BeamformerVariant":
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "").replace("_", "").lower()
        for v in cls:
            if v.value.lower() == key:
                return v
        raise BeamkitError(f"unknown beamformer variant {name!r}")

    def check_mask(self, mask) -> None:
        if self.needs_mask and mask is None:
            raise BeamkitError(f"beamformer {self.value} requires a target mask")


_MASKED = {BeamformerVariant.MaskMVDR, BeamformerVariant.MaskMLDR,
           BeamformerVariant.MaskPMLDR, BeamformerVariant.MaskSMLDR}
_ITERATIVE = {BeamformerVariant.MLDR, BeamformerVariant.MaskPMLDR,
              BeamformerVariant.MaskSMLDR}


@dataclass(frozen=True)
class ModelParams:
    """Source-model hyperparameters.

    ``tau0`` is the moving-average half-width in frames, ``alpha_lambda`` the
    inverse-Gamma shape of the MAP variance estimate, ``phi0`` the weight clip,
    ``mask_floor`` the online mask floor and ``excluded_channels`` the
    (0-based) channels left out of the median magnitude.
    """

    tau0: int = 1
    alpha_lambda: float = 1.0
    phi0: float = 1e6
    mask_floor: float = 1e-2
    excluded_channels: tuple[int, ...] = ()

    def __post_init__(self):
        if self.tau0 < 0:
            raise ValueError("tau0 must be >= 0")
        if self.phi0 <= 0:
            raise ValueError("phi0 must be > 0")
        if not 0 < self.mask_floor < 1:
            raise ValueError("mask_floor must lie in (0, 1)")


def moving_average(p: np.ndarray, tau0: int) -> np.ndarray:
    """Centered moving average over frames (axis 0) of half-width ``tau0``.

    Windows are truncated at the edges: frame ``tau`` averages the frames of
    ``[tau - tau0, tau + tau0]`` that exist.
    """
    p = np.asarray(p, dtype=float)
    if tau0 == 0:
        return p.copy()
    n = p.shape[0]
    csum = np.concatenate([np.zeros((1,) + p.shape[1:]), np.cumsum(p, axis=0)])
    lo = np.clip(np.arange(n) - tau0, 0, n)
    hi = np.clip(np.arange(n) + tau0 + 1, 0, n)
    count = (hi - lo).reshape((-1,) + (1,) * (p.ndim - 1))
    return (csum[hi] - csum[lo]) / count


def median_magnitude(x: np.ndarray, excluded=()) -> np.ndarray:
    """Per-(frame, bin) median of ``|X_m|`` over non-excluded channels of an
    ``(M, T, K)`` spectrogram."""
    x = np.asarray(x)
    keep = [m for m in range(x.shape[0]) if m not in set(excluded)]
    if not keep:
        raise BeamkitError("all channels excluded from the median magnitude")
    return np.median(np.abs(x[keep]), axis=0)


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays if a is not None}
    if len(shapes) > 1:
        raise BeamkitError(f"shape mismatch: {sorted(shapes)}")


def tvv_from_output(y: np.ndarray, tau0: int = 1, floor: float = TVV_FLOOR) -> np.ndarray:
    return np.maximum(moving_average(np.abs(y) ** 2, tau0), floor)


def tvv_from_mask(mask: np.ndarray, medmag: np.ndarray, tau0: int = 1,
                  floor: float = TVV_FLOOR) -> np.ndarray:
    _check_shapes(mask, medmag)
    return np.maximum(moving_average(mask * medmag ** 2, tau0), floor)


def tvv_map(y: np.ndarray, mask: np.ndarray, medmag: np.ndarray, tau0: int = 1,
            alpha_lambda: float = 1.0, floor: float = TVV_FLOOR) -> np.ndarray:
    """MAP variance with the masked-input variance as inverse-Gamma prior."""
    _check_shapes(y, mask, medmag)
    num = np.abs(y) ** 2 + mask * medmag ** 2
    return np.maximum(moving_average(num, tau0) / (alpha_lambda + 2.0), floor)


def tvv_sparse(mask: np.ndarray, medmag: np.ndarray, tau0: int = 1,
               floor: float = TVV_FLOOR) -> np.ndarray:
    """Laplacian-model variance: a quarter of the masked-input moving average."""
    _check_shapes(mask, medmag)
    return np.maximum(moving_average(mask * medmag ** 2, tau0) / 4.0, floor)


def weight_gaussian(lam: np.ndarray, phi0: float = 1e6) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.minimum(1.0 / np.asarray(lam, dtype=float), phi0)


def weight_sparse(lam: np.ndarray, y: np.ndarray, phi0: float = 1e6) -> np.ndarray:
    mag = np.maximum(np.abs(y), MAG_FLOOR)
    with np.errstate(divide="ignore", over="ignore"):
        return np.minimum(1.0 / (2.0 * np.sqrt(lam) * mag), phi0)


def weight_generalized(lam: np.ndarray, y: np.ndarray, beta: float,
                       phi0: float = 1e6) -> np.ndarray:
    """Super-Gaussian weighting ``beta |Y|^{2beta-2} lam^{-beta}``.

    Production paths only use ``beta = 1`` (:func:`weight_gaussian`) and
    ``beta = 1/2`` (:func:`weight_sparse`).
    """
    mag = np.maximum(np.abs(y), MAG_FLOOR)
    with np.errstate(divide="ignore", over="ignore"):
        return np.minimum(beta * mag ** (2 * beta - 2) * np.asarray(lam, float) ** -beta, phi0)


def weight_mask_mvdr(mask: np.ndarray) -> np.ndarray:
    return 1.0 - np.asarray(mask, dtype=float)


def weight_noise_laplacian(z: np.ndarray, phi0: float = 1e6) -> np.ndarray:
    """Spherical Laplacian noise weight ``1 / (2 ||z||)`` for ``(T, K, M-1)``
    noise outputs."""
    norm = np.linalg.norm(np.asarray(z), axis=-1)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0 / (2.0 * norm), phi0)


def weight_noise_gaussian(shape) -> np.ndarray:
    return np.ones(shape)


def target_weights(variant: BeamformerVariant, y, mask, medmag, params: ModelParams):
    """Weighting function of ``variant`` given the current output ``y``.

    ``mask``/``medmag`` may be ``None`` for mask-free variants; ``y`` is
    ignored by the non-iterative ones.
    """
    v, p = variant, params
    if v is BeamformerVariant.MPDR:
        return np.ones(np.shape(y) if mask is None else np.shape(mask))
    if v is BeamformerVariant.MaskMVDR:
        return weight_mask_mvdr(mask)
    if v is BeamformerVariant.MLDR:
        return weight_gaussian(tvv_from_output(y, p.tau0), p.phi0)
    if v is BeamformerVariant.MaskMLDR:
        return weight_gaussian(tvv_from_mask(mask, medmag, p.tau0), p.phi0)
    if v is BeamformerVariant.MaskPMLDR:
        return weight_gaussian(tvv_map(y, mask, medmag, p.tau0, p.alpha_lambda), p.phi0)
    if v is BeamformerVariant.MaskSMLDR:
        return weight_sparse(tvv_sparse(mask, medmag, p.tau0), y, p.phi0)
    raise BeamkitError(f"unhandled variant {variant}")
