"""Multichannel STFT analysis/synthesis and WAV I/O.

Shape convention: time-domain signals are ``(M, N)``; spectrograms are
``(M, T, K)`` with ``K = window_len // 2 + 1``.

Every signal is zero-padded by half a window at both ends (plus whatever tail
is needed to complete the last hop), so each original sample is covered by
full analysis frames.  :func:`istft` undoes exactly that padding when the
spectrogram carries the original length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import BeamkitError

__all__ = [
    "StftConfig",
    "Spectrogram",
    "periodic_hann",
    "stft",
    "istft",
    "read_wav",
    "write_wav",
]


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1024
    hop: int = 256
    window: str = "hann"
    sample_rate: int = 16000

    def __post_init__(self):
        n = self.window_len
        if n < 2 or n & (n - 1):
            raise ValueError(f"window_len must be a power of two, got {n}")
        if self.hop <= 0 or n % self.hop:
            raise ValueError(f"hop ({self.hop}) must divide window_len ({n})")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        w2 = periodic_hann(n) ** 2
        ola = w2.reshape(-1, self.hop).sum(axis=0)
        if not np.allclose(ola, ola[0], rtol=1e-12, atol=0):
            raise ValueError("window/hop pair violates the COLA condition")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def pad(self) -> int:
        return self.window_len // 2

    @property
    def ola_gain(self) -> float:
        """Constant overlap-add sum of the squared window (interior samples)."""
        return float(np.sum(periodic_hann(self.window_len) ** 2) / self.hop)

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.window_len

    def n_frames(self, n_samples: int) -> int:
        padded = n_samples + 2 * self.pad
        return 1 + -(-(padded - self.window_len) // self.hop)


@dataclass
class Spectrogram:
    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    n_samples: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"spectrogram must be (M, T, K), got {self.data.shape}")
        if self.data.shape[2] != self.config.n_bins:
            raise ValueError(
                f"bin count {self.data.shape[2]} != window_len/2+1 = {self.config.n_bins}"
            )

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def n_bins(self) -> int:
        return self.data.shape[2]


def periodic_hann(n: int) -> np.ndarray:
    # DFT-even Hann: COLA at hops of n/4 (and n/2 for the unsquared window)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _as_channels(signal) -> np.ndarray:
    if isinstance(signal, (list, tuple)):
        lengths = {len(np.ravel(ch)) for ch in signal}
        if len(lengths) > 1:
            raise BeamkitError(f"channel length mismatch: {sorted(lengths)}")
    x = np.asarray(signal, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise BeamkitError(f"signal must be (M, N), got shape {x.shape}")
    if x.size == 0:
        raise BeamkitError("empty signal")
    return x


def stft(signal, cfg: StftConfig | None = None) -> Spectrogram:
    """One-sided STFT of a real ``(M, N)`` (or ``(N,)``) signal."""
    cfg = cfg or StftConfig()
    x = _as_channels(signal)
    n_ch, n = x.shape
    if n < cfg.window_len:
        raise BeamkitError(f"signal length {n} shorter than window_len {cfg.window_len}")
    n_frames = cfg.n_frames(n)
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    padded = np.zeros((n_ch, total))
    padded[:, cfg.pad:cfg.pad + n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_len, axis=1)
    frames = frames[:, ::cfg.hop]
    spec = np.fft.rfft(frames * periodic_hann(cfg.window_len), axis=-1)
    return Spectrogram(spec, cfg, n)


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Normalization divides by the per-sample sum of squared windows, which equals
    ``cfg.ola_gain`` away from the edges, so the inverse is exact for any
    consistent spectrogram.  Output length is ``length`` if given, else the
    spectrogram's recorded ``n_samples``, else ``(T - 1) * hop``.
    """
    data = np.asarray(spec.data)
    if not np.all(np.isfinite(data)):
        raise BeamkitError("spectrogram contains non-finite entries")
    cfg = spec.config
    n_ch, n_frames, _ = data.shape
    win = periodic_hann(cfg.window_len)
    frames = np.fft.irfft(data, n=cfg.window_len, axis=-1) * win
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    out = np.zeros((n_ch, total))
    norm = np.zeros(total)
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.window_len)
        out[:, sl] += frames[:, t]
        norm[sl] += win ** 2
    nz = norm > 1e-10
    out[:, nz] /= norm[nz]
    if length is None:
        length = spec.n_samples if spec.n_samples is not None else (n_frames - 1) * cfg.hop
    return out[:, cfg.pad:cfg.pad + length]


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read PCM16 / float32 WAV as float ``(M, N)`` in [-1, 1]."""
    rate, data = wavfile.read(path)
    if expected_rate is not None and rate != expected_rate:
        raise BeamkitError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(float)
    else:
        raise BeamkitError(f"{path}: unsupported sample format {data.dtype}")
    x = x[:, None] if x.ndim == 1 else x
    return np.ascontiguousarray(x.T), rate


def write_wav(path, signal, rate: int = 16000, subtype: str = "float32") -> None:
    """Write ``(M, N)`` samples as interleaved float32 or PCM16."""
    x = np.atleast_2d(np.asarray(signal, dtype=float)).T
    if subtype == "float32":
        data = x.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown subtype {subtype!r}")
    wavfile.write(path, rate, data[:, 0] if data.shape[1] == 1 else data)
