"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_sve_cosine", "plot_residuals", "plot_spectrograms"]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_sve_cosine(freqs: np.ndarray, cosine: np.ndarray, path, active=None):
    """Per-bin steering cosine against the true steering field."""
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.plot(freqs / 1000.0, cosine, lw=0.8, color="0.3", label="all bins")
    if active is not None:
        ax.plot(freqs[active] / 1000.0, cosine[active], ".", ms=2.5, color="C0",
                label="speech-active")
        ax.legend(loc="lower left", frameon=False, fontsize=8)
    ax.set_xlabel("frequency [kHz]")
    ax.set_ylabel(r"$|\hat h^H h|$")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_residuals(freqs: np.ndarray, residuals: dict, path):
    """Per-bin constraint residuals on a log scale."""
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    for name, vals in residuals.items():
        vals = np.maximum(np.asarray(vals, float), 1e-18)
        ax.semilogy(freqs / 1000.0, vals, lw=0.8, label=name)
    ax.set_xlabel("frequency [kHz]")
    ax.set_ylabel("residual")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3, which="both")
    return _save(fig, path)


def plot_spectrograms(specs: dict, path, sample_rate: int = 16000, hop: int = 256):
    """Stacked log-magnitude spectrograms of ``(T, K)`` arrays."""
    n = len(specs)
    fig, axes = plt.subplots(n, 1, figsize=(6.4, 2.2 * n), sharex=True, squeeze=False)
    vmax = max(20 * np.log10(np.max(np.abs(s)) + 1e-12) for s in specs.values())
    for ax, (name, s) in zip(axes[:, 0], specs.items()):
        db = 20 * np.log10(np.abs(s).T + 1e-12)
        t_end = s.shape[0] * hop / sample_rate
        im = ax.imshow(db, origin="lower", aspect="auto", cmap="magma",
                       vmin=vmax - 80, vmax=vmax,
                       extent=(0, t_end, 0, sample_rate / 2000.0))
        ax.set_ylabel("kHz")
        ax.set_title(name, fontsize=9, loc="left")
    axes[-1, 0].set_xlabel("time [s]")
    fig.colorbar(im, ax=axes[:, 0].tolist(), label="dB", shrink=0.8)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
