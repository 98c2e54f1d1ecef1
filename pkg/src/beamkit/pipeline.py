"""Run configuration and the simulate / enhance / eval drivers behind the CLI.

Run configs are flat ``key = value`` text with dotted keys and ``#`` comments::

    mode = online
    beamformer = MaskSMLDR
    sve = ica_hc
    input = mixture.wav
    mask = mask.bkm
    online.alpha_initial = 0.96
    model.phi0 = 1e6

Relative paths resolve against the config file's directory.  Omitted online
fields take the published online defaults.
"""

from __future__ import annotations

import configparser
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .beamformer import (
    accumulate_wscm,
    apply_filter,
    distortionless_filter,
    run_batch,
    to_reference,
)
from .errors import BeamkitError, ConfigError
from .ica import ConstraintMode, noise_metric, run_batch_ica
from .linalg import DEFAULT_LOADING, quad_form
from .maskio import read_mask, read_steering, write_mask, write_steering
from .models import BeamformerVariant, ModelParams, median_magnitude, target_weights
from .online import OnlineParams, run_online
from .scene import SceneTruth, active_bins, load_scene_spec, metrics, oracle_mask, synthesize
from .stft import Spectrogram, StftConfig, istft, read_wav, stft, write_wav
from .sve import (
    noise_scm_from_ratio,
    noise_scm_from_weights,
    scm_observations,
    subtract_and_extract,
)

__all__ = ["RunConfig", "load_run_config", "enhance", "simulate", "evaluate",
           "load_truth", "write_report"]

log = logging.getLogger(__name__)

SVE_CHOICES = ("fixed", "mask_only", "wscm", "ica_lc", "ica_pc", "ica_hc")
MODES = ("batch", "online")


@dataclass
class RunConfig:
    mode: str = "batch"
    beamformer: str = "MaskSMLDR"
    sve: str = "ica_hc"
    iters: int = 10
    a1: float = math.inf
    az: float = 1.0
    noise_model: str = "laplacian"
    seed: int = 0
    input: str | None = None
    mask: str | None = None
    steering: str | None = None
    truth: str | None = None
    out: str | None = None
    report: str | None = None
    figures: bool = True
    online: OnlineParams = field(default_factory=OnlineParams)
    model: ModelParams = field(default_factory=ModelParams)
    stft: StftConfig = field(default_factory=StftConfig)

    def validate(self) -> "RunConfig":
        """Check the cross-field invariants; raises :class:`ConfigError`."""
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sve not in SVE_CHOICES:
            raise ConfigError(f"sve must be one of {SVE_CHOICES}, got {self.sve!r}")
        try:
            variant = BeamformerVariant.parse(self.beamformer)
        except BeamkitError as exc:
            raise ConfigError(str(exc)) from None
        if self.sve == "fixed" and not self.steering:
            raise ConfigError("invariant violated: sve = fixed requires a steering file")
        if variant.needs_mask and not self.mask:
            raise ConfigError(f"invariant violated: beamformer {variant.value} "
                              "requires a mask file")
        if self.sve == "mask_only" and not self.mask:
            raise ConfigError("invariant violated: sve = mask_only requires a mask file")
        a1 = self.online.a1 if self.mode == "online" else self.a1
        if self.sve == "ica_pc" and not math.isfinite(a1):
            raise ConfigError("invariant violated: sve = ica_pc requires a finite a1")
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if self.noise_model not in ("laplacian", "gaussian"):
            raise ConfigError(f"unknown noise_model {self.noise_model!r}")
        if not self.input:
            raise ConfigError("no input wav given")
        return self


_TOP_KEYS = {f.name for f in fields(RunConfig)} - {"online", "model", "stft"}
_PATH_KEYS = ("input", "mask", "steering", "truth", "out", "report")


def _coerce(value: str, like, key: str):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(value)
    if isinstance(like, float) or like is None and key.endswith(("nu_after",)):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse a flat dotted-key config, then apply ``overrides`` (e.g. CLI flags)."""
    raw: dict[str, str] = {}
    base = Path(".")
    if path is not None:
        base = Path(path).parent
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       interpolation=None)
        cp.optionxform = str
        try:
            text = Path(path).read_text()
            cp.read_string("[run]\n" + text)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw.update(cp["run"])
    cfg = RunConfig()
    sub = {"online": {}, "model": {}, "stft": {}}
    top = {}
    for key, value in raw.items():
        group, _, name = key.partition(".")
        if name:
            if group not in sub:
                raise ConfigError(f"unknown config section {group!r} in key {key!r}")
            sub[group][name] = value
        elif key in _TOP_KEYS:
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        for key, value in top.items():
            val = _coerce(value, getattr(cfg, key), key)
            if key in _PATH_KEYS and val:
                p = Path(val)
                val = str(p if p.is_absolute() else base / p)
            setattr(cfg, key, val)
        for group, cls in (("online", OnlineParams), ("model", ModelParams),
                           ("stft", StftConfig)):
            current = getattr(cfg, group)
            names = {f.name for f in fields(cls)}
            kw = {}
            for name, value in sub[group].items():
                if name not in names:
                    raise ConfigError(f"unknown config key {group}.{name}")
                kw[name] = _coerce(value, getattr(current, name), f"{group}.{name}")
            setattr(cfg, group, replace(current, **kw))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    if cfg.mode == "online" and math.isfinite(cfg.a1) and not math.isfinite(cfg.online.a1):
        cfg.online = replace(cfg.online, a1=cfg.a1)
    if cfg.az != 1.0 and cfg.online.az == 1.0:
        cfg.online = replace(cfg.online, az=cfg.az)
    return cfg


# -- truth sidecars -------------------------------------------------------

def load_truth(manifest_path) -> SceneTruth:
    """Rebuild a :class:`SceneTruth` from a ``simulate`` output directory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        man = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise BeamkitError(f"cannot read manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    cfg = StftConfig(**man["stft"])
    target, _ = read_wav(base / man["files"]["target"], cfg.sample_rate)
    noise, _ = read_wav(base / man["files"]["noise"], cfg.sample_rate)
    segments = []
    for seg in man["segments"]:
        segments.append({"start_frame": seg["start_frame"], "move_frame": seg["move_frame"],
                         "doa": seg["doa"],
                         "h": read_steering(base / seg["steering"]).astype(complex)})
    snr = man["snr_db"]
    return SceneTruth(target, noise, segments, man["move_frames"],
                      math.inf if snr == "inf" else float(snr), cfg)


def simulate(spec_path, out_dir, seed: int | None = None) -> dict:
    """Synthesize a scene file into ``out_dir``; returns the manifest."""
    spec = load_scene_spec(spec_path)
    if seed is not None:
        spec = replace(spec, seed=seed)
    mix, truth = synthesize(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rate = spec.stft.sample_rate
    write_wav(out / "mixture.wav", mix, rate)
    write_wav(out / "target.wav", truth.target, rate)
    write_wav(out / "noise.wav", truth.noise, rate)
    write_mask(oracle_mask(truth), out / "mask.bkm")
    segs = []
    for i, seg in enumerate(truth.segments):
        name = f"steering_{i}.bkh"
        write_steering(seg["h"], out / name)
        segs.append({"start_frame": int(seg["start_frame"]), "move_frame": int(seg["move_frame"]),
                     "doa": float(seg["doa"]), "steering": name})
    manifest = {
        "seed": spec.seed,
        "snr_db": "inf" if math.isinf(truth.snr_db) else round(truth.snr_db, 6),
        "n_mics": spec.geometry.n_mics,
        "spacing": spec.geometry.spacing,
        "n_samples": spec.n_samples,
        "n_frames": spec.stft.n_frames(spec.n_samples),
        "stft": {"window_len": spec.stft.window_len, "hop": spec.stft.hop,
                 "sample_rate": rate},
        "move_frames": [int(m) for m in truth.move_frames],
        "segments": segs,
        "files": {"mixture": "mixture.wav", "target": "target.wav", "noise": "noise.wav",
                  "mask": "mask.bkm"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- enhancement ----------------------------------------------------------

class _Residuals:
    """Running per-bin maxima of the constraint residuals."""

    def __init__(self, n_bins):
        self.dist = np.zeros(n_bins)
        self.null = np.full(n_bins, np.nan)
        self.norm = np.full(n_bins, np.nan)

    def update(self, dist=None, null=None, norm=None):
        if dist is not None:
            self.dist = np.maximum(self.dist, dist)
        if null is not None:
            self.null = np.fmax(self.null, null)
        if norm is not None:
            self.norm = np.fmax(self.norm, norm)


def _dist_resid(w, h):
    return np.abs(np.einsum("km,km->k", w.conj(), h) - 1.0)


def _wscm_sve_batch(x, variant, mask, iters, params, h0, delta=DEFAULT_LOADING, callback=None):
    """Alternate wSCM-driven steering estimation and beamforming."""
    medmag = median_magnitude(x, params.excluded_channels) if variant.needs_mask else None
    r_x = scm_observations(x, mask)
    w = np.zeros_like(h0)
    w[:, 0] = 1.0
    h = h0
    for it in range(max(iters if variant.iterative else 1, 1)):
        phi = target_weights(variant, apply_filter(w, x), mask, medmag, params)
        h = subtract_and_extract(r_x, noise_scm_from_weights(x, phi, mask), 1.0, v0=h)
        w = distortionless_filter(accumulate_wscm(x, phi), h, delta)
        if callback is not None:
            callback(it, w, h)
    return w, h


def enhance(cfg: RunConfig) -> dict:
    """Run one enhancement job; writes the output wav and report if configured.

    Returns a summary dict with per-bin residual arrays, the final steering
    estimate, the enhanced signal and (with truth) metrics.
    """
    cfg.validate()
    t0 = time.perf_counter()
    variant = BeamformerVariant.parse(cfg.beamformer)
    sig, _ = read_wav(cfg.input, cfg.stft.sample_rate)
    spec = stft(sig, cfg.stft)
    x = spec.data
    n_ch, n_frames, n_bins = x.shape
    mask = None
    if cfg.mask:
        mask = read_mask(cfg.mask).astype(float)
        if mask.shape != (n_frames, n_bins):
            raise ConfigError(f"mask shape {mask.shape} does not match the input STFT "
                              f"{(n_frames, n_bins)}")
    h_fixed = None
    if cfg.steering:
        h_fixed = read_steering(cfg.steering).astype(complex)
        if h_fixed.shape != (n_bins, n_ch):
            raise ConfigError(f"steering shape {h_fixed.shape} does not match "
                              f"{(n_bins, n_ch)}")
    truth = load_truth(cfg.truth) if cfg.truth else None
    res = _Residuals(n_bins)
    h0 = h_fixed if h_fixed is not None else np.ones((n_bins, n_ch), complex)

    if cfg.mode == "batch":
        y, h = _enhance_batch(cfg, variant, x, mask, h_fixed, h0, res)
    else:
        y, h = _enhance_online(cfg, variant, x, mask, h_fixed, h0, res)

    est = istft(Spectrogram(y[None], cfg.stft, spec.n_samples), spec.n_samples)[0]
    runtime = time.perf_counter() - t0
    summary = {
        "mode": cfg.mode, "beamformer": variant.value, "sve": cfg.sve,
        "n_channels": n_ch, "n_frames": n_frames, "n_bins": n_bins,
        "max_distortionless": float(np.max(res.dist)),
        "max_null": float(np.nanmax(res.null)) if np.any(np.isfinite(res.null)) else None,
        "max_normalization": (float(np.nanmax(res.norm))
                              if np.any(np.isfinite(res.norm)) else None),
        "runtime_s": runtime,
        "residuals": res, "h": h, "signal": est, "Y": y,
    }
    if truth is not None:
        m = metrics(est, truth, h, frame=n_frames - 1)
        summary.update({k: v for k, v in m.items() if k != "sve_cosine"})
        summary["sve_cosine"] = m["sve_cosine"]
        summary["active_bins"] = active_bins(truth, cfg=cfg.stft)
    if cfg.out:
        write_wav(cfg.out, est, cfg.stft.sample_rate)
    if cfg.report:
        write_report(summary, cfg)
    return summary


def _enhance_batch(cfg, variant, x, mask, h_fixed, h0, res):
    params = cfg.model
    if cfg.sve.startswith("ica_"):
        mode = ConstraintMode.parse(cfg.sve)

        def cb(it, state, h, vz):
            w1 = state.row(0)
            res.update(dist=_dist_resid(w1, h))
            wn = state.W[:, 1:]
            if mode is ConstraintMode.LC:
                res.update(null=np.max(np.abs(np.einsum("kmi,ki->km", wn, h)), axis=1))
            metric = noise_metric(state, vz, h)
            q = np.stack([np.real(quad_form(metric, state.row(m)))
                          for m in range(1, state.n_channels)], axis=1)
            res.update(norm=np.max(np.abs(q - 1.0), axis=1))

        out, state, trace = run_batch_ica(
            x, variant, mask, mode=mode, a1=cfg.a1, az=cfg.az, iters=max(cfg.iters, 1),
            params=params, h_init=h0, noise_model=cfg.noise_model, callback=cb)
        return to_reference(out.Y, trace[-1]), trace[-1]
    if cfg.sve == "fixed":
        h = h_fixed
        w, y = run_batch(x, h, variant, mask, iters=cfg.iters, params=params,
                         callback=lambda it, w, y: res.update(dist=_dist_resid(w, h)))
        return to_reference(y, h), h
    if cfg.sve == "mask_only":
        h = subtract_and_extract(scm_observations(x), noise_scm_from_ratio(x, 1.0 - mask),
                                 1.0, v0=h0)
        w, y = run_batch(x, h, variant, mask, iters=cfg.iters, params=params,
                         callback=lambda it, w, y: res.update(dist=_dist_resid(w, h)))
        return to_reference(y, h), h
    # wscm
    w, h = _wscm_sve_batch(x, variant, mask, cfg.iters, params, h0,
                           callback=lambda it, w, h: res.update(dist=_dist_resid(w, h)))
    return to_reference(apply_filter(w, x), h), h


def _enhance_online(cfg, variant, x, mask, h_fixed, h0, res):
    p = cfg.online
    if cfg.sve == "ica_pc" and not math.isfinite(p.a1):
        p = replace(p, a1=cfg.a1)

    def cb(engine):
        w1 = engine.target_filter
        res.update(dist=_dist_resid(w1, engine.h))
        if engine.n_ch > 1 and engine.sve.startswith("ica_"):
            wn = engine.W[:, 1:]
            if engine.sve == "ica_lc":
                res.update(null=np.max(np.abs(np.einsum("kmi,ki->km", wn, engine.h)), axis=1))
                metric = engine.Vz
            else:
                hh = engine.h[:, :, None] * engine.h.conj()[:, None, :]
                metric = engine.Vz + engine.params.az * hh
            q = np.stack([np.real(quad_form(metric, engine.W[:, m].conj()))
                          for m in range(1, engine.n_ch)], axis=1)
            res.update(norm=np.max(np.abs(q - 1.0), axis=1))

    y, engine, trace = run_online(
        x, mask, callback=cb, variant=variant, sve=cfg.sve, params=p, model=cfg.model,
        h_init=h0, noise_model=cfg.noise_model)
    return to_reference(y, trace), engine.h


# -- reporting ------------------------------------------------------------

def _fmt(v):
    if v is None:
        return "na"
    if isinstance(v, float):
        return "na" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_report(summary: dict, cfg: RunConfig) -> dict:
    """Write ``<report>`` (key/value TSV), ``<stem>_bins.tsv`` (per-bin
    residuals and SVE cosine) and PNG figures next to it."""
    path = Path(cfg.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    keys = ["mode", "beamformer", "sve", "n_channels", "n_frames", "n_bins",
            "max_distortionless", "max_null", "max_normalization",
            "si_sdr_db", "si_sdr_input_db", "si_sdr_improvement_db", "seg_snr_db",
            "sve_cosine_mean", "runtime_s"]
    lines = ["key\tvalue"] + [f"{k}\t{_fmt(summary.get(k))}" for k in keys if k in summary
                              or k.startswith("max_")]
    path.write_text("\n".join(lines) + "\n")

    res = summary["residuals"]
    freqs = cfg.stft.bin_frequencies()
    cos = summary.get("sve_cosine")
    rows = ["bin\tfreq_hz\tdistortionless\tnull\tnormalization\tsve_cosine"]
    for k in range(len(freqs)):
        rows.append("\t".join([str(k), f"{freqs[k]:.3f}", _fmt(float(res.dist[k])),
                               _fmt(float(res.null[k])), _fmt(float(res.norm[k])),
                               _fmt(None if cos is None else float(cos[k]))]))
    bins_path = Path(f"{stem}_bins.tsv")
    bins_path.write_text("\n".join(rows) + "\n")
    files = {"report": str(path), "bins": str(bins_path)}
    if cfg.figures:
        from . import plotting

        curves = {"|w1^H h - 1|": res.dist}
        if np.any(np.isfinite(res.null)):
            curves["max |w_m^H h|"] = res.null
        if np.any(np.isfinite(res.norm)):
            curves["|w_m^H H w_m - 1|"] = res.norm
        files["residuals_png"] = str(plotting.plot_residuals(freqs, curves, f"{stem}_residuals.png"))
        if cos is not None:
            files["sve_png"] = str(plotting.plot_sve_cosine(freqs, cos, f"{stem}_sve.png",
                                                            summary.get("active_bins")))
        files["spec_png"] = str(plotting.plot_spectrograms({"enhanced": summary["Y"]},
                                                           f"{stem}_spec.png",
                                                           cfg.stft.sample_rate, cfg.stft.hop))
    return files


# -- evaluation -----------------------------------------------------------

def evaluate(est_path, manifest_path, steering_path=None, ref: int = 0) -> dict:
    """Metrics of an enhanced wav against a simulated scene's truth."""
    truth = load_truth(manifest_path)
    est, _ = read_wav(est_path, truth.config.sample_rate)
    if est.shape[1] != truth.target.shape[1]:
        raise BeamkitError(f"length mismatch: estimate has {est.shape[1]} samples, "
                           f"truth {truth.target.shape[1]}")
    h = read_steering(steering_path).astype(complex) if steering_path else None
    m = metrics(est[0], truth, h, ref=ref)
    m.pop("sve_cosine", None)
    return m
