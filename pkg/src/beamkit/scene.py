"""Synthetic anechoic scenes with exact ground truth.

Sources are far-field plane waves on a uniform linear array; propagation is
a pure (fractional) delay applied in the frequency domain, so the true
steering vector of every bin is known in closed form.  Diffuse noise is a sum
of independent plane waves spread uniformly in ``sin(doa)``.

Scene files are INI-style::

    [scene]
    seed = 3
    duration = 4.0
    snr_db = 5

    [array]
    n_mics = 4
    spacing = 0.05

    [source.0]
    generator = speechlike      ; or: signal = path/to/file.wav
    doa = 20
    moves = 120:-40             ; frame:doa pairs, comma separated

    [noise]
    diffuse = 1.0
    point = 60:-6               ; doa:relative_level_db pairs
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BeamkitError, ConfigError
from .stft import StftConfig, read_wav, stft

__all__ = [
    "SOUND_SPEED",
    "ArrayGeometry",
    "SourceSpec",
    "NoiseSpec",
    "SceneSpec",
    "SceneTruth",
    "far_field_steering",
    "steering_field",
    "speechlike",
    "synthesize",
    "oracle_mask",
    "active_bins",
    "active_samples",
    "si_sdr",
    "segmental_snr",
    "measure_snr",
    "metrics",
    "load_scene_spec",
]

SOUND_SPEED = 343.0
SI_SDR_CAP = 60.0


@dataclass(frozen=True)
class ArrayGeometry:
    n_mics: int = 4
    spacing: float = 0.05

    def __post_init__(self):
        if self.n_mics < 2:
            raise ConfigError("array needs at least 2 microphones")
        if self.spacing <= 0:
            raise ConfigError("mic spacing must be positive")

    @property
    def positions(self) -> np.ndarray:
        """Mic offsets along the array axis, relative to mic 1 (meters)."""
        return np.arange(self.n_mics) * self.spacing


@dataclass
class SourceSpec:
    doa: float = 0.0
    generator: str = "speechlike"
    signal: str | None = None
    level_db: float = 0.0
    onset: int = 0
    offset: int | None = None
    moves: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        frames = [f for f, _ in self.moves]
        if any(b <= a for a, b in zip(frames, frames[1:])) or any(f <= 0 for f in frames):
            raise ConfigError("move events must be strictly increasing positive frames")
        for d in [self.doa] + [d for _, d in self.moves]:
            if abs(d) > 90:
                raise ConfigError(f"doa {d} outside [-90, 90]")


@dataclass
class NoiseSpec:
    diffuse: float = 1.0
    n_directions: int = 36
    point: list[tuple[float, float]] = field(default_factory=list)
    generator: str = "pink"
    sensor_db: float = -30.0

    def __post_init__(self):
        if self.diffuse < 0 or not math.isfinite(self.diffuse):
            raise ConfigError("diffuse noise level must be finite and >= 0")


@dataclass
class SceneSpec:
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    sources: list[SourceSpec] = field(default_factory=lambda: [SourceSpec()])
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    snr_db: float = 0.0
    duration: float = 4.0
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)
    level_dbfs: float = -26.0

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ConfigError("snr_db must be finite")
        if not self.sources:
            raise ConfigError("scene needs at least one source")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.stft.sample_rate))


@dataclass
class SceneTruth:
    target: np.ndarray
    noise: np.ndarray
    segments: list[dict]
    move_frames: list[int]
    snr_db: float
    config: StftConfig

    @property
    def mixture(self) -> np.ndarray:
        return self.target + self.noise

    def steering_at(self, frame: int) -> np.ndarray:
        """True ``(K, M)`` steering of the target at ``frame``."""
        current = self.segments[0]
        for seg in self.segments:
            if seg["start_frame"] <= frame:
                current = seg
        return current["h"]


# -- geometry -------------------------------------------------------------

def far_field_steering(geometry: ArrayGeometry, doa: float, k: int,
                       cfg: StftConfig | None = None) -> np.ndarray:
    """Unit-norm plane-wave steering vector of bin ``k``, phase-aligned to mic 1."""
    if abs(doa) > 90:
        raise ConfigError(f"doa {doa} outside [-90, 90]")
    cfg = cfg or StftConfig()
    f = k * cfg.sample_rate / cfg.window_len
    delay = geometry.positions * math.sin(math.radians(doa)) / SOUND_SPEED
    return np.exp(-2j * np.pi * f * delay) / math.sqrt(geometry.n_mics)


def steering_field(geometry: ArrayGeometry, doa: float, cfg: StftConfig | None = None):
    cfg = cfg or StftConfig()
    return np.stack([far_field_steering(geometry, doa, k, cfg) for k in range(cfg.n_bins)])


def _delay(sig: np.ndarray, delays_s: np.ndarray, rate: int) -> np.ndarray:
    """Delay a mono signal by each of ``delays_s`` (fractional, FFT-based)."""
    n = sig.size
    pad = int(np.ceil(np.max(np.abs(delays_s)) * rate)) + 64
    nfft = int(2 ** np.ceil(np.log2(n + 2 * pad)))
    spec = np.fft.rfft(sig, nfft)
    f = np.fft.rfftfreq(nfft, 1.0 / rate)
    out = np.fft.irfft(spec[None] * np.exp(-2j * np.pi * f[None] * delays_s[:, None]), nfft)
    # negative delays wrap to the end of the buffer; unwrap by rolling
    return np.concatenate([out[:, nfft - pad:], out[:, :n]], axis=1)[:, pad:pad + n]


# -- generators -----------------------------------------------------------

def pink_noise(n: int, rng: np.random.Generator, rate: int = 16000,
               f_low: float = 100.0) -> np.ndarray:
    """1/f noise with a second-order roll-off below ``f_low``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[1:] /= np.sqrt(f[1:])
    spec[1:] *= 1.0 / (1.0 + (f_low / f[1:]) ** 2)
    spec[0] = 0
    x = np.fft.irfft(spec, n)
    return x / np.std(x)


def speechlike(n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    """Syllabic speech surrogate with pauses: voiced harmonic segments under
    random formants and a spectral tilt, plus high-passed fricative bursts.
    Sparse and non-stationary in the t-f plane, which is all the source
    models need."""
    out = np.zeros(n)
    nyq = rate / 2
    pos = int(0.1 * rate * rng.uniform())
    while pos < n:
        dur = int(rate * rng.uniform(0.12, 0.35))
        seg = min(dur, n - pos)
        tt = np.arange(seg) / rate
        if rng.uniform() < 0.25:
            # fricative: noise shaped towards the upper band
            spec = np.fft.rfft(rng.standard_normal(seg))
            f = np.fft.rfftfreq(seg, 1.0 / rate)
            lo = rng.uniform(2000, 4000)
            spec *= 1.0 / (1.0 + (lo / np.maximum(f, 1.0)) ** 4)
            piece = np.fft.irfft(spec, seg)
            piece *= 0.5 / max(np.std(piece), 1e-12)
        else:
            f0 = rng.uniform(100, 220) * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(2, 5) * tt))
            phase = 2 * np.pi * np.cumsum(f0) / rate
            formants = rng.uniform([300, 900, 2000, 3300], [900, 2200, 3200, 4500])
            piece = np.zeros(seg)
            for h in range(1, int(0.95 * nyq / f0.max())):
                fh = h * f0.mean()
                amp = sum(np.exp(-0.5 * ((fh - fm) / (80.0 + 0.05 * fm)) ** 2)
                          for fm in formants) + 0.02
                piece += amp * (fh / 500.0) ** -0.5 * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
            piece /= max(np.std(piece), 1e-12)
        env = np.sin(np.pi * np.arange(seg) / max(seg - 1, 1)) ** 2
        out[pos:pos + seg] = piece * env * rng.uniform(0.3, 1.0)
        pos += dur + int(rate * rng.exponential(0.12))
    return out / max(np.std(out), 1e-12)


def _generate(name: str, n: int, rate: int, rng) -> np.ndarray:
    if name == "speechlike":
        return speechlike(n, rate, rng)
    if name == "white":
        return rng.standard_normal(n)
    if name == "pink":
        return pink_noise(n, rng, rate)
    raise ConfigError(f"unknown generator {name!r}")


def _source_signal(src: SourceSpec, n: int, rate: int, rng) -> np.ndarray:
    if src.signal is not None:
        try:
            data, _ = read_wav(src.signal, expected_rate=rate)
        except (OSError, ValueError) as exc:
            raise BeamkitError(f"cannot read source audio {src.signal}: {exc}") from exc
        sig = np.zeros(n)
        sig[:min(n, data.shape[1])] = data[0, :n]
    else:
        sig = _generate(src.generator, n, rate, rng)
    return sig * 10 ** (src.level_db / 20)


# -- synthesis ------------------------------------------------------------

def active_samples(ref: np.ndarray, rate: int = 16000, threshold_db: float = -40.0) -> np.ndarray:
    """Boolean activity of ``ref`` from 10 ms frame energies above
    ``threshold_db`` relative to the loudest frame."""
    frame = max(1, rate // 100)
    n = ref.size
    nf = -(-n // frame)
    padded = np.zeros(nf * frame)
    padded[:n] = ref
    energy = np.sum(padded.reshape(nf, frame) ** 2, axis=1)
    if energy.max() <= 0:
        return np.zeros(n, bool)
    act = energy > energy.max() * 10 ** (threshold_db / 10)
    return np.repeat(act, frame)[:n]


def measure_snr(target_ref: np.ndarray, noise_ref: np.ndarray, rate: int = 16000) -> float:
    """SNR in dB over the target-active samples of one channel."""
    act = active_samples(target_ref, rate)
    ps = float(np.sum(target_ref[act] ** 2))
    pn = float(np.sum(noise_ref[act] ** 2))
    if pn == 0:
        return math.inf
    if ps == 0:
        return -math.inf
    return 10 * math.log10(ps / pn)


def synthesize(spec: SceneSpec) -> tuple[np.ndarray, SceneTruth]:
    """Render ``spec``; returns ``(mixture (M, N), truth)``.

    Only ``sources[0]`` is the target; further sources count as interference
    in the noise image.  The noise image is scaled so the channel-1 SNR over
    target-active samples equals ``snr_db`` (no noise at all gives +inf).
    """
    cfg = spec.stft
    rate, n, geo = cfg.sample_rate, spec.n_samples, spec.geometry
    rng = np.random.default_rng(spec.seed)
    pos = geo.positions
    images = []
    segments = []
    for si, src in enumerate(spec.sources):
        sig = _source_signal(src, n, rate, rng)
        start = src.onset * cfg.hop
        stop = n if src.offset is None else min(n, src.offset * cfg.hop)
        gate = np.zeros(n)
        gate[start:stop] = 1.0
        sig = sig * gate
        bounds = [0] + [f * cfg.hop for f, _ in src.moves] + [n]
        doas = [src.doa] + [d for _, d in src.moves]
        img = np.zeros((geo.n_mics, n))
        for seg_i, doa in enumerate(doas):
            piece = np.zeros(n)
            lo, hi = min(bounds[seg_i], n), min(bounds[seg_i + 1], n)
            piece[lo:hi] = sig[lo:hi]
            delays = pos * math.sin(math.radians(doa)) / SOUND_SPEED
            img += _delay(piece, delays, rate)
            if si == 0:
                segments.append({"start_frame": (bounds[seg_i] + cfg.window_len // 2) // cfg.hop
                                 if seg_i else 0,
                                 "move_frame": 0 if seg_i == 0 else src.moves[seg_i - 1][0],
                                 "doa": doa,
                                 "h": steering_field(geo, doa, cfg)})
        images.append(img)
    target = images[0]
    interference = sum(images[1:], np.zeros_like(target))

    noise = np.zeros_like(target)
    nz = spec.noise
    if nz.diffuse > 0:
        s = rng.uniform(-1, 1, nz.n_directions)
        for sd in s:
            base = _generate(nz.generator, n, rate, rng)
            noise += _delay(base, pos * sd / SOUND_SPEED, rate)
        noise *= math.sqrt(nz.diffuse / nz.n_directions)
    for doa, level in nz.point:
        base = _generate(nz.generator, n, rate, rng) * 10 ** (level / 20)
        noise += _delay(base, pos * math.sin(math.radians(doa)) / SOUND_SPEED, rate)
    if np.any(noise) and math.isfinite(nz.sensor_db):
        # uncorrelated self-noise, relative to the spatial noise power
        ref_pow = float(np.mean(noise ** 2))
        noise += rng.standard_normal(noise.shape) * math.sqrt(ref_pow * 10 ** (nz.sensor_db / 10))
    noise = noise + interference

    if np.any(noise):
        raw = measure_snr(target[0], noise[0], rate)
        noise *= 10 ** ((raw - spec.snr_db) / 20)
        snr = measure_snr(target[0], noise[0], rate)
    else:
        snr = math.inf
    # place the target at a recording-like level (RMS over active samples)
    act = active_samples(target[0], rate)
    if np.any(act):
        gain = 10 ** (spec.level_dbfs / 20) / math.sqrt(float(np.mean(target[0][act] ** 2)))
        target = target * gain
        noise = noise * gain
    truth = SceneTruth(target, noise, segments,
                       [m for m, _ in spec.sources[0].moves], snr, cfg)
    return target + noise, truth


def oracle_mask(truth: SceneTruth, cfg: StftConfig | None = None, ref: int = 0) -> np.ndarray:
    """Ideal ratio mask ``|S|^2 / (|S|^2 + |N|^2)`` on the reference channel."""
    cfg = cfg or truth.config
    s = np.abs(stft(truth.target[ref], cfg).data[0]) ** 2
    nn = np.abs(stft(truth.noise[ref], cfg).data[0]) ** 2
    tot = s + nn
    return np.divide(s, tot, out=np.zeros_like(s), where=tot > 0)


# -- metrics --------------------------------------------------------------

def si_sdr(est: np.ndarray, ref: np.ndarray, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB, capped at ``cap``."""
    est = np.asarray(est, float)
    ref = np.asarray(ref, float)
    if est.shape != ref.shape:
        raise BeamkitError(f"length mismatch: {est.shape} vs {ref.shape}")
    rr = float(ref @ ref)
    if rr == 0:
        raise BeamkitError("reference signal is silent")
    proj = (est @ ref) / rr * ref
    err = est - proj
    pe = float(err @ err)
    pp = float(proj @ proj)
    if pe <= pp * 10 ** (-cap / 10):
        return cap
    return min(cap, 10 * math.log10(pp / pe))


def segmental_snr(est: np.ndarray, ref: np.ndarray, frame: int = 256,
                  lo: float = -10.0, hi: float = 35.0) -> float:
    """Mean per-frame SNR (clamped to ``[lo, hi]`` dB) over frames where the
    reference is not silent."""
    est = np.asarray(est, float)
    ref = np.asarray(ref, float)
    if est.shape != ref.shape:
        raise BeamkitError(f"length mismatch: {est.shape} vs {ref.shape}")
    nf = ref.size // frame
    r = ref[:nf * frame].reshape(nf, frame)
    e = est[:nf * frame].reshape(nf, frame)
    ps = np.sum(r ** 2, axis=1)
    pe = np.sum((r - e) ** 2, axis=1)
    keep = ps > 0
    if not np.any(keep):
        raise BeamkitError("reference signal is silent")
    with np.errstate(divide="ignore"):
        seg = 10 * np.log10(ps[keep] / np.maximum(pe[keep], 1e-20))
    return float(np.mean(np.clip(seg, lo, hi)))


def active_bins(truth: SceneTruth, threshold_db: float = -30.0, cfg=None) -> np.ndarray:
    """Bins whose reference-channel target energy is within ``threshold_db`` of
    the strongest bin (DC excluded)."""
    cfg = cfg or truth.config
    e = np.sum(np.abs(stft(truth.target[0], cfg).data[0]) ** 2, axis=0)
    act = e > e.max() * 10 ** (threshold_db / 10)
    act[0] = False
    return act


def metrics(est: np.ndarray, truth: SceneTruth, h_est: np.ndarray | None = None,
            ref: int = 0, frame: int | None = None) -> dict:
    """SI-SDR and segmental SNR of a mono estimate against the reference-channel
    target image; mean steering cosine over active bins when ``h_est`` is given."""
    est = np.ravel(est)
    clean = truth.target[ref]
    out = {"si_sdr_db": si_sdr(est, clean), "seg_snr_db": segmental_snr(est, clean)}
    out["si_sdr_input_db"] = si_sdr(truth.mixture[ref], clean)
    out["si_sdr_improvement_db"] = out["si_sdr_db"] - out["si_sdr_input_db"]
    if h_est is not None:
        from .sve import steering_cosine
        h_true = truth.steering_at(frame if frame is not None else 10 ** 9)
        cos = steering_cosine(h_est, h_true)
        out["sve_cosine"] = cos
        out["sve_cosine_mean"] = float(np.mean(cos[active_bins(truth)]))
    return out


# -- scene files ----------------------------------------------------------

def _pairs(text: str, types=(float, float)) -> list:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        a, b = item.split(":")
        out.append((types[0](a), types[1](b)))
    return out


def load_scene_spec(path) -> SceneSpec:
    """Parse an INI scene file (see the module docstring)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read scene spec {path}: {exc}") from exc
    base = Path(path).parent
    sc = cp["scene"] if cp.has_section("scene") else {}
    ar = cp["array"] if cp.has_section("array") else {}
    try:
        stft_cfg = StftConfig(
            window_len=int(sc.get("window_len", 1024)),
            hop=int(sc.get("hop", 256)),
            sample_rate=int(sc.get("sample_rate", 16000)),
        )
        geo = ArrayGeometry(int(ar.get("n_mics", 4)), float(ar.get("spacing", 0.05)))
        sources = []
        for name in sorted(s for s in cp.sections() if s.startswith("source")):
            s = cp[name]
            signal = s.get("signal")
            if signal is not None and not Path(signal).is_absolute():
                signal = str(base / signal)
            sources.append(SourceSpec(
                doa=float(s.get("doa", 0.0)),
                generator=s.get("generator", "speechlike"),
                signal=signal,
                level_db=float(s.get("level_db", 0.0)),
                onset=int(s.get("onset", 0)),
                offset=int(s["offset"]) if "offset" in s else None,
                moves=_pairs(s.get("moves", ""), (int, float)),
            ))
        nz = cp["noise"] if cp.has_section("noise") else {}
        noise = NoiseSpec(
            diffuse=float(nz.get("diffuse", 1.0)),
            n_directions=int(nz.get("n_directions", 36)),
            point=_pairs(nz.get("point", "")),
            generator=nz.get("generator", "pink"),
            sensor_db=float(nz.get("sensor_db", -30.0)),
        )
        return SceneSpec(geo, sources or [SourceSpec()], noise,
                         snr_db=float(sc.get("snr_db", 0.0)),
                         duration=float(sc.get("duration", 4.0)),
                         seed=int(sc.get("seed", 0)), stft=stft_cfg,
                         level_dbfs=float(sc.get("level_dbfs", -26.0)))
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scene spec {path}: {exc}") from exc
