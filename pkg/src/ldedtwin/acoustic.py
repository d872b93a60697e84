"""Frame-level acoustic features of the process microphone signal.

Spectral descriptors operate on the last axis, so a single spectrum and a
(frames, bins) stack go through the same code.  Undefined descriptors
(all-zero spectrum) come back as NaN and the frame is flagged invalid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal
from scipy.fft import dct

from .session import AUDIO_HZ, check_timestamps, fmt

N_MFCC = 20
LOG_FLOOR = 1e-10
GATE_ATTENUATION_DB = 20.0


@dataclass(frozen=True)
class AcousticConfig:
    frame_size: int = 2048
    hop: int = 512
    rolloff: float = 0.85
    window: str = "hann"
    denoise: bool = True
    gate_k: float = 1.5

    def __post_init__(self):
        if self.frame_size < 2 or not 1 <= self.hop <= self.frame_size:
            raise ValueError(f"invalid frame_size/hop {self.frame_size}/{self.hop}")
        if not 0 < self.rolloff <= 1:
            raise ValueError("rolloff must be in (0, 1]")
        if self.window not in ("hann", "none"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.gate_k < 0:
            raise ValueError("gate_k must be >= 0")


@dataclass(frozen=True)
class AcousticFeatures:
    t: float
    ae: float = math.nan
    sc: float = math.nan
    sbw: float = math.nan
    sr: float = math.nan
    mfcc: tuple = (math.nan,) * N_MFCC
    valid: bool = False

    def channels(self) -> tuple:
        return (self.ae, self.sc, self.sbw, self.sr, *self.mfcc)


# ---------------------------------------------------------------------------
# denoising


def denoise_spectral_gate(x, noise_profile, k: float = 1.5, rate: int = AUDIO_HZ,
                          nperseg: int = 2048, hop: int = 512, smooth=(5, 5)):
    """Attenuate time-frequency bins that look like the noise profile.

    Per frequency bin the gate threshold is mean + k * std of the noise
    profile's STFT magnitude.  Decisions use the signal magnitude averaged
    over a ``smooth`` = (bins, frames) neighborhood, so isolated noise peaks
    do not open the gate.  Gated bins are scaled by -20 dB and the signal is
    rebuilt by overlap-add at the input length.
    """
    x = np.asarray(x, dtype=float)
    noise_profile = np.asarray(noise_profile, dtype=float)
    if len(noise_profile) < 0.5 * rate:
        raise ValueError(
            f"noise profile is {len(noise_profile) / rate:.3f} s, need >= 0.5 s"
        )
    if x.size == 0:
        return x.copy()
    kw = dict(fs=rate, window="hann", nperseg=nperseg, noverlap=nperseg - hop)
    _, _, noise_spec = signal.stft(noise_profile, **kw)
    nmag = np.abs(noise_spec)
    thresh = nmag.mean(axis=1) + k * nmag.std(axis=1)
    _, _, spec = signal.stft(x, **kw)
    level = ndimage.uniform_filter(np.abs(spec), size=smooth, mode="nearest")
    gain = np.where(level > thresh[:, None], 1.0, 10 ** (-GATE_ATTENUATION_DB / 20))
    _, y = signal.istft(spec * gain, **kw)
    out = np.zeros_like(x)
    n = min(len(x), len(y))
    out[:n] = y[:n]
    return out


# ---------------------------------------------------------------------------
# framing and spectra


def frame_signal(x, frame_size: int = 2048, hop: int = 512) -> tuple:
    """Split into ceil(len/hop) frames starting at k*hop, zero-padded at the end.

    Returns (starts, frames) with frames shaped (n, frame_size).
    """
    if frame_size < 2 or not 1 <= hop <= frame_size:
        raise ValueError(f"invalid frame_size/hop {frame_size}/{hop}")
    x = np.asarray(x, dtype=float)
    n = -(-len(x) // hop)
    starts = np.arange(n) * hop
    padded = np.zeros(n * hop + frame_size)
    padded[: len(x)] = x
    idx = starts[:, None] + np.arange(frame_size)[None, :]
    return starts, padded[idx]


def frame_times(starts, frame_size: int = 2048, rate: int = AUDIO_HZ) -> np.ndarray:
    return (np.asarray(starts, dtype=float) + frame_size / 2) / rate


def amplitude_envelope(frame):
    return np.max(np.abs(np.asarray(frame, dtype=float)), axis=-1)


def _window(n, kind):
    if kind == "hann":
        return signal.get_window("hann", n)
    if kind == "none":
        return np.ones(n)
    raise ValueError(f"unknown window {kind!r}")


def magnitude_spectrum(frame, window: str = "hann", rate: int = AUDIO_HZ) -> tuple:
    """One-sided |DFT| for bins 0..N/2 and their frequencies."""
    frame = np.asarray(frame, dtype=float)
    n = frame.shape[-1]
    mags = np.abs(np.fft.rfft(frame * _window(n, window), axis=-1))
    freqs = np.arange(n // 2 + 1) * rate / n
    return freqs, mags


def spectral_centroid(freqs, mags):
    mags = np.asarray(mags, dtype=float)
    total = mags.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (mags * freqs).sum(axis=-1) / total
    return np.where(total > 0, out, np.nan)


def spectral_bandwidth(freqs, mags, sc=None):
    mags = np.asarray(mags, dtype=float)
    if sc is None:
        sc = spectral_centroid(freqs, mags)
    total = mags.sum(axis=-1)
    dev = np.asarray(freqs)[None, :] - np.atleast_1d(sc)[:, None] if mags.ndim == 2 else freqs - sc
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt((mags * dev**2).sum(axis=-1) / total)
    return np.where(total > 0, out, np.nan)


def spectral_rolloff(freqs, mags, pct: float = 0.85):
    """Smallest frequency whose cumulative energy reaches ``pct`` of the total."""
    if not 0 < pct <= 1:
        raise ValueError("pct must be in (0, 1]")
    energy = np.asarray(mags, dtype=float) ** 2
    cum = np.cumsum(energy, axis=-1)
    total = cum[..., -1:]
    idx = np.argmax(cum >= pct * total, axis=-1)
    out = np.asarray(freqs)[idx]
    return np.where(total[..., 0] > 0, out, np.nan)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, rate: int = AUDIO_HZ,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters (unit peak) equally spaced on the mel axis."""
    fmax = rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    bank = np.zeros((n_filters, len(freqs)))
    for i in range(n_filters):
        lo, mid, hi = edges[i : i + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        bank[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return bank


_BANK_CACHE: dict = {}


def mfcc(frame, n_mfcc: int = N_MFCC, rate: int = AUDIO_HZ):
    """Mel cepstrum: Hann -> power -> mel bands -> log -> orthonormal DCT-II."""
    frame = np.asarray(frame, dtype=float)
    n = frame.shape[-1]
    key = (n_mfcc, n, rate)
    if key not in _BANK_CACHE:
        _BANK_CACHE[key] = mel_filterbank(n_mfcc, n, rate)
    power = np.abs(np.fft.rfft(frame * _window(n, "hann"), axis=-1)) ** 2
    bands = power @ _BANK_CACHE[key].T
    return dct(np.log(np.maximum(bands, LOG_FLOOR)), type=2, norm="ortho", axis=-1)


# ---------------------------------------------------------------------------
# series


def extract_acoustic_features(x, rate: int = AUDIO_HZ, config: AcousticConfig | None = None,
                              chunk: int = 512) -> list:
    """Per-frame features of an (already denoised, if desired) signal."""
    config = config or AcousticConfig()
    x = np.asarray(x, dtype=float)
    n_frames = -(-len(x) // config.hop)
    out = []
    for c0 in range(0, n_frames, chunk):
        c1 = min(n_frames, c0 + chunk)
        seg_start = c0 * config.hop
        seg = x[seg_start : seg_start + (c1 - c0 - 1) * config.hop + config.frame_size]
        starts, frames = frame_signal(seg, config.frame_size, config.hop)
        starts, frames = starts[: c1 - c0] + seg_start, frames[: c1 - c0]
        t = frame_times(starts, config.frame_size, rate)
        ae = amplitude_envelope(frames)
        freqs, mags = magnitude_spectrum(frames, config.window, rate)
        sc = spectral_centroid(freqs, mags)
        sbw = spectral_bandwidth(freqs, mags, sc)
        sr = spectral_rolloff(freqs, mags, config.rolloff)
        cc = mfcc(frames, N_MFCC, rate)
        for i in range(len(t)):
            if np.isfinite(sc[i]):
                out.append(AcousticFeatures(float(t[i]), float(ae[i]), float(sc[i]), float(sbw[i]),
                                            float(sr[i]), tuple(float(v) for v in cc[i]), True))
            else:
                out.append(AcousticFeatures(float(t[i])))
    return out


def noise_interval(robot_t, laser_on, min_duration: float = 0.5):
    """Longest laser-off interval (start, end) in seconds, or None if too short."""
    t = np.asarray(robot_t, dtype=float)
    off = ~np.asarray(laser_on, dtype=bool)
    best = None
    i = 0
    while i < len(t):
        if off[i]:
            j = i
            while j + 1 < len(t) and off[j + 1]:
                j += 1
            if best is None or t[j] - t[i] > best[1] - best[0]:
                best = (float(t[i]), float(t[j]))
            i = j + 1
        else:
            i += 1
    if best is None or best[1] - best[0] < min_duration:
        return None
    return best


CSV_HEADER = ["t", "ae", "sc", "sbw", "sr"] + [f"mfcc{i:02d}" for i in range(N_MFCC)]


def write_features_csv(features, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for f in features:
            if f.valid:
                w.writerow([fmt(f.t)] + [fmt(v) for v in f.channels()])
            else:
                w.writerow([fmt(f.t)] + [""] * (len(CSV_HEADER) - 1))


def read_features_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for row in reader:
            if not row:
                continue
            t = float(row[0])
            if row[1] == "":
                out.append(AcousticFeatures(t))
                continue
            v = [float(s) for s in row[1:]]
            out.append(AcousticFeatures(t, v[0], v[1], v[2], v[3], tuple(v[4:]), True))
    check_timestamps([f.t for f in out], "acoustic_features")
    return out
