"""Audio-based temporal synchronization.

Each camera's soundtrack is summarized by MFCC frames; the lag of a
camera against the reference camera is the offset maximizing the
normalized cross-correlation of the two mean-centered MFCC sequences.
A positive lag means the other track's content is delayed with respect
to the reference (track[s] matches reference[s - lag * sample_rate]).

The feasibility report answers when audio alone reaches subframe
accuracy: the analysis resolution contributes H / (2 fs) and the
microphone geometry |d1 - d2| / c; their sum must stay below a frame
period 1 / fr.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import fftconvolve

from .errors import AmbiguousPeak, TrackTooShort

SPEED_OF_SOUND = 343.0  # m/s, dry air at ~20 C

__all__ = [
    "AudioTrack",
    "MfccParams",
    "SyncResult",
    "compute_mfcc",
    "estimate_lag",
    "subframe_feasibility",
    "synchronize",
    "load_wav",
]


@dataclass(frozen=True)
class AudioTrack:
    """Mono audio samples in [-1, 1] with their sample rate."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).reshape(-1)
        if s.size == 0:
            raise ValueError("empty audio track")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MfccParams:
    window_size: int = 2048
    hop_length: int = 128
    n_mels: int = 64
    n_coeffs: int = 20

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_size:
            raise ValueError("need 0 < hop_length <= window_size")
        if self.n_coeffs > self.n_mels:
            raise ValueError("n_coeffs cannot exceed n_mels")


@dataclass
class SyncResult:
    """Per-camera lags in seconds; the reference camera's lag is exactly 0."""

    reference: str
    lags: dict[str, float]
    correlation_peaks: dict[str, float] = field(default_factory=dict)


def load_wav(path: str | Path) -> AudioTrack:
    """Read a PCM16 or float32 WAV file; stereo is averaged to mono."""
    with wave.open(str(path), "rb") as wf:
        n_channels = wf.getnchannels()
        sampwidth = wf.getsampwidth()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    if sampwidth == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0
    elif sampwidth == 4:
        # WAVE_FORMAT_IEEE_FLOAT is stored as 4-byte floats
        data = np.frombuffer(raw, dtype="<f4").astype(float)
    else:
        raise ValueError(f"unsupported WAV sample width {sampwidth}")
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioTrack(data, float(rate))


def save_wav(path: str | Path, track: AudioTrack) -> None:
    pcm = np.clip(track.samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(round(track.sample_rate)))
        wf.writeframes(pcm.tobytes())


def _mel_from_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def _hz_from_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: float) -> np.ndarray:
    """Triangular mel filters (n_mels, n_fft // 2 + 1), 50% overlap."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _hz_from_mel(np.linspace(0.0, _mel_from_hz(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


_LOG_FLOOR = 1e-10


def compute_mfcc(track: AudioTrack, params: MfccParams = MfccParams()) -> np.ndarray:
    """MFCC matrix (n_frames, n_coeffs).

    Frame t covers samples [t * hop, t * hop + window); there is no
    padding, so n_frames = floor((n_samples - window) / hop) + 1. The
    chain is Hann-windowed STFT power, mel filterbank, log with a fixed
    floor, then an orthonormal DCT-II truncated to n_coeffs.
    """
    s = track.samples
    win, hop = params.window_size, params.hop_length
    if s.size < win:
        raise TrackTooShort(f"track has {s.size} samples, window is {win}")
    n_frames = (s.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = s[idx] * np.hanning(win)[None, :]
    power = np.abs(rfft(frames, axis=1)) ** 2
    bank = _mel_filterbank(params.n_mels, win, track.sample_rate)
    energies = power @ bank.T
    log_e = np.log(np.maximum(energies, _LOG_FLOOR))
    return dct(log_e, type=2, norm="ortho", axis=1)[:, : params.n_coeffs]


def estimate_lag(
    mfcc_ref: np.ndarray,
    mfcc_other: np.ndarray,
    params: MfccParams,
    sample_rate: float,
    ambiguity_ratio: float = 0.01,
    peak_exclusion: int = 3,
) -> tuple[float, float]:
    """Lag of `other` against `ref` in seconds, plus the peak score.

    Both matrices are mean-centered per coefficient, cross-correlated over
    frame offsets and normalized so the score lies in [-1, 1]. Raises
    AmbiguousPeak when the second-best peak (outside a `peak_exclusion`
    frame neighborhood of the best) comes within `ambiguity_ratio` of the
    best peak height, or when the best peak does not stand out of the
    correlation noise floor; both signal unrelated audio content.
    """
    a = np.asarray(mfcc_ref, dtype=float)
    b = np.asarray(mfcc_other, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("MFCC matrices must share the coefficient dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 MFCC frames per track")
    a = a - a.mean(axis=0, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        raise AmbiguousPeak("one of the tracks is constant after centering")
    # correlate(b, a) summed over coefficients; index i maps to offset
    # i - (len(a) - 1), and a positive offset means b's content is late
    corr = np.zeros(a.shape[0] + b.shape[0] - 1)
    for c in range(a.shape[1]):
        corr += fftconvolve(b[:, c], a[::-1, c])
    corr /= norm
    best = int(np.argmax(corr))
    lo = max(0, best - peak_exclusion)
    hi = min(corr.size, best + peak_exclusion + 1)
    masked = corr.copy()
    masked[lo:hi] = -np.inf
    runner_up = float(masked.max()) if np.isfinite(masked).any() else -np.inf
    peak = float(corr[best])
    if peak <= 0 or (peak - runner_up) < ambiguity_ratio * abs(peak):
        raise AmbiguousPeak(
            f"top peaks {peak:.4f} and {runner_up:.4f} are not separable"
        )
    # unrelated tracks produce a flat correlation whose maximum is just an
    # extreme of the noise floor; require clear prominence above it
    floor_mean = float(corr.mean())
    floor_std = float(corr.std())
    if peak < floor_mean + 8.0 * floor_std:
        raise AmbiguousPeak(
            f"peak {peak:.4f} within {(peak - floor_mean) / max(floor_std, 1e-12):.1f} "
            "sigma of the correlation floor"
        )
    offset = best - (a.shape[0] - 1)
    return offset * params.hop_length / sample_rate, peak


def subframe_feasibility(
    hop_length: int,
    sample_rate: float,
    frame_rate: float,
    max_mic_distance_delta: float,
) -> dict:
    """Check whether audio sync is accurate to less than one video frame.

    The analysis error H / (2 fs) plus the propagation error dd / c must
    stay strictly below the frame period. Returns the verdict together
    with the largest integer hop H_max and largest distance spread d_max
    that keep the combined error subframe.
    """
    if hop_length <= 0 or sample_rate <= 0 or frame_rate <= 0 or max_mic_distance_delta < 0:
        raise ValueError("feasibility inputs must be positive")
    dt1 = hop_length / (2.0 * sample_rate)
    dt2 = max_mic_distance_delta / SPEED_OF_SOUND
    frame_period = 1.0 / frame_rate
    h_bound = 2.0 * sample_rate / frame_rate - 2.0 * sample_rate * dt2
    # strict inequality: an integer hop exactly at the bound is infeasible
    h_max = int(np.ceil(h_bound)) - 1 if float(h_bound).is_integer() else int(np.floor(h_bound))
    d_max = SPEED_OF_SOUND * (frame_period - dt1)
    return {
        "feasible": bool(dt1 + dt2 < frame_period),
        "H_max": max(h_max, 0),
        "d_max": max(d_max, 0.0),
        "dt_analysis": dt1,
        "dt_propagation": dt2,
        "frame_period": frame_period,
    }


def synchronize(
    tracks: dict[str, AudioTrack],
    reference: str,
    params: MfccParams = MfccParams(),
) -> SyncResult:
    """Estimate per-camera lags against the reference camera."""
    if reference not in tracks:
        raise ValueError(f"reference camera {reference!r} has no audio track")
    ref_mfcc = compute_mfcc(tracks[reference], params)
    lags = {reference: 0.0}
    peaks = {reference: 1.0}
    for cam_id in sorted(tracks):
        if cam_id == reference:
            continue
        mfcc = compute_mfcc(tracks[cam_id], params)
        lag, peak = estimate_lag(
            ref_mfcc, mfcc, params, tracks[cam_id].sample_rate
        )
        lags[cam_id] = lag
        peaks[cam_id] = peak
    return SyncResult(reference=reference, lags=lags, correlation_peaks=peaks)
