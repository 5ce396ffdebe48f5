import numpy as np
import pytest

from camocap.audiosync import (
    AudioTrack,
    MfccParams,
    compute_mfcc,
    estimate_lag,
    load_wav,
    save_wav,
    subframe_feasibility,
    synchronize,
)
from camocap.errors import AmbiguousPeak, TrackTooShort

FS = 48000


def noise_track(seconds, seed, fs=FS, scale=0.2):
    rng = np.random.default_rng(seed)
    return AudioTrack(rng.normal(0, scale, int(seconds * fs)), fs)


def delayed_pair(seconds, delay_samples, seed, fs=FS):
    """Reference track and a copy whose content is delayed by delay_samples."""
    rng = np.random.default_rng(seed)
    pad = abs(delay_samples)
    master = rng.normal(0, 0.2, int(seconds * fs) + 2 * pad)
    n = int(seconds * fs)
    ref = master[pad : pad + n]
    other = master[pad - delay_samples : pad - delay_samples + n]
    return AudioTrack(ref, fs), AudioTrack(other, fs)


class TestMfcc:
    def test_frame_count_formula(self):
        params = MfccParams(window_size=2048, hop_length=512)
        track = AudioTrack(np.zeros(60 * FS), FS)
        mfcc = compute_mfcc(track, params)
        assert mfcc.shape[0] == (60 * FS - 2048) // 512 + 1
        assert mfcc.shape[1] == params.n_coeffs

    def test_silence_gives_constant_frames(self):
        track = AudioTrack(np.zeros(FS), FS)
        mfcc = compute_mfcc(track, MfccParams())
        assert np.allclose(mfcc, mfcc[0][None, :])

    def test_white_noise_first_coefficient_dominates(self):
        # a flat spectral envelope concentrates in coefficient 0, so its
        # mean-square value dwarfs every higher coefficient's
        track = noise_track(5.0, seed=3)
        mfcc = compute_mfcc(track, MfccParams())
        energy = (mfcc**2).mean(axis=0)
        assert np.all(energy[0] > 10.0 * energy[1:])

    def test_too_short_raises(self):
        with pytest.raises(TrackTooShort):
            compute_mfcc(AudioTrack(np.zeros(100), FS), MfccParams(window_size=2048))


class TestEstimateLag:
    def test_identical_tracks_zero_lag(self):
        track = noise_track(5.0, seed=1)
        params = MfccParams()
        mfcc = compute_mfcc(track, params)
        lag, peak = estimate_lag(mfcc, mfcc, params, FS)
        assert lag == 0.0
        assert peak == pytest.approx(1.0, abs=1e-9)

    def test_half_second_delay(self):
        params = MfccParams(hop_length=128)
        ref, other = delayed_pair(10.0, 24000, seed=2)
        lag, _ = estimate_lag(
            compute_mfcc(ref, params), compute_mfcc(other, params), params, FS
        )
        assert abs(lag - 0.5) <= params.hop_length / FS

    def test_independent_noise_is_ambiguous(self):
        params = MfccParams()
        a = compute_mfcc(noise_track(4.0, seed=10), params)
        b = compute_mfcc(noise_track(4.0, seed=11), params)
        with pytest.raises(AmbiguousPeak):
            estimate_lag(a, b, params, FS)

    def test_antisymmetry(self):
        params = MfccParams(hop_length=128)
        ref, other = delayed_pair(8.0, 10000, seed=4)
        a, b = compute_mfcc(ref, params), compute_mfcc(other, params)
        fwd, _ = estimate_lag(a, b, params, FS)
        bwd, _ = estimate_lag(b, a, params, FS)
        assert abs(fwd + bwd) <= params.hop_length / FS

    def test_shift_equivariance(self):
        # delaying by whole hops shifts the estimate by exactly that amount
        params = MfccParams(hop_length=128)
        hop = params.hop_length
        rng = np.random.default_rng(5)
        n = 8 * FS
        margin = 20 * hop
        master = rng.normal(0, 0.2, n + margin)
        ref = compute_mfcc(AudioTrack(master[margin:], FS), params)
        lags = []
        for k in (0, 3, 17):
            other = AudioTrack(master[margin - k * hop : margin - k * hop + n], FS)
            lag_k, _ = estimate_lag(ref, compute_mfcc(other, params), params, FS)
            lags.append(lag_k)
        assert lags[1] - lags[0] == pytest.approx(3 * hop / FS, abs=1e-12)
        assert lags[2] - lags[0] == pytest.approx(17 * hop / FS, abs=1e-12)


class TestFeasibility:
    def test_reported_hop_bound(self):
        report = subframe_feasibility(128, 48000, 60, 5.0)
        assert report["H_max"] == 200

    def test_reported_distance_bound(self):
        report = subframe_feasibility(1, 48000, 60, 0.0)
        assert report["d_max"] == pytest.approx(5.713, abs=5e-3)

    def test_strict_boundary_infeasible(self):
        fs, fr = 48000, 60
        report = subframe_feasibility(int(2 * fs / fr), fs, fr, 0.0)
        assert report["feasible"] is False

    def test_monotone_in_hop(self):
        fs, fr, dd = 48000, 60, 2.0
        feas = [subframe_feasibility(h, fs, fr, dd)["feasible"] for h in (32, 64, 128, 256)]
        for earlier, later in zip(feas, feas[1:]):
            assert earlier or not later


class TestSynchronize:
    def test_multi_camera_lags(self):
        params = MfccParams(hop_length=128)
        rng = np.random.default_rng(9)
        n = 8 * FS
        pad = 2 * FS
        master = rng.normal(0, 0.2, n + 2 * pad)
        delays = {"a": 0, "b": 24000, "c": -9600}
        tracks = {
            cid: AudioTrack(master[pad - d : pad - d + n] + rng.normal(0, 0.02, n), FS)
            for cid, d in delays.items()
        }
        result = synchronize(tracks, reference="a", params=params)
        assert result.lags["a"] == 0.0
        for cid, d in delays.items():
            assert abs(result.lags[cid] - d / FS) <= params.hop_length / FS

    def test_wav_round_trip(self, tmp_path):
        track = noise_track(1.0, seed=6)
        path = tmp_path / "t.wav"
        save_wav(path, track)
        loaded = load_wav(path)
        assert loaded.sample_rate == FS
        assert np.abs(loaded.samples - track.samples).max() < 1e-3
