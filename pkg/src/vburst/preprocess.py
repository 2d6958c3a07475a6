"""Waveform cleanup chain: DC-removal highpass FIR, gain normalization,
MMSE-STSA (Ephraim-Malah) denoising, energy-based VAD trimming, and speed
perturbation. Every stage is a pure function over AudioBuffer and is
independently invokable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import i0e, i1e

from .audio_io import AudioBuffer, interpolate_at
from .features import stft

# floors follow the usual enhancement defaults: -25 dB on amplitude gain,
# -25 dB on the a-priori SNR estimate
GAIN_FLOOR = 10.0 ** (-25.0 / 20.0)
XI_FLOOR = 10.0 ** (-25.0 / 10.0)
_GAIN_CONST = math.sqrt(math.pi) / 2.0
_NU_OVERFLOW = 700.0


@dataclass(frozen=True)
class FirFilter:
    """Linear-phase highpass taps with a null at DC."""

    taps: np.ndarray
    stopband_hz: float
    cutoff_hz: float
    transition_hz: float

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        if taps.size % 2 == 0:
            raise ValueError(f"tap count must be odd, got {taps.size}")
        if not np.allclose(taps, taps[::-1], rtol=0, atol=1e-12):
            raise ValueError("taps must be symmetric (linear phase)")
        if abs(float(taps.sum())) > 1e-6:
            raise ValueError(f"highpass taps must sum to ~0, got {taps.sum():.3e}")

    @property
    def group_delay(self) -> int:
        return (self.taps.size - 1) // 2


def design_highpass_fir(stopband_hz: float = 20.0, sample_rate: int = 16000,
                        num_taps: int = 2047, transition_hz: float | None = None) -> FirFilter:
    """Hann-windowed-sinc highpass via spectral inversion of a lowpass.

    The lowpass cutoff sits at stopband + transition/2 and its taps are
    normalized to exact unit DC gain before inversion, which forces the
    highpass DC response to zero.
    """
    if num_taps % 2 == 0:
        raise ValueError(f"num_taps must be odd, got {num_taps}")
    if num_taps < 63:
        raise ValueError(f"num_taps must be >= 63, got {num_taps}")
    if stopband_hz >= sample_rate / 2:
        raise ValueError(f"stopband {stopband_hz} Hz at or above Nyquist")
    if transition_hz is None:
        transition_hz = 3.3 * sample_rate / num_taps  # Hann-window transition width
    cutoff_hz = stopband_hz + transition_hz / 2.0
    n = np.arange(num_taps, dtype=np.float64) - (num_taps - 1) / 2.0
    lowpass = (2.0 * cutoff_hz / sample_rate) * np.sinc(2.0 * cutoff_hz / sample_rate * n)
    lowpass *= np.hanning(num_taps)
    lowpass /= lowpass.sum()
    highpass = -lowpass
    highpass[(num_taps - 1) // 2] += 1.0
    return FirFilter(taps=highpass, stopband_hz=stopband_hz, cutoff_hz=cutoff_hz,
                     transition_hz=transition_hz)


def frequency_response(fir: FirFilter, freqs_hz, sample_rate: int) -> np.ndarray:
    """Complex response H(f) = sum_n taps[n] exp(-j 2π f n / fs)."""
    freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
    n = np.arange(fir.taps.size)
    phases = np.exp(-2j * np.pi * freqs[:, None] * n[None, :] / sample_rate)
    return phases @ fir.taps


def apply_fir(fir: FirFilter, audio: AudioBuffer) -> AudioBuffer:
    """Zero-padded convolution with group-delay compensation; length preserved."""
    if len(audio) == 0:
        return AudioBuffer(samples=audio.samples.copy(), sample_rate=audio.sample_rate)
    full = fftconvolve(audio.samples, fir.taps, mode="full")
    delay = fir.group_delay
    return AudioBuffer(samples=full[delay : delay + len(audio)],
                       sample_rate=audio.sample_rate)


def gain_normalize(audio: AudioBuffer, target_peak: float = 0.95) -> AudioBuffer:
    """Scale so max |sample| equals target_peak; all-zero input is unchanged."""
    if not 0.0 < target_peak <= 1.0:
        raise ValueError(f"target_peak must be in (0, 1], got {target_peak}")
    peak = float(np.max(np.abs(audio.samples))) if len(audio) else 0.0
    if peak == 0.0:
        return AudioBuffer(samples=audio.samples.copy(), sample_rate=audio.sample_rate)
    return AudioBuffer(samples=audio.samples * (target_peak / peak),
                       sample_rate=audio.sample_rate)


# --- MMSE-STSA denoiser ---


@dataclass(frozen=True)
class DenoiseConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    dft: int = 512
    alpha_dd: float = 0.98          # decision-directed smoothing
    noise_init_frames: int = 6
    gain_floor: float = GAIN_FLOOR

    def __post_init__(self):
        if not 0.0 <= self.alpha_dd <= 1.0:
            raise ValueError(f"alpha_dd must be in [0, 1], got {self.alpha_dd}")
        if not 0.0 < self.gain_floor <= 1.0:
            raise ValueError(f"gain_floor must be in (0, 1], got {self.gain_floor}")
        if self.noise_init_frames < 1:
            raise ValueError("noise_init_frames must be >= 1")


def mmse_gain(xi, gamma, gain_floor: float = GAIN_FLOOR):
    """Ephraim-Malah MMSE-STSA spectral gain, clamped to [gain_floor, 1].

    With nu = xi*gamma/(1+xi):
        G = (sqrt(pi)/2) * (sqrt(nu)/gamma) * exp(-nu/2)
            * ((1+nu) I0(nu/2) + nu I1(nu/2))
    evaluated with exponentially-scaled Bessel functions; above nu = 700
    the Wiener form xi/(1+xi) is used instead.
    """
    scalar = np.isscalar(xi) and np.isscalar(gamma)
    xi = np.maximum(np.asarray(xi, dtype=np.float64), 0.0)
    gamma = np.maximum(np.asarray(gamma, dtype=np.float64), 1e-12)
    nu = xi * gamma / (1.0 + xi)
    half = np.minimum(nu, _NU_OVERFLOW) / 2.0
    # exp(-nu/2) * I_k(nu/2) == i_ke(nu/2)
    bessel_term = (1.0 + nu) * i0e(half) + nu * i1e(half)
    gain = _GAIN_CONST * (np.sqrt(nu) / gamma) * bessel_term
    gain = np.where(nu > _NU_OVERFLOW, xi / (1.0 + xi), gain)
    gain = np.clip(gain, gain_floor, 1.0)
    return float(gain) if scalar else gain


def estimate_noise_psd(power_frames: np.ndarray, n_init: int = 6) -> np.ndarray:
    """Per-frame noise PSD trajectory, shape (T, bins).

    Row t is the estimate in effect at frame t: the mean of the first
    n_init frames, then a 0.98/0.02 multiplicative update on bins whose
    a-posteriori SNR is below 2 (noise-dominated).
    """
    power = np.asarray(power_frames, dtype=np.float64)
    if power.ndim != 2 or power.shape[0] == 0:
        raise ValueError("power_frames must be a non-empty (T, bins) matrix")
    if n_init > power.shape[0]:
        raise ValueError(
            f"n_init={n_init} exceeds frame count {power.shape[0]}"
        )
    noise = np.maximum(power[:n_init].mean(axis=0), 1e-12)
    trajectory = np.empty_like(power)
    for t in range(power.shape[0]):
        trajectory[t] = noise
        noise_dominated = power[t] < 2.0 * noise
        noise = np.where(noise_dominated, 0.98 * noise + 0.02 * power[t], noise)
        noise = np.maximum(noise, 1e-12)
    return trajectory


def decision_directed_snr(prev_clean_power, noisy_power, noise_power,
                          alpha_dd: float = 0.98) -> np.ndarray:
    """A-priori SNR: alpha * prev/noise + (1-alpha) * max(gamma - 1, 0)."""
    prev_clean_power = np.asarray(prev_clean_power, dtype=np.float64)
    noisy_power = np.asarray(noisy_power, dtype=np.float64)
    noise_power = np.asarray(noise_power, dtype=np.float64)
    gamma = noisy_power / noise_power
    xi = alpha_dd * prev_clean_power / noise_power + (1.0 - alpha_dd) * np.maximum(gamma - 1.0, 0.0)
    return np.maximum(xi, XI_FLOOR)


def mmse_stsa_denoise(audio: AudioBuffer, config: DenoiseConfig = DenoiseConfig()) -> AudioBuffer:
    """Denoise via per-bin MMSE-STSA gains and overlap-add resynthesis.

    Enhanced amplitudes are recombined with the noisy phase. Output length
    equals input length; audio shorter than one frame is returned unchanged.
    """
    fs = audio.sample_rate
    win = int(round(config.frame_ms * fs / 1000.0))
    hop = int(round(config.hop_ms * fs / 1000.0))
    n = len(audio)
    if n < win:
        return AudioBuffer(samples=audio.samples.copy(), sample_rate=fs)

    n_frames = 1 + math.ceil((n - win) / hop)
    padded_len = (n_frames - 1) * hop + win
    x = np.zeros(padded_len)
    x[:n] = audio.samples
    spec = stft(x, fs, win=win, hop=hop, dft=config.dft)
    amplitude = np.abs(spec.frames)
    power = amplitude ** 2
    phase = np.exp(1j * np.angle(spec.frames))

    noise_traj = estimate_noise_psd(power, config.noise_init_frames)
    prev_clean = np.maximum(power[0] - noise_traj[0], 0.0)

    window = np.hanning(win)
    acc = np.zeros(padded_len)
    norm = np.zeros(padded_len)
    for t in range(power.shape[0]):
        noise = noise_traj[t]
        gamma = power[t] / noise
        xi = decision_directed_snr(prev_clean, power[t], noise, config.alpha_dd)
        gain = mmse_gain(xi, gamma, config.gain_floor)
        clean_amp = gain * amplitude[t]
        prev_clean = clean_amp ** 2
        frame = np.fft.irfft(clean_amp * phase[t], n=config.dft)[:win]
        start = t * hop
        acc[start : start + win] += frame
        norm[start : start + win] += window
    out = np.where(norm > 1e-8, acc / np.maximum(norm, 1e-8), 0.0)
    return AudioBuffer(samples=out[:n], sample_rate=fs)


# --- energy VAD ---


@dataclass(frozen=True)
class VadConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    threshold_db: float = 6.0       # relative to the utterance median
    hangover_frames: int = 10
    # frames louder than this are speech even when the median test fails
    # (a uniformly loud buffer never exceeds its own median)
    always_speech_db: float = -30.0

    def __post_init__(self):
        if not np.isfinite(self.threshold_db):
            raise ValueError("threshold_db must be finite")
        if self.hangover_frames < 0:
            raise ValueError("hangover_frames must be >= 0")


def energy_vad(audio: AudioBuffer, config: VadConfig = VadConfig()) -> list[tuple[int, int]]:
    """Speech segments as sorted, disjoint (start_sample, end_sample) pairs."""
    n = len(audio)
    if n == 0:
        return []
    fs = audio.sample_rate
    win = min(int(round(config.frame_ms * fs / 1000.0)), n)
    hop = max(int(round(config.hop_ms * fs / 1000.0)), 1)
    n_frames = 1 + max(n - win, 0) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    energy_db = 10.0 * np.log10(np.mean(audio.samples[idx] ** 2, axis=1) + 1e-12)

    threshold = float(np.median(energy_db)) + config.threshold_db
    speech = (energy_db > threshold) | (energy_db > config.always_speech_db)
    if not np.any(speech):
        return []

    # trailing hangover also bridges gaps shorter than the hangover
    extended = speech.copy()
    for t in np.flatnonzero(speech):
        extended[t : t + 1 + config.hangover_frames] = True

    segments = []
    start = None
    for t, active in enumerate(extended):
        if active and start is None:
            start = t
        elif not active and start is not None:
            segments.append((start, t))
            start = None
    if start is not None:
        segments.append((start, len(extended)))
    return [
        (first * hop, min((last - 1) * hop + win, n))
        for first, last in segments
    ]


def trim_to_voiced(audio: AudioBuffer, segments: list[tuple[int, int]]) -> AudioBuffer:
    """Cut leading/trailing silence only; internal pauses are preserved.

    An empty segment list returns the buffer unchanged.
    """
    if not segments:
        return AudioBuffer(samples=audio.samples.copy(), sample_rate=audio.sample_rate)
    start = segments[0][0]
    end = segments[-1][1]
    return AudioBuffer(samples=audio.samples[start:end].copy(),
                       sample_rate=audio.sample_rate)


def speed_perturb(audio: AudioBuffer, factor: float) -> AudioBuffer:
    """Resample-based speed change: duration scales by 1/factor, pitch shifts
    with it, and the nominal sample rate is unchanged.
    """
    if not 0.8 <= factor <= 1.25:
        raise ValueError(f"speed factor {factor} outside [0.8, 1.25]")
    if factor == 1.0 or len(audio) == 0:
        return AudioBuffer(samples=audio.samples.copy(), sample_rate=audio.sample_rate)
    n_out = int(math.floor(len(audio) / factor + 0.5))
    positions = np.arange(n_out, dtype=np.float64) * factor
    return AudioBuffer(samples=interpolate_at(audio.samples, positions),
                       sample_rate=audio.sample_rate)
