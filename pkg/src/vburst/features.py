"""Feature frontends: STFT, 80-channel log-mel with global MVN, and
spectro-temporal modulation features from a learnable Gabor STRF bank.

The STRF bank holds one (rate, scale) pair per filter; kernels are the
product of a 2D complex exponential and a separable Hann envelope,
L2-normalized. Modulation features are same-size 2D cross-correlations of
the log-mel matrix with each kernel, real and imaginary parts emitted as
two channels. Rate/scale gradients are analytic and are checked against
finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .util import atomic_write_bytes

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


class FeatureFormatError(ValueError):
    """Raised for malformed feature containers."""


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames plus the analysis geometry that produced them."""

    frames: np.ndarray  # (T, dft//2 + 1) complex
    win: int
    hop: int
    dft: int
    sample_rate: int

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass(frozen=True)
class FeatureSequence:
    """Time-major feature matrix (T, F) or tensor (C, T, F) with a kind tag."""

    data: np.ndarray
    kind: str  # "logmel" | "stmf" | "embedding"
    frame_rate: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim not in (2, 3):
            raise ValueError(f"feature data must be 2-D or 3-D, got shape {data.shape}")
        if data.size and not np.all(np.isfinite(data)):
            raise ValueError("feature data contains non-finite values")


def stft(samples: np.ndarray, sample_rate: int, win: int = 400, hop: int = 160,
         dft: int = 512) -> Spectrogram:
    """Hann-windowed STFT. No padding: T = 1 + floor((len - win) / hop)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < win:
        raise ValueError(f"audio ({x.size} samples) shorter than one window ({win})")
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(win)
    frames = np.fft.rfft(x[idx] * window[None, :], n=dft, axis=1)
    return Spectrogram(frames=frames, win=win, hop=hop, dft=dft, sample_rate=sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 80, dft: int = 512, sample_rate: int = 16000,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular mel filters with unit peaks, shape (n_mels, dft//2 + 1).

    Centers are equally spaced on the mel scale between fmin and fmax.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if fmin >= fmax:
        raise ValueError(f"degenerate band: fmin={fmin} >= fmax={fmax}")
    if fmax > sample_rate / 2:
        raise ValueError(f"fmax={fmax} above Nyquist {sample_rate / 2}")
    breakpoints = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(dft // 2 + 1) * (sample_rate / dft)
    weights = np.zeros((n_mels, dft // 2 + 1))
    for i in range(n_mels):
        lo, center, hi = breakpoints[i], breakpoints[i + 1], breakpoints[i + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        weights[i] = np.maximum(0.0, np.minimum(rising, falling))
        if not np.any(weights[i] > 0):
            raise ValueError(
                f"mel filter {i} has no nonzero weight; too many mels for dft={dft}"
            )
        weights[i] /= weights[i].max()
    return weights


def log_mel(spec: Spectrogram, melmat: np.ndarray | None = None) -> FeatureSequence:
    """ln(max(melmat @ |X|^2, floor)) per frame."""
    if melmat is None:
        melmat = mel_filterbank(sample_rate=spec.sample_rate, dft=spec.dft)
    power = np.abs(spec.frames) ** 2
    data = np.log(np.maximum(power @ melmat.T, LOG_FLOOR))
    return FeatureSequence(data=data, kind="logmel", frame_rate=spec.frame_rate)


# --- global mean/variance normalization ---


@dataclass(frozen=True)
class GmvnStats:
    """Per-channel mean and variance over a dataset split."""

    mean: np.ndarray  # (F,)
    var: np.ndarray   # (F,), floored
    n_frames: int


def fit_gmvn(sequences: Iterable[FeatureSequence]) -> GmvnStats:
    """Population moments pooled over all frames of all sequences."""
    total = None
    total_sq = None
    count = 0
    for seq in sequences:
        if seq.data.ndim != 2:
            raise ValueError("GMVN fits 2-D (T, F) sequences only")
        if total is None:
            total = np.zeros(seq.data.shape[1])
            total_sq = np.zeros(seq.data.shape[1])
        total += seq.data.sum(axis=0)
        total_sq += (seq.data ** 2).sum(axis=0)
        count += seq.data.shape[0]
    if count < 2:
        raise ValueError(f"GMVN needs >= 2 frames, got {count}")
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, VAR_FLOOR)
    return GmvnStats(mean=mean, var=var, n_frames=count)


def apply_gmvn(seq: FeatureSequence, stats: GmvnStats) -> FeatureSequence:
    if seq.data.ndim != 2 or seq.data.shape[1] != stats.mean.size:
        raise ValueError(
            f"feature shape {seq.data.shape} incompatible with {stats.mean.size} channels"
        )
    data = (seq.data - stats.mean) / np.sqrt(stats.var)
    return FeatureSequence(data=data, kind=seq.kind, frame_rate=seq.frame_rate)


# --- Gabor STRF bank and modulation features ---


@dataclass
class StrfBank:
    """N learnable (rate, scale) pairs plus fixed kernel geometry.

    rate: temporal modulation in Hz; scale: spectral modulation in cycles
    per mel channel. time_taps x freq_taps is the kernel extent.
    """

    rates: np.ndarray
    scales: np.ndarray
    time_taps: int = 32
    freq_taps: int = 16
    hop_seconds: float = 0.010

    def __post_init__(self):
        self.rates = np.atleast_1d(np.asarray(self.rates, dtype=np.float64))
        self.scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if self.rates.size != self.scales.size or self.rates.size < 1:
            raise ValueError("rates and scales must be equal-length, non-empty")
        if self.time_taps < 2 or self.freq_taps < 2:
            raise ValueError("kernel extents must be >= 2")
        if not (np.all(np.isfinite(self.rates)) and np.all(np.isfinite(self.scales))):
            raise ValueError("rates/scales must be finite")

    @property
    def n_filters(self) -> int:
        return self.rates.size


def default_strf_bank(n_filters: int = 8, time_taps: int = 32, freq_taps: int = 16,
                      hop_seconds: float = 0.010) -> StrfBank:
    """Initial bank: rates log-spaced in [2, 32] Hz, scales in [0.06, 0.5]."""
    if n_filters == 1:
        rates, scales = np.array([8.0]), np.array([0.17])
    else:
        rates = np.geomspace(2.0, 32.0, n_filters)
        scales = np.geomspace(0.06, 0.5, n_filters)
    return StrfBank(rates=rates, scales=scales, time_taps=time_taps,
                    freq_taps=freq_taps, hop_seconds=hop_seconds)


def _centered_axes(time_taps: int, freq_taps: int):
    t = np.arange(time_taps, dtype=np.float64) - (time_taps - 1) / 2.0
    f = np.arange(freq_taps, dtype=np.float64) - (freq_taps - 1) / 2.0
    return t, f


def gabor_strf_kernel(rate: float, scale: float, time_taps: int = 32,
                      freq_taps: int = 16, hop_seconds: float = 0.010) -> np.ndarray:
    """Complex Gabor kernel: Hann envelope times exp(j 2π (rate·t·hop + scale·f)).

    t and f are centered tap indices; the kernel is L2-normalized. The norm
    of the envelope does not depend on rate or scale, so normalization
    commutes with the parameter derivatives.
    """
    if time_taps < 2 or freq_taps < 2:
        raise ValueError("kernel extents must be >= 2")
    t, f = _centered_axes(time_taps, freq_taps)
    envelope = np.outer(np.hanning(time_taps), np.hanning(freq_taps))
    phase = 2.0 * np.pi * (rate * hop_seconds * t[:, None] + scale * f[None, :])
    kernel = envelope * np.exp(1j * phase)
    return kernel / np.linalg.norm(kernel)


def _xcorr_same(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size zero-padded 2D cross-correlation.

    out[t, k] = sum_{u, v} kernel[u, v] * image[t + u - cu, k + v - cv]
    with cu = (P-1)//2, cv = (Q-1)//2 (zero outside the image).
    """
    p, q = kernel.shape
    cu, cv = (p - 1) // 2, (q - 1) // 2
    full = fftconvolve(image, kernel[::-1, ::-1], mode="full")
    r0, c0 = p - 1 - cu, q - 1 - cv
    return full[r0 : r0 + image.shape[0], c0 : c0 + image.shape[1]]


def strf_kernels(bank: StrfBank) -> np.ndarray:
    """All bank kernels, shape (N, time_taps, freq_taps)."""
    return np.stack([
        gabor_strf_kernel(r, s, bank.time_taps, bank.freq_taps, bank.hop_seconds)
        for r, s in zip(bank.rates, bank.scales)
    ])


def stmf(logmel: np.ndarray, bank: StrfBank) -> np.ndarray:
    """Spectro-temporal modulation features, shape (2N, T, F).

    Channel 2i is the real part of kernel i's cross-correlation with the
    log-mel matrix, channel 2i+1 the imaginary part.
    """
    lm = np.asarray(logmel, dtype=np.float64)
    if lm.ndim != 2:
        raise ValueError(f"log-mel must be 2-D, got shape {lm.shape}")
    out = np.empty((2 * bank.n_filters, lm.shape[0], lm.shape[1]))
    for i, kernel in enumerate(strf_kernels(bank)):
        corr = _xcorr_same(lm, kernel)
        out[2 * i] = corr.real
        out[2 * i + 1] = corr.imag
    return out


def strf_param_grad(logmel: np.ndarray, bank: StrfBank,
                    upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Loss gradients w.r.t. each filter's rate and scale.

    upstream holds dL/d(stmf output), shape (2N, T, F). The kernel
    derivative is dK/drate = j·2π·t·hop · K (and j·2π·f · K for scale);
    the L2 norm is parameter-independent so no quotient term survives.
    """
    lm = np.asarray(logmel, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (2 * bank.n_filters, lm.shape[0], lm.shape[1])
    if upstream.shape != expected:
        raise ValueError(f"upstream shape {upstream.shape}, expected {expected}")
    t, f = _centered_axes(bank.time_taps, bank.freq_taps)
    rate_factor = 2.0 * np.pi * bank.hop_seconds * t[:, None]
    scale_factor = 2.0 * np.pi * f[None, :]
    d_rate = np.zeros(bank.n_filters)
    d_scale = np.zeros(bank.n_filters)
    for i, kernel in enumerate(strf_kernels(bank)):
        up_re, up_im = upstream[2 * i], upstream[2 * i + 1]
        for factor, grad in ((rate_factor, d_rate), (scale_factor, d_scale)):
            d_corr = _xcorr_same(lm, 1j * factor * kernel)
            grad[i] = np.sum(up_re * d_corr.real) + np.sum(up_im * d_corr.imag)
    return d_rate, d_scale


# --- binary feature container ("VBFT") ---

_MAGIC = b"VBFT"
_VERSION = 1
_KIND_CODES = {"logmel": 1, "stmf": 2, "embedding": 3, "gmvn": 4}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def serialize_feature(data: np.ndarray, kind: str, frame_rate: float = 0.0) -> bytes:
    """Encode an array as a VBFT blob (header + row-major float32 LE)."""
    if kind not in _KIND_CODES:
        raise FeatureFormatError(f"unknown feature kind {kind!r}")
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim not in (2, 3):
        raise FeatureFormatError(f"feature arrays must be 2-D or 3-D, got {arr.ndim}-D")
    header = _MAGIC + struct.pack(
        "<IBBf", _VERSION, _KIND_CODES[kind], arr.ndim, float(frame_rate)
    )
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def deserialize_feature(blob: bytes) -> FeatureSequence:
    if len(blob) < 14 or blob[:4] != _MAGIC:
        raise FeatureFormatError("bad magic; not a VBFT blob")
    version, kind_code, ndim, frame_rate = struct.unpack_from("<IBBf", blob, 4)
    if version != _VERSION:
        raise FeatureFormatError(f"unsupported VBFT version {version}")
    if kind_code not in _KIND_NAMES:
        raise FeatureFormatError(f"unknown kind code {kind_code}")
    if ndim not in (2, 3):
        raise FeatureFormatError(f"bad rank {ndim}")
    offset = 14
    if len(blob) < offset + 4 * ndim:
        raise FeatureFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    if any(d == 0 for d in dims):
        raise FeatureFormatError(f"zero dimension in {dims}")
    offset += 4 * ndim
    count = int(np.prod(dims))
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise FeatureFormatError(
            f"payload holds {len(payload)} bytes, header promises {4 * count}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    return FeatureSequence(data=data, kind=_KIND_NAMES[kind_code], frame_rate=frame_rate)


def write_feature_file(path, data: np.ndarray, kind: str, frame_rate: float = 0.0) -> None:
    atomic_write_bytes(path, serialize_feature(data, kind, frame_rate))


def read_feature_file(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        return deserialize_feature(fh.read())


def write_gmvn_file(path, stats: GmvnStats) -> None:
    write_feature_file(path, np.stack([stats.mean, stats.var]), kind="gmvn",
                       frame_rate=float(stats.n_frames))


def read_gmvn_file(path) -> GmvnStats:
    seq = read_feature_file(path)
    if seq.kind != "gmvn" or seq.data.shape[0] != 2:
        raise FeatureFormatError(f"{path} is not a GMVN stats container")
    return GmvnStats(mean=seq.data[0], var=seq.data[1], n_frames=int(seq.frame_rate))
