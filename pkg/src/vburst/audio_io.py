"""Mono WAV read/write and linear resampling.

Readers accept RIFF/WAVE files holding mono 16-bit integer PCM (fmt tag 1)
or 32-bit IEEE float PCM (fmt tag 3). The writer emits the canonical
44-byte header, little-endian throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .util import atomic_write_bytes

_PCM16_SCALE = 32768.0


class WavFormatError(ValueError):
    """Raised for files that are not mono PCM/float WAV."""


@dataclass(frozen=True)
class AudioBuffer:
    """Immutable mono sample sequence with its sample rate."""

    samples: np.ndarray  # float64 amplitudes, nominally in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> AudioBuffer:
    """Read a mono WAV file; integer PCM is scaled to [-1, 1] by 1/32768."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise WavFormatError(f"{path}: truncated data chunk")
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    audio_format, n_channels, sample_rate, _, _, bits = fmt
    if n_channels != 1:
        raise WavFormatError(f"{path}: {n_channels} channels, only mono is supported")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 2], dtype="<i2")
        samples = raw.astype(np.float64) / _PCM16_SCALE
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 4], dtype="<f4")
        samples = raw.astype(np.float64)
        if samples.size and not np.all(np.isfinite(samples)):
            raise WavFormatError(f"{path}: float payload contains non-finite values")
    else:
        raise WavFormatError(
            f"{path}: unsupported encoding (fmt tag {audio_format}, {bits} bits)"
        )
    return AudioBuffer(samples=samples, sample_rate=sample_rate)


def write_wav(buffer: AudioBuffer, path, bit_depth: str = "16") -> None:
    """Write a mono WAV file. bit_depth is "16" (PCM) or "32f" (IEEE float).

    Amplitudes are clipped to [-1, 1] before encoding.
    """
    clipped = np.clip(buffer.samples, -1.0, 1.0)
    if bit_depth == "16":
        fmt_tag, bits = 1, 16
        pcm = np.clip(np.round(clipped * _PCM16_SCALE), -32768, 32767).astype("<i2")
        payload = pcm.tobytes()
    elif bit_depth == "32f":
        fmt_tag, bits = 3, 32
        payload = clipped.astype("<f4").tobytes()
    else:
        raise ValueError(f"bit_depth must be '16' or '32f', got {bit_depth!r}")

    block_align = bits // 8
    byte_rate = buffer.sample_rate * block_align
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        fmt_tag,
        1,
        buffer.sample_rate,
        byte_rate,
        block_align,
        bits,
        b"data",
        len(payload),
    )
    atomic_write_bytes(path, header + payload)


def interpolate_at(samples: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of `samples` at fractional index `positions`.

    Positions outside [0, len-1] clamp to the edge samples.
    """
    if samples.size == 0:
        return np.zeros(0, dtype=np.float64)
    return np.interp(positions, np.arange(samples.size, dtype=np.float64), samples)


def resample_linear(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Resample by linear interpolation.

    Output length is round(len * target_rate / source_rate); identical
    rates return the input samples unchanged.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buffer.sample_rate:
        return AudioBuffer(samples=buffer.samples.copy(), sample_rate=target_rate)
    n_out = int(np.floor(len(buffer) * target_rate / buffer.sample_rate + 0.5))
    if n_out == 0 or len(buffer) == 0:
        return AudioBuffer(samples=np.zeros(0), sample_rate=target_rate)
    positions = np.arange(n_out, dtype=np.float64) * (buffer.sample_rate / target_rate)
    return AudioBuffer(samples=interpolate_at(buffer.samples, positions), sample_rate=target_rate)
