"""Desk-scale synthetic vocal-burst corpus.

Each clip is a noise-mixed chirp under an amplitude envelope, built so the
labels are recoverable from the signal: the chirp slope tracks emotion
dimension 0 (AM depth and noisiness track dimensions 1 and 2), the
envelope decay tracks age, and the spectral tilt identifies the country.
Remaining emotion dimensions are fixed mixtures of the first three, so a
model can beat chance on every task. Generation is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer, write_wav
from .data_model import LabelSet, UtteranceRecord, country_vocabulary, save_manifest


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 64
    n_val: int = 32
    n_test: int = 32
    n_emotions: int = 10
    countries: tuple[str, ...] = ("US", "CN", "ZA", "VE")
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be nonnegative")
        if self.n_train + self.n_val + self.n_test == 0:
            raise ValueError("corpus would be empty")
        country_vocabulary(self.countries)


def _tilt_shape(noise: np.ndarray, tilt_db_per_octave: float, fs: int) -> np.ndarray:
    """Shape white noise to a given spectral tilt (dB per octave re 1 kHz)."""
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(noise.size, d=1.0 / fs)
    gain = np.power(np.maximum(freqs, 20.0) / 1000.0, tilt_db_per_octave / 6.0206)
    shaped = np.fft.irfft(spectrum * gain, n=noise.size)
    rms = np.sqrt(np.mean(shaped ** 2))
    return shaped / max(rms, 1e-12)


def _emotion_mixer(n_emotions: int, seed: int) -> np.ndarray:
    """Fixed (E-3, 3) mixing matrix for the dependent emotion dimensions."""
    rng = np.random.default_rng([seed, 7001])
    mix = rng.uniform(0.2, 1.0, size=(max(n_emotions - 3, 0), 3))
    return mix / mix.sum(axis=1, keepdims=True)


def synth_utterance(index: int, config: SynthConfig) -> tuple[AudioBuffer, LabelSet]:
    """One labeled clip; fully determined by (seed, index)."""
    rng = np.random.default_rng([config.seed, 1000 + index])
    fs = config.sample_rate
    n_countries = len(config.countries)

    age = float(rng.uniform(20.0, 70.0))
    country = int(rng.integers(n_countries))
    emotion = np.zeros(config.n_emotions)
    emotion[:3] = rng.uniform(0.0, 1.0, size=3)
    if config.n_emotions > 3:
        mix = _emotion_mixer(config.n_emotions, config.seed)
        emotion[3:] = np.clip(mix @ emotion[:3] + 0.05 * rng.standard_normal(config.n_emotions - 3),
                              0.0, 1.0)

    duration = float(rng.uniform(0.9, 1.1))
    t = np.arange(int(round(duration * fs))) / fs

    # chirp slope from emotion[0]; base frequency mid-band
    f0 = 700.0
    slope = (emotion[0] - 0.5) * 800.0
    chirp = np.sin(2.0 * np.pi * (f0 * t + 0.5 * slope * t ** 2) + rng.uniform(0, 2 * np.pi))

    # amplitude modulation depth from emotion[1]
    am_depth = 0.85 * emotion[1]
    chirp *= (1.0 + am_depth * np.sin(2.0 * np.pi * 6.0 * t)) / (1.0 + am_depth)

    # noise fraction from emotion[2]; spectral tilt from the country
    tilt = np.linspace(-6.0, 6.0, n_countries)[country]
    noise = _tilt_shape(rng.standard_normal(t.size), tilt, fs)
    rho = 0.2 + 0.5 * emotion[2]
    signal = (1.0 - rho) * chirp + rho * noise * np.sqrt(np.mean(chirp ** 2))

    # envelope decay tracks age; short attack keeps onsets burst-like
    tau = 0.10 + 0.9 * (age - 20.0) / 50.0
    envelope = np.minimum(t / 0.02, 1.0) * np.exp(-t / tau)
    signal = signal * envelope + 0.003 * rng.standard_normal(t.size)

    peak = np.max(np.abs(signal))
    signal *= float(rng.uniform(0.45, 0.6)) / max(peak, 1e-12)
    labels = LabelSet(emotion=emotion, age=age, country=country)
    return AudioBuffer(samples=signal, sample_rate=fs), labels


def generate_corpus(out_dir, config: SynthConfig = SynthConfig()) -> Path:
    """Write WAVs plus a manifest; returns the manifest path.

    Test rows carry no labels, matching the challenge layout.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    records = []
    index = 0
    for split, count in (("train", config.n_train), ("val", config.n_val),
                         ("test", config.n_test)):
        for _ in range(count):
            uid = f"{split}_{index:04d}"
            buffer, labels = synth_utterance(index, config)
            wav_path = audio_dir / f"{uid}.wav"
            write_wav(buffer, wav_path, bit_depth="16")
            records.append(UtteranceRecord(
                id=uid, audio_path=str(wav_path), split=split,
                labels=None if split == "test" else labels,
            ))
            index += 1

    manifest_path = out_dir / "manifest.csv"
    save_manifest(manifest_path, records, vocabulary=config.countries,
                  n_emotions=config.n_emotions)
    return manifest_path
