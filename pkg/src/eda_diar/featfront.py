"""Acoustic front-end: log-mel analysis, context splicing and subsampling.

The default configuration (23 mel bins, +/-7 frames of context, 25 ms / 10 ms
framing, 10x subsampling of 8 kHz audio) yields 345-dimensional features on a
100 ms grid.
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, InputEmpty, ShapeError
from .tensorfile import read_tensor, write_tensor


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate_hz <= 0:
            raise ConfigInvalid("sample_rate_hz must be positive")
        if self.samples.ndim != 1:
            raise ShapeError("waveform must be mono (rank-1)")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigInvalid("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class FrontendConfig:
    sample_rate_hz: int = 8000
    window_s: float = 0.025
    hop_s: float = 0.010
    n_mels: int = 23
    context: int = 7
    subsample: int = 10
    fmin_hz: float = 0.0
    power_floor: float = 1e-10

    def __post_init__(self):
        if self.hop_s <= 0:
            raise ConfigInvalid("hop must be positive")
        if self.window_s < self.hop_s:
            raise ConfigInvalid("window must be >= hop")
        if self.n_mels < 1 or self.context < 0 or self.subsample < 1:
            raise ConfigInvalid("n_mels >= 1, context >= 0, subsample >= 1 required")

    @property
    def win_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate_hz))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_s * self.sample_rate_hz))

    @property
    def n_fft(self) -> int:
        n = 1
        while n < self.win_samples:
            n *= 2
        return n

    @property
    def feature_dim(self) -> int:
        return self.n_mels * (2 * self.context + 1)

    @property
    def frame_period_s(self) -> float:
        return self.hop_s * self.subsample


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F)
    frame_period_s: float
    base_dim: int
    context: int
    subsample: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeError("feature matrix must be (T >= 1, F)")
        expect = self.base_dim * (2 * self.context + 1)
        if self.frames.shape[1] != expect:
            raise ShapeError(
                f"feature dim {self.frames.shape[1]} != base_dim*(2*context+1) = {expect}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise ConfigInvalid("features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters, (n_mels, n_fft//2 + 1), covering (fmin, sr/2]."""
    n_freqs = cfg.n_fft // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate_hz / 2.0, n_freqs)

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    pts = to_hz(np.linspace(to_mel(cfg.fmin_hz), to_mel(cfg.sample_rate_hz / 2.0), cfg.n_mels + 2))
    bank = np.zeros((cfg.n_mels, n_freqs))
    for k in range(cfg.n_mels):
        lo, ctr, hi = pts[k], pts[k + 1], pts[k + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        bank[k] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel bin."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    pts = to_hz(np.linspace(to_mel(cfg.fmin_hz), to_mel(cfg.sample_rate_hz / 2.0), cfg.n_mels + 2))
    return pts[1:-1]


def num_base_frames(n_samples: int, cfg: FrontendConfig) -> int:
    if n_samples < cfg.win_samples:
        return 0
    return 1 + (n_samples - cfg.win_samples) // cfg.hop_samples


def num_frames(n_samples: int, cfg: FrontendConfig) -> int:
    """Final frame count after subsampling, for a waveform of n_samples."""
    t0 = num_base_frames(n_samples, cfg)
    return -(-t0 // cfg.subsample)


def log_mel(wave: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """Log mel-filterbank energies, (T0, n_mels); floor keeps silence finite."""
    if wave.sample_rate_hz != cfg.sample_rate_hz:
        raise ConfigInvalid(
            f"waveform rate {wave.sample_rate_hz} != config rate {cfg.sample_rate_hz}"
        )
    if len(wave.samples) == 0:
        raise InputEmpty("empty waveform")
    t0 = num_base_frames(len(wave.samples), cfg)
    if t0 == 0:
        raise InputEmpty("waveform shorter than one analysis window")

    win, hop = cfg.win_samples, cfg.hop_samples
    idx = np.arange(win)[None, :] + hop * np.arange(t0)[:, None]
    frames = wave.samples[idx] * np.hanning(win)[None, :]
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg).T
    return np.log(mel + cfg.power_floor)


def splice_subsample(base: np.ndarray, context: int, subsample: int,
                     hop_s: float = 0.010) -> FeatureSequence:
    """Concatenate +/-context rows around every subsample-th frame (edges clamped)."""
    if context < 0 or subsample < 1:
        raise ConfigInvalid("context >= 0 and subsample >= 1 required")
    base = np.asarray(base)
    if base.ndim != 2 or base.shape[0] == 0:
        raise InputEmpty("no base frames to splice")
    t0, base_dim = base.shape
    centers = np.arange(0, t0, subsample)
    offsets = np.arange(-context, context + 1)
    idx = np.clip(centers[:, None] + offsets[None, :], 0, t0 - 1)
    frames = base[idx].reshape(len(centers), base_dim * (2 * context + 1))
    return FeatureSequence(
        frames=frames,
        frame_period_s=hop_s * subsample,
        base_dim=base_dim,
        context=context,
        subsample=subsample,
    )


def extract(wave: Waveform, cfg: FrontendConfig) -> FeatureSequence:
    """Full front-end: log-mel analysis then splice/subsample."""
    return splice_subsample(log_mel(wave, cfg), cfg.context, cfg.subsample, hop_s=cfg.hop_s)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read mono 16-bit PCM WAV."""
    with _wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ConfigInvalid(f"{path}: expected mono audio")
        if f.getsampwidth() != 2:
            raise ConfigInvalid(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate_hz=rate)


def write_wav(path, wave: Waveform) -> None:
    scaled = np.clip(wave.samples, -1.0, 1.0)
    pcm = np.round(scaled * 32767.0).astype("<i2")
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave.sample_rate_hz)
        f.writeframes(pcm.tobytes())


def write_feature_file(path, feats: FeatureSequence) -> None:
    write_tensor(path, feats.frames.astype(np.float32))


def read_feature_file(path, cfg: FrontendConfig) -> FeatureSequence:
    frames = read_tensor(path)
    return FeatureSequence(
        frames=frames,
        frame_period_s=cfg.frame_period_s,
        base_dim=cfg.n_mels,
        context=cfg.context,
        subsample=cfg.subsample,
    )
