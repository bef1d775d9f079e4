"""Kaldi-style log-mel front end: framing, filterbank, energy VAD, sliding CMN.

All computations run on samples rescaled to the int16 range, which is what
Kaldi does internally and what the default VAD threshold is tuned for.
"""

from __future__ import annotations

import struct
import wave as _wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyFeaturesError, FormatError, LengthError

SAMPLE_RATE = 8000
FEATS_MAGIC = b"SPKFEAT1"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise FormatError(f"waveform must be mono, got shape {x.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise FormatError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    num_mel_bins: int = 64
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    low_freq: float = 20.0
    high_freq: float = 3700.0
    fft_size: int = 256
    window: str = "hamming"
    preemphasis: float = 0.97
    remove_dc: bool = True
    log_floor: float = 1e-10
    waveform_scale: float = 32768.0

    def frame_length(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(sample_rate * self.frame_length_ms / 1000.0))

    def frame_shift(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(sample_rate * self.frame_shift_ms / 1000.0))


@dataclass(frozen=True)
class VadConfig:
    energy_threshold: float = 5.0
    energy_mean_scale: float = 0.5
    proportion_threshold: float = 0.6
    frames_context: int = 2


@dataclass
class FeatureMatrix:
    """T x D log-mel frames plus the per-frame log energy used by the VAD."""

    frames: np.ndarray
    log_energy: np.ndarray | None = None
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class VadMask:
    voiced: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.voiced)


def num_frames(num_samples: int, frame_length: int = 200, frame_shift: int = 80) -> int:
    """Snip-edges frame count; 0 when the input is shorter than one frame."""
    if num_samples < frame_length:
        return 0
    return (num_samples - frame_length) // frame_shift + 1


def _frames(wave: Waveform, cfg: FrontendConfig) -> np.ndarray:
    if wave.sample_rate != SAMPLE_RATE:
        raise FormatError(f"sample rate must be {SAMPLE_RATE} Hz, got {wave.sample_rate}")
    flen, fshift = cfg.frame_length(wave.sample_rate), cfg.frame_shift(wave.sample_rate)
    n = num_frames(len(wave.samples), flen, fshift)
    if n == 0:
        raise LengthError(f"need at least {flen} samples, got {len(wave.samples)}")
    x = wave.samples * cfg.waveform_scale
    idx = np.arange(flen)[None, :] + fshift * np.arange(n)[:, None]
    frames = x[idx]
    if cfg.remove_dc:
        frames = frames - frames.mean(axis=1, keepdims=True)
    return frames


def _window(name: str, n: int) -> np.ndarray:
    if name == "hamming":
        return np.hamming(n)
    if name == "hanning":
        return np.hanning(n)
    if name == "povey":
        return np.hanning(n) ** 0.85
    if name == "rectangular":
        return np.ones(n)
    raise ValueError(f"unknown window {name!r}")


def mel_scale(freq):
    return 1127.0 * np.log1p(np.asarray(freq, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)


def mel_filterbank(cfg: FrontendConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the mel axis, shape (num_mel_bins, fft_size // 2 + 1)."""
    nyquist = sample_rate / 2.0
    if not 0.0 <= cfg.low_freq < cfg.high_freq <= nyquist:
        raise ValueError(f"bad mel band [{cfg.low_freq}, {cfg.high_freq}] for nyquist {nyquist}")
    fft_freqs = np.arange(cfg.fft_size // 2 + 1) * sample_rate / cfg.fft_size
    fft_mels = mel_scale(fft_freqs)
    edges = np.linspace(mel_scale(cfg.low_freq), mel_scale(cfg.high_freq), cfg.num_mel_bins + 2)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mels[None, :] - left) / (center - left)
    down = (right - fft_mels[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def frame_log_energy(wave: Waveform, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Raw per-frame log energy (after DC removal, before pre-emphasis and windowing)."""
    frames = _frames(wave, cfg)
    return np.log(np.maximum(np.sum(frames**2, axis=1), cfg.log_floor))


def compute_logmel(wave: Waveform, cfg: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    frames = _frames(wave, cfg)
    energy = np.log(np.maximum(np.sum(frames**2, axis=1), cfg.log_floor))
    if cfg.preemphasis:
        frames = np.concatenate(
            [frames[:, :1] * (1.0 - cfg.preemphasis), frames[:, 1:] - cfg.preemphasis * frames[:, :-1]],
            axis=1,
        )
    frames = frames * _window(cfg.window, frames.shape[1])[None, :]
    if frames.shape[1] > cfg.fft_size:
        raise ValueError(f"fft_size {cfg.fft_size} shorter than frame length {frames.shape[1]}")
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg, wave.sample_rate).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return FeatureMatrix(logmel, energy, cfg.frame_shift_ms, cfg.frame_length_ms)


def vad_from_energy(log_energy: np.ndarray, cfg: VadConfig = VadConfig()) -> VadMask:
    log_energy = np.asarray(log_energy, dtype=np.float64)
    T = len(log_energy)
    if T == 0:
        return VadMask(np.zeros(0, dtype=bool))
    threshold = cfg.energy_threshold + cfg.energy_mean_scale * log_energy.mean()
    above = (log_energy > threshold).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(above)])
    t = np.arange(T)
    lo = np.maximum(t - cfg.frames_context, 0)
    hi = np.minimum(t + cfg.frames_context + 1, T)
    num = csum[hi] - csum[lo]
    den = hi - lo
    return VadMask(num >= cfg.proportion_threshold * den)


def energy_vad(
    wave: Waveform, cfg: VadConfig = VadConfig(), frontend: FrontendConfig = FrontendConfig()
) -> VadMask:
    return vad_from_energy(frame_log_energy(wave, frontend), cfg)


def sliding_cmn(feats: FeatureMatrix, window_frames: int = 300) -> FeatureMatrix:
    """Subtract the mean of a centred window [t - w/2, t + w/2) clipped to the utterance."""
    x = feats.frames
    T = x.shape[0]
    if T < 1:
        raise LengthError("sliding CMN needs at least one frame")
    if T <= window_frames:
        out = x - x.mean(axis=0, keepdims=True)
    else:
        half = window_frames // 2
        csum = np.concatenate([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
        t = np.arange(T)
        lo = np.maximum(t - half, 0)
        hi = np.minimum(t - half + window_frames, T)
        means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
        out = x - means
    return FeatureMatrix(out, feats.log_energy, feats.frame_shift_ms, feats.frame_length_ms)


def apply_vad(feats: FeatureMatrix, mask: VadMask) -> FeatureMatrix:
    voiced = np.asarray(mask.voiced, dtype=bool)
    if len(voiced) != feats.num_frames:
        raise LengthError(f"mask has {len(voiced)} frames, features have {feats.num_frames}")
    if not voiced.any():
        raise EmptyFeaturesError("no voiced frames")
    energy = None if feats.log_energy is None else feats.log_energy[voiced]
    return FeatureMatrix(feats.frames[voiced], energy, feats.frame_shift_ms, feats.frame_length_ms)


def extract_features(
    wave: Waveform,
    cfg: FrontendConfig = FrontendConfig(),
    vad: VadConfig = VadConfig(),
    cmn_window: int = 300,
) -> np.ndarray:
    """Full pipeline: log-mel, VAD from energies, sliding CMN, then drop unvoiced frames."""
    feats = compute_logmel(wave, cfg)
    mask = vad_from_energy(feats.log_energy, vad)
    return apply_vad(sliding_cmn(feats, cmn_window), mask).frames


# -- file I/O ---------------------------------------------------------------


def read_wav(path) -> Waveform:
    with _wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0)


def write_wav(path, wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate)
        fh.writeframes(pcm.tobytes())


def write_feats(path, frames: np.ndarray) -> None:
    """Binary dump: magic, uint64 T, uint64 dim, float64 little-endian row-major data."""
    frames = np.ascontiguousarray(frames, dtype="<f8")
    T, dim = frames.shape
    Path(path).write_bytes(FEATS_MAGIC + struct.pack("<QQ", T, dim) + frames.tobytes())


def read_feats(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != FEATS_MAGIC:
        raise FormatError(f"{path}: not a feature dump")
    T, dim = struct.unpack("<QQ", blob[8:24])
    data = np.frombuffer(blob, dtype="<f8", offset=24)
    if data.size != T * dim:
        raise FormatError(f"{path}: truncated feature dump")
    return data.reshape(T, dim).copy()
