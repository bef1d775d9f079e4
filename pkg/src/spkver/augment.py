"""Training-data augmentation: reverberation, music, interval noise and babble.

Every function is pure and seeded; the random draws happen in a fixed order
so callers can replay them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend import SAMPLE_RATE, Waveform

KINDS = ("reverb", "music", "noise", "babble")

DEFAULT_SNR = {"reverb": (0.0, 0.0), "music": (5.0, 15.0), "noise": (0.0, 15.0), "babble": (13.0, 20.0)}


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    snr_range_db: tuple[float, float] = None
    interval_s: float = 1.0
    num_babble: tuple[int, int] = (3, 7)
    rng_seed: int = 0
    rt60_range_s: tuple[float, float] = (0.2, 0.8)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.snr_range_db is None:
            object.__setattr__(self, "snr_range_db", DEFAULT_SNR[self.kind])
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ValueError(f"snr range {self.snr_range_db} has low > high")
        if not 1 <= self.num_babble[0] <= self.num_babble[1]:
            raise ValueError(f"bad babble count range {self.num_babble}")
        if self.interval_s <= 0:
            raise ValueError("interval_s must be positive")


def _power(x: np.ndarray) -> float:
    return float(np.mean(x**2)) if len(x) else 0.0


def _peak_protect(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x)) if len(x) else 0.0
    return x / peak if peak > 1.0 else x


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Trim or loop ``x`` to exactly ``n`` samples."""
    if len(x) == 0:
        raise ValueError("cannot loop an empty signal")
    reps = -(-n // len(x))
    return np.tile(x, reps)[:n]


def convolve_rir(wave: Waveform, rir: Waveform) -> Waveform:
    h = np.asarray(rir.samples)
    if len(h) == 0:
        raise ValueError("empty room impulse response")
    if rir.sample_rate != wave.sample_rate:
        raise ValueError("rir and waveform sample rates differ")
    x = wave.samples
    n = len(x)
    taps = np.flatnonzero(h[:n])
    if len(taps) <= 64:
        # sparse responses (impulses, discrete echoes) are summed exactly
        y = np.zeros(n)
        for k in taps:
            y[k:] += h[k] * x[: n - k]
    else:
        m = n + len(h) - 1
        nfft = 1 << (m - 1).bit_length()
        y = np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)[:n]
    return Waveform(_peak_protect(y), wave.sample_rate)


def synthetic_rir(rt60_s: float, seed: int, length_s: float | None = None, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Direct path plus an exponentially decaying noise tail reaching -60 dB at ``rt60_s``."""
    if rt60_s <= 0:
        raise ValueError("rt60 must be positive")
    rng = np.random.default_rng(seed)
    n = int(round((length_s or rt60_s) * sample_rate))
    t = np.arange(n) / sample_rate
    tail = rng.standard_normal(n) * np.exp(-6.9078 * t / rt60_s) * 0.3
    tail[0] = 1.0
    return Waveform(tail / np.max(np.abs(tail)), sample_rate)


def scale_to_snr(signal: np.ndarray, interferer: np.ndarray, snr_db: float) -> np.ndarray:
    """Loop/trim ``interferer`` to the signal length and scale it to the requested SNR."""
    noise = fit_length(np.asarray(interferer, dtype=np.float64), len(signal))
    p_noise = _power(noise)
    if p_noise <= 0.0:
        raise ValueError("interferer has zero energy")
    gain = np.sqrt(_power(signal) / (p_noise * 10.0 ** (snr_db / 10.0)))
    return noise * gain


def mix_at_snr(wave: Waveform, interferer: Waveform, snr_db: float) -> Waveform:
    mixed = wave.samples + scale_to_snr(wave.samples, interferer.samples, snr_db)
    return Waveform(_peak_protect(mixed), wave.sample_rate)


@dataclass
class NoisePlacement:
    start: int
    stop: int
    source: int
    snr_db: float


def noise_components(wave: Waveform, noises: list[Waveform], spec: AugmentSpec):
    """Return the summed noise track and the per-interval placements."""
    if not noises:
        raise ValueError("need at least one noise source")
    rng = np.random.default_rng(spec.rng_seed)
    step = int(round(spec.interval_s * wave.sample_rate))
    n = len(wave.samples)
    track = np.zeros(n)
    plan = []
    for start in range(0, n, step):
        stop = min(start + step, n)
        src = int(rng.integers(len(noises)))
        snr = float(rng.uniform(*spec.snr_range_db))
        plan.append(NoisePlacement(start, stop, src, snr))
        segment = wave.samples[start:stop]
        if _power(segment) > 0.0:
            track[start:stop] = scale_to_snr(segment, noises[src].samples, snr)
    return track, plan


def noise_intervals(wave: Waveform, noises: list[Waveform], spec: AugmentSpec) -> Waveform:
    track, _ = noise_components(wave, noises, spec)
    return Waveform(_peak_protect(wave.samples + track), wave.sample_rate)


def babble_components(wave: Waveform, speeches: list[Waveform], spec: AugmentSpec):
    """Draw (k, talkers, snr) in that order and return the scaled babble track."""
    lo, hi = spec.num_babble
    if len(speeches) < lo:
        raise ValueError(f"need at least {lo} babble sources, have {len(speeches)}")
    rng = np.random.default_rng(spec.rng_seed)
    k = int(rng.integers(lo, min(hi, len(speeches)) + 1))
    chosen = rng.choice(len(speeches), size=k, replace=False)
    snr = float(rng.uniform(*spec.snr_range_db))
    n = len(wave.samples)
    babble = np.sum([fit_length(speeches[i].samples, n) for i in chosen], axis=0)
    return scale_to_snr(wave.samples, babble, snr), [int(i) for i in chosen], snr


def babble_mix(wave: Waveform, speeches: list[Waveform], spec: AugmentSpec) -> Waveform:
    track, _, _ = babble_components(wave, speeches, spec)
    return Waveform(_peak_protect(wave.samples + track), wave.sample_rate)


def music_mix(wave: Waveform, music: list[Waveform], spec: AugmentSpec) -> Waveform:
    if not music:
        raise ValueError("need at least one music source")
    rng = np.random.default_rng(spec.rng_seed)
    src = music[int(rng.integers(len(music)))]
    return mix_at_snr(wave, src, float(rng.uniform(*spec.snr_range_db)))


def reverberate(wave: Waveform, rirs: list[Waveform] | None, spec: AugmentSpec) -> Waveform:
    rng = np.random.default_rng(spec.rng_seed)
    if rirs:
        rir = rirs[int(rng.integers(len(rirs)))]
    else:
        rir = synthetic_rir(float(rng.uniform(*spec.rt60_range_s)), int(rng.integers(2**31)), sample_rate=wave.sample_rate)
    return convolve_rir(wave, rir)


# -- synthetic interference sources -----------------------------------------


def synthetic_music(duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Sequence of harmonic notes with decaying envelopes; stands in for a music corpus."""
    rng = np.random.default_rng(seed)
    n = int(duration_s * sample_rate)
    out = np.zeros(n)
    pos = 0
    while pos < n:
        dur = int(rng.uniform(0.15, 0.5) * sample_rate)
        f0 = 110.0 * 2.0 ** (rng.integers(0, 30) / 12.0)
        t = np.arange(min(dur, n - pos)) / sample_rate
        note = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, 5) if f0 * h < sample_rate / 2)
        out[pos : pos + len(t)] += note * np.exp(-3.0 * t)
        pos += dur
    return Waveform(0.5 * out / max(np.max(np.abs(out)), 1e-12), sample_rate)


def synthetic_noise(duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Coloured noise with a random spectral slope."""
    rng = np.random.default_rng(seed)
    n = int(duration_s * sample_rate)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.maximum(np.fft.rfftfreq(n, 1.0 / sample_rate), 20.0)
    spec *= freqs ** (-rng.uniform(0.0, 1.0))
    x = np.fft.irfft(spec, n)
    return Waveform(0.5 * x / max(np.max(np.abs(x)), 1e-12), sample_rate)


@dataclass
class AugmentSources:
    rirs: list[Waveform] = field(default_factory=list)
    music: list[Waveform] = field(default_factory=list)
    noise: list[Waveform] = field(default_factory=list)
    speech: list[Waveform] = field(default_factory=list)


def augment(wave: Waveform, spec: AugmentSpec, sources: AugmentSources) -> Waveform:
    if spec.kind == "reverb":
        return reverberate(wave, sources.rirs, spec)
    if spec.kind == "music":
        return music_mix(wave, sources.music, spec)
    if spec.kind == "noise":
        return noise_intervals(wave, sources.noise, spec)
    return babble_mix(wave, sources.speech, spec)


def format_manifest_line(utt_id: str, kind: str, seed: int) -> str:
    return f"{utt_id} {kind} {seed}"


def parse_manifest_line(line: str) -> tuple[str, str, int]:
    utt_id, kind, seed = line.split()
    if kind not in KINDS:
        raise ValueError(f"unknown augmentation kind {kind!r}")
    return utt_id, kind, int(seed)
