"""Manifests, splits, trial lists and a source-filter synthetic speaker generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter

from .errors import ConfigError, SplitError
from .frontend import SAMPLE_RATE, Waveform, write_wav
from .scoring import Trial

SUBSETS = ("train", "valid", "enroll", "test")


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: str
    speaker_id: str
    subset: str = "train"


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utt_id in seen:
                raise ConfigError(f"duplicate utt_id {e.utt_id!r}")
            if e.subset not in SUBSETS:
                raise ConfigError(f"{e.utt_id}: unknown subset {e.subset!r}")
            seen.add(e.utt_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __add__(self, other):
        return Manifest(self.entries + other.entries)

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def subset(self, *names) -> "Manifest":
        return Manifest([e for e in self.entries if e.subset in names])

    def by_speaker(self) -> dict:
        out = {}
        for e in self.entries:
            out.setdefault(e.speaker_id, []).append(e)
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{e.utt_id}\t{e.path}\t{e.speaker_id}\t{e.subset}\n" for e in self.entries))

    @classmethod
    def load(cls, path) -> "Manifest":
        entries = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ConfigError(f"{path}:{lineno}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(*parts))
        return cls(entries)


# -- synthetic speakers ----------------------------------------------------------

_FORMANT_BANDS = [(250.0, 850.0), (900.0, 2200.0), (2200.0, 2900.0), (2950.0, 3350.0), (3400.0, 3700.0)]


@dataclass(frozen=True)
class SyntheticSpeakerSpec:
    seed: int
    formants: tuple
    bandwidths: tuple
    pitch_hz: float
    tilt: float

    @classmethod
    def draw(cls, seed: int, index: int) -> "SyntheticSpeakerSpec":
        rng = np.random.default_rng([seed, index, 17])
        n = int(rng.integers(3, 6))
        formants = tuple(float(rng.uniform(lo, hi)) for lo, hi in _FORMANT_BANDS[:n])
        bandwidths = tuple(float(rng.uniform(60.0, 180.0)) for _ in range(n))
        return cls(seed, formants, bandwidths, float(rng.uniform(85.0, 240.0)), float(rng.uniform(0.3, 0.9)))


@dataclass(frozen=True)
class DomainStyle:
    """Excitation and channel statistics shared by every utterance of a domain."""

    noise_mix: float = 0.05
    jitter: float = 0.01
    pitch_shift: float = 1.0
    band: tuple | None = None
    noise_floor_db: float = -55.0


DOMAINS = {
    "a": DomainStyle(),
    "b": DomainStyle(noise_mix=0.25, jitter=0.03, pitch_shift=1.08, band=(300.0, 3400.0), noise_floor_db=-45.0),
}


def _resonator(freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return [1.0 - r], a


def synthesize_utterance(spk: SyntheticSpeakerSpec, duration_s: float, seed, style: DomainStyle = DomainStyle(), sr: int = SAMPLE_RATE) -> Waveform:
    """Voiced segments separated by pauses; each segment is a glottal pulse train
    (with jitter and a slow pitch contour) mixed with aspiration noise and shaped
    by the speaker's formant resonators and spectral tilt."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sr))
    env = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * sr)
    while pos < n:
        seg = int(rng.uniform(0.2, 0.5) * sr)
        stop = min(pos + seg, n)
        ramp = np.minimum(1.0, np.minimum(np.arange(stop - pos), np.arange(stop - pos)[::-1]) / (0.02 * sr))
        env[pos:stop] = ramp * rng.uniform(0.6, 1.0)
        pos = stop + int(rng.uniform(0.05, 0.25) * sr)

    t = np.arange(n) / sr
    contour = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    f0 = spk.pitch_hz * style.pitch_shift * contour * (1.0 + style.jitter * rng.standard_normal(n))
    phase = np.cumsum(f0 / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    excitation = (1.0 - style.noise_mix) * pulses + style.noise_mix * 0.3 * rng.standard_normal(n)

    y = np.zeros(n)
    for i, (f, bw) in enumerate(zip(spk.formants, spk.bandwidths)):
        wobble = 1.0 + 0.03 * rng.standard_normal()
        b, a = _resonator(min(f * wobble, 3800.0), bw, sr)
        y += 0.8**i * lfilter(b, a, excitation)
    y = lfilter([1.0], [1.0, -spk.tilt], y)
    if style.band is not None:
        b, a = butter(4, [style.band[0] / (sr / 2), style.band[1] / (sr / 2)], btype="band")
        y = lfilter(b, a, y)
    y = y * env
    y = 0.5 * y / max(np.max(np.abs(y)), 1e-12)
    y = y + 10 ** (style.noise_floor_db / 20.0) * rng.standard_normal(n)
    return Waveform(np.clip(y, -1.0, 1.0), sr)


def generate_synthetic_corpus(
    out_dir,
    n_speakers: int,
    utts_per_speaker: int,
    duration_s: float,
    seed: int,
    domain: str = "a",
    subset: str = "train",
    speakers: list[int] | None = None,
    tag: str | None = None,
) -> Manifest:
    """Write WAVs under ``out_dir/wav`` and return their manifest.

    Speaker ``k`` is always ``spk{k:03d}`` with the same resonances for a given
    ``seed``; ``domain`` selects the excitation/channel style and ``tag``
    keeps utterance ids and seeds distinct between calls.
    """
    if n_speakers < 2 and speakers is None:
        raise ConfigError("need at least 2 speakers")
    if utts_per_speaker < 1 or duration_s <= 0:
        raise ConfigError("utts_per_speaker must be >= 1 and duration_s > 0")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}")
    tag = tag or f"{domain}{subset[0]}"
    wav_dir = Path(out_dir) / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k in speakers if speakers is not None else range(n_speakers):
        spk = SyntheticSpeakerSpec.draw(seed, k)
        for u in range(utts_per_speaker):
            utt_id = f"spk{k:03d}-{tag}-{u:03d}"
            wave = synthesize_utterance(spk, duration_s, [seed, k, u, sum(map(ord, tag))], DOMAINS[domain])
            path = wav_dir / f"{utt_id}.wav"
            write_wav(path, wave)
            entries.append(ManifestEntry(utt_id, str(path), f"spk{k:03d}", subset))
    return Manifest(entries)


# -- splits and trials ---------------------------------------------------------------


def split_manifest(m: Manifest, valid_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Hold out ``round(valid_fraction * n)`` utterances of every speaker; speakers keep >= 1 train utterance."""
    if not 0.0 < valid_fraction < 1.0:
        raise SplitError(f"valid_fraction must lie in (0, 1), got {valid_fraction}")
    rng = np.random.default_rng(seed)
    held = set()
    for spk, entries in sorted(m.by_speaker().items()):
        k = int(round(valid_fraction * len(entries)))
        if k >= len(entries):
            raise SplitError(f"speaker {spk} would have no training utterances")
        for i in rng.permutation(len(entries))[:k]:
            held.add(entries[i].utt_id)
    train = [e for e in m if e.utt_id not in held]
    valid = [ManifestEntry(e.utt_id, e.path, e.speaker_id, "valid") for e in m if e.utt_id in held]
    return Manifest(train), Manifest(valid)


def make_trials(enroll: Manifest, test: Manifest, n_target: int, n_nontarget: int, seed: int) -> list[Trial]:
    """Sample labelled (enroll, test) pairs without replacement."""
    enroll_e, test_e = list(enroll), list(test)
    tgt = [(i, j) for i, a in enumerate(enroll_e) for j, b in enumerate(test_e) if a.speaker_id == b.speaker_id and a.utt_id != b.utt_id]
    non = [(i, j) for i, a in enumerate(enroll_e) for j, b in enumerate(test_e) if a.speaker_id != b.speaker_id]
    if n_target > len(tgt) or n_nontarget > len(non) or n_target < 0 or n_nontarget < 0:
        raise ConfigError(f"asked for {n_target}/{n_nontarget} trials, only {len(tgt)}/{len(non)} available")
    rng = np.random.default_rng(seed)
    pick_t = [tgt[i] for i in sorted(rng.choice(len(tgt), n_target, replace=False))]
    pick_n = [non[i] for i in sorted(rng.choice(len(non), n_nontarget, replace=False))]
    trials = [Trial(enroll_e[i].utt_id, test_e[j].utt_id, "target") for i, j in pick_t]
    trials += [Trial(enroll_e[i].utt_id, test_e[j].utt_id, "nontarget") for i, j in pick_n]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]
