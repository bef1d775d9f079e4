"""Embedding extraction and cosine scoring of trial lists."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .errors import EmptyFeaturesError, MissingEmbeddingError, ShapeError, StateError
from .frontend import FrontendConfig, VadConfig, Waveform, extract_features


@dataclass
class Embedding:
    vector: np.ndarray
    utt_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ShapeError("embedding must be a finite 1-d vector")
        n = np.linalg.norm(v)
        self.vector = v / n if n > 0 else v


@dataclass
class Trial:
    enroll: str
    test: str
    label: str | None = None


@dataclass
class ScoreSet:
    trials: list
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != len(self.trials):
            raise ShapeError(f"{len(self.scores)} scores for {len(self.trials)} trials")

    @property
    def keys(self):
        return [(t.enroll, t.test) for t in self.trials]

    @property
    def labels(self):
        """Boolean target mask, or None if any trial is unlabelled."""
        if any(t.label is None for t in self.trials):
            return None
        return np.array([t.label == "target" for t in self.trials], dtype=bool)


def extract_embedding(
    model,
    wave: Waveform,
    utt_id: str = "",
    frontend: FrontendConfig = FrontendConfig(),
    vad: VadConfig = VadConfig(),
    cmn_window: int = 300,
) -> Embedding:
    """Full-utterance forward of an eval-mode model; raises EmptyFeaturesError when VAD rejects everything."""
    if model.training:
        raise StateError("extract_embedding needs an eval-mode model")
    feats = extract_features(wave, frontend, vad, cmn_window)
    if len(feats) < model.min_frames:
        raise EmptyFeaturesError(f"{utt_id or 'utterance'}: only {len(feats)} voiced frames")
    return embed_features(model, feats, utt_id)


def embed_features(model, feats: np.ndarray, utt_id: str = "") -> Embedding:
    out = model(np.asarray(feats)[None])
    return Embedding(out.data[0].astype(np.float64), utt_id)


def cosine_score(a: Embedding, b: Embedding) -> float:
    if a.vector.shape != b.vector.shape:
        raise ShapeError(f"embedding dims differ: {a.vector.shape} vs {b.vector.shape}")
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


def average_embeddings(embs: list[Embedding], utt_id: str) -> Embedding:
    """Multi-utterance enrollment: mean of unit vectors, re-normalised."""
    return Embedding(np.mean([e.vector for e in embs], axis=0), utt_id)


def resolve(store: dict, key: str, enroll_map: dict | None = None) -> Embedding:
    if enroll_map and key in enroll_map:
        missing = [u for u in enroll_map[key] if u not in store]
        if missing:
            raise MissingEmbeddingError(f"no embedding for {missing[0]!r} (enrollment of {key!r})")
        return average_embeddings([store[u] for u in enroll_map[key]], key)
    if key not in store:
        raise MissingEmbeddingError(f"no embedding for {key!r}")
    return store[key]


def score_trials(trials: list[Trial], store: dict, enroll_map: dict | None = None) -> ScoreSet:
    scores = [cosine_score(resolve(store, t.enroll, enroll_map), resolve(store, t.test)) for t in trials]
    return ScoreSet(list(trials), np.asarray(scores, dtype=np.float64))


# -- files -----------------------------------------------------------------------


def save_embeddings(path, store: dict) -> None:
    gc.save_container(path, {k: e.vector for k, e in store.items()}, {"kind": "embeddings"})


def load_embeddings(path) -> dict:
    tensors, _ = gc.load_container(path)
    return {k: Embedding(v, k) for k, v in tensors.items()}


def read_trials(path) -> list[Trial]:
    trials, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] not in ("target", "nontarget")):
            raise ValueError(f"{path}:{lineno}: expected 'enroll test [target|nontarget]'")
        key = (parts[0], parts[1])
        if key in seen:
            raise ValueError(f"{path}:{lineno}: duplicate trial {key}")
        seen.add(key)
        trials.append(Trial(parts[0], parts[1], parts[2] if len(parts) == 3 else None))
    return trials


def write_trials(path, trials: list[Trial]) -> None:
    lines = [" ".join(x for x in (t.enroll, t.test, t.label) if x) for t in trials]
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_scores(path, scores: ScoreSet) -> None:
    Path(path).write_text("".join(f"{t.enroll} {t.test} {s:.6f}\n" for t, s in zip(scores.trials, scores.scores)))


def read_scores(path, trials: list[Trial] | None = None) -> ScoreSet:
    """Read a score file; labels are attached from ``trials`` when given (matched by key)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'enroll test score'")
        rows.append((parts[0], parts[1], float(parts[2])))
    labels = {}
    if trials is not None:
        labels = {(t.enroll, t.test): t.label for t in trials}
        missing = [(e, t) for e, t, _ in rows if (e, t) not in labels]
        if missing:
            raise MissingEmbeddingError(f"score file has trial {missing[0]} absent from the trial list")
    return ScoreSet([Trial(e, t, labels.get((e, t))) for e, t, _ in rows], np.array([s for *_, s in rows]))
