"""Two-stage training: pre-training on everything, refinement on an in-domain subset.

The loop is plain SGD with momentum, a reduce-on-plateau learning-rate rule
driven by held-out CM-Softmax loss, and per-iteration margin schedules.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, MappingError, NonFiniteError, ShapeError
from .gradcore import Tape, Tensor
from .loss import CMSoftmaxHead, MarginSchedule, cm_softmax_loss, margin_at
from .nets import SpeakerNet, build_model

log = logging.getLogger(__name__)


# -- optimiser and scheduler --------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    min_lr: float = 1e-6
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, opt: OptimizerState) -> dict:
    """v <- momentum * v + g;  p <- p - lr * v.  Updates ``params`` in place and returns it."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = p.data if isinstance(p, Tensor) else p
        if g.shape != data.shape:
            raise ShapeError(f"{name}: gradient {g.shape} does not match parameter {data.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(data)
        elif v.shape != data.shape:
            raise ShapeError(f"{name}: velocity {v.shape} does not match parameter {data.shape}")
        v *= opt.momentum
        v += g
        data -= opt.lr * v
    return params


@dataclass
class PlateauScheduler:
    lr: float = 0.05
    validate_every: int = 8000
    patience: int = 2
    factor: float = 0.5
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best_metric: float = math.inf
    bad_count: int = 0
    exhausted: bool = False

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigError("plateau factor must lie in (0, 1)")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")


def plateau_update(sched: PlateauScheduler, val_metric: float) -> float:
    """One validation cycle. ``exhausted`` is set when a reduction is due at the lr floor."""
    if val_metric < sched.best_metric - sched.threshold:
        sched.best_metric = val_metric
        sched.bad_count = 0
        return sched.lr
    sched.bad_count += 1
    if sched.bad_count > sched.patience:
        if sched.lr <= sched.min_lr:
            sched.exhausted = True
        sched.lr = max(sched.lr * sched.factor, sched.min_lr)
        sched.bad_count = 0
    return sched.lr


# -- stage configuration ------------------------------------------------------


@dataclass
class StageConfig:
    stage: int = 1
    batch_size: int = 16
    chunk_frames: int = 200
    max_iters: int = 1000
    lr: float = 0.05
    momentum: float = 0.9
    min_lr: float = 1e-6
    validate_every: int = 100
    patience: int = 2
    factor: float = 0.5
    s: float = 32.0
    m1: MarginSchedule = MarginSchedule("linear", 0.0, 0.2, 250)
    m2: MarginSchedule = MarginSchedule("linear", 0.0, 0.1, 250)
    seed: int = 0
    log_every: int = 10
    workers: int = 0

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iters < 0 or self.validate_every < 1:
            raise ConfigError("max_iters must be >= 0 and validate_every >= 1")


def full_stage1() -> StageConfig:
    return StageConfig(
        stage=1, batch_size=320, chunk_frames=400, max_iters=10**9, validate_every=8000,
        m1=MarginSchedule("linear", 0.0, 0.2, 8000), m2=MarginSchedule("linear", 0.0, 0.1, 8000),
    )


def full_stage2() -> StageConfig:
    return StageConfig(
        stage=2, batch_size=160, chunk_frames=1000, max_iters=10**9, validate_every=2000,
        m1=MarginSchedule("exponential", 0.2, 0.8, 4000), m2=MarginSchedule.constant(0.0),
    )


PRESETS = {"full-stage1": full_stage1, "full-stage2": full_stage2}


# -- data ----------------------------------------------------------------------


class SkipUtterance(Exception):
    pass


def sample_chunk(utt: np.ndarray, chunk_frames: int, rng) -> np.ndarray:
    """Uniform contiguous slice; short utterances are wrapped around to full length."""
    T = utt.shape[0]
    if T == 0:
        raise SkipUtterance("empty utterance")
    if T == chunk_frames:
        return utt
    if T > chunk_frames:
        start = int(rng.integers(0, T - chunk_frames + 1))
        return utt[start : start + chunk_frames]
    return utt[np.arange(chunk_frames) % T]


@dataclass
class TrainCorpus:
    """Feature matrices with integer labels; ``speakers[label]`` is the speaker id."""

    feats: dict
    labels: dict
    speakers: list
    train_ids: list
    valid_ids: list

    def __post_init__(self):
        if not self.train_ids:
            raise ConfigError("training corpus is empty")
        self.by_label = {}
        for u in self.train_ids:
            self.by_label.setdefault(self.labels[u], []).append(u)
        self.train_labels = sorted(self.by_label)


def make_batch(corpus: TrainCorpus, batch_size: int, chunk_frames: int, seed, dtype=np.float32):
    """Uniform random speakers, one chunk each. Fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    while len(xs) < batch_size:
        label = corpus.train_labels[int(rng.integers(len(corpus.train_labels)))]
        utts = corpus.by_label[label]
        utt = utts[int(rng.integers(len(utts)))]
        try:
            xs.append(sample_chunk(corpus.feats[utt], chunk_frames, rng))
        except SkipUtterance:
            continue
        ys.append(label)
    return np.stack(xs).astype(dtype, copy=False), np.asarray(ys, dtype=np.int64)


class BatchLoader:
    """Iterates batches ``start..stop-1``; seeds depend on the batch index only."""

    def __init__(self, corpus, cfg: StageConfig, dtype, start=0, stop=None):
        self.corpus, self.cfg, self.dtype = corpus, cfg, dtype
        self.start, self.stop = start, cfg.max_iters if stop is None else stop

    def _batch(self, it):
        return make_batch(self.corpus, self.cfg.batch_size, self.cfg.chunk_frames, [self.cfg.seed, self.cfg.stage, it], self.dtype)

    def __iter__(self):
        if self.cfg.workers <= 0:
            for it in range(self.start, self.stop):
                yield self._batch(it)
            return
        with ThreadPoolExecutor(self.cfg.workers) as pool:
            pending = deque()
            nxt = self.start
            while nxt < self.stop or pending:
                while nxt < self.stop and len(pending) < 2 * self.cfg.workers:
                    pending.append(pool.submit(self._batch, nxt))
                    nxt += 1
                yield pending.popleft().result()


# -- classifier transplant --------------------------------------------------------


def transplant_classifier(base: CMSoftmaxHead, mapping) -> CMSoftmaxHead:
    """New head whose row i is ``base`` row ``mapping[i]``."""
    idx = np.asarray(list(mapping), dtype=np.int64)
    bad = idx[(idx < 0) | (idx >= base.num_classes)]
    if len(bad):
        raise MappingError(f"speaker rows {bad.tolist()} not in the base label space")
    return CMSoftmaxHead(Tensor(base.W.data[idx].copy(), requires_grad=True), base.s, base.m1, base.m2)


def speaker_mapping(base_speakers: list, subset_speakers: list) -> list[int]:
    pos = {s: i for i, s in enumerate(base_speakers)}
    missing = [s for s in subset_speakers if s not in pos]
    if missing:
        raise MappingError(f"speakers {missing[:5]} are not in the stage-1 label space")
    return [pos[s] for s in subset_speakers]


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, model: SpeakerNet, head: CMSoftmaxHead | None, meta: dict, opt: OptimizerState | None = None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if head is not None:
        tensors["classifier.weight"] = head.W.data
    meta = dict(meta, architecture=model.config_dict())
    if head is not None:
        meta["head"] = {"s": head.s, "m1": head.m1, "m2": head.m2}
    if opt is not None:
        meta["optimizer"] = {"lr": opt.lr, "momentum": opt.momentum, "min_lr": opt.min_lr}
        tensors.update({f"opt.velocity.{k}": v for k, v in opt.velocity.items()})
    gc.save_container(path, tensors, meta)


def load_checkpoint(path):
    """Return (model, head or None, metadata, optimizer state or None)."""
    tensors, meta = gc.load_container(path)
    arch = meta["architecture"]
    model = build_model(arch["kind"], arch["config"], dtype=arch.get("dtype", "float64"))
    if arch.get("fused"):
        from .nets import reparameterize

        model.eval()
        reparameterize(model)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    head = None
    if "classifier.weight" in tensors:
        h = meta.get("head", {})
        head = CMSoftmaxHead(tensors["classifier.weight"], h.get("s", 32.0), h.get("m1", 0.0), h.get("m2", 0.0))
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        vel = {k[len("opt.velocity."):]: v for k, v in tensors.items() if k.startswith("opt.velocity.")}
        opt = OptimizerState(o["lr"], o["momentum"], o["min_lr"], vel)
    return model, head, meta, opt


# -- the loop ------------------------------------------------------------------------


def trainable(model: SpeakerNet, head: CMSoftmaxHead) -> dict:
    params = {f"model.{k}": p for k, p in model.named_parameters()}
    params["classifier.weight"] = head.W
    return params


def validation_loss(model, head, corpus: TrainCorpus, cfg: StageConfig, dtype) -> float:
    if not corpus.valid_ids:
        return math.nan
    rng = np.random.default_rng([cfg.seed, cfg.stage, 10**6])
    chunks = [sample_chunk(corpus.feats[u], cfg.chunk_frames, rng) for u in corpus.valid_ids]
    labels = np.asarray([corpus.labels[u] for u in corpus.valid_ids], dtype=np.int64)
    model.eval()
    total = 0.0
    for i in range(0, len(chunks), cfg.batch_size):
        x = np.stack(chunks[i : i + cfg.batch_size]).astype(dtype)
        loss = cm_softmax_loss(model(x), labels[i : i + cfg.batch_size], head)
        total += float(loss.data) * len(x)
    model.train()
    return total / len(chunks)


@dataclass
class StageResult:
    model: SpeakerNet
    head: CMSoftmaxHead
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    history: list
    iterations: int


def format_log(**fields) -> str:
    return " ".join(f"{k}={float(v)!r}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items())


def parse_log(lines) -> list[dict]:
    out = []
    for line in lines:
        rec = {}
        for tok in line.split():
            k, _, v = tok.partition("=")
            rec[k] = int(v) if k == "iter" else float(v)
        out.append(rec)
    return out


def run_stage(
    cfg: StageConfig,
    corpus: TrainCorpus,
    model: SpeakerNet,
    head: CMSoftmaxHead,
    ckpt_dir=None,
    log_path=None,
    extra_meta: dict | None = None,
) -> StageResult:
    cfg.validate()
    dtype = model.dtype
    head.W.data = head.W.data.astype(dtype, copy=False)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.min_lr)
    sched = PlateauScheduler(cfg.lr, cfg.validate_every, cfg.patience, cfg.factor, cfg.min_lr)
    params = trainable(model, head)
    meta = dict(extra_meta or {}, stage=cfg.stage, speakers=list(corpus.speakers), stage_config=asdict(cfg))
    history, best_path, last_path = [], None, None
    logf = open(log_path, "a") if log_path is not None else None

    def emit(line):
        history.append(line)
        if logf:
            logf.write(line + "\n")
            logf.flush()
        log.info(line)

    def checkpoint(it, tag):
        if ckpt_dir is None:
            return None
        path = ckpt_dir / f"stage{cfg.stage}_{tag}.ckpt"
        save_checkpoint(path, model, head, dict(meta, iteration=it, best_val=sched.best_metric), opt)
        return path

    model.train()
    it = 0
    try:
        for it, (x, y) in enumerate(BatchLoader(corpus, cfg, dtype)):
            m1, m2 = margin_at(cfg.m1, it), margin_at(cfg.m2, it)
            head.set_margins(m1, m2)
            try:
                with Tape() as tape:
                    loss = cm_softmax_loss(model(x), y, head)
                tape.backward(loss)
            except NonFiniteError as err:
                raise NonFiniteError(f"stage {cfg.stage} iter {it}: {err} (lr={opt.lr}, m1={m1}, m2={m2})") from err
            grads = {k: p.grad for k, p in params.items()}
            sgd_step(params, grads, opt)
            for p in params.values():
                p.grad = None
            if it % cfg.log_every == 0:
                emit(format_log(iter=it, loss=float(loss.data), lr=opt.lr, m1=m1, m2=m2))
            if (it + 1) % cfg.validate_every == 0:
                val = validation_loss(model, head, corpus, cfg, dtype)
                prev_best = sched.best_metric
                opt.lr = plateau_update(sched, val)
                emit(format_log(iter=it + 1, val_loss=val, lr=opt.lr, m1=m1, m2=m2))
                last_path = checkpoint(it + 1, f"iter{it + 1}")
                if sched.best_metric < prev_best and ckpt_dir is not None:
                    best_path = ckpt_dir / f"stage{cfg.stage}_best.ckpt"
                    best_path.write_bytes(last_path.read_bytes())
                if sched.exhausted:
                    emit(f"iter={it + 1} stop=lr_floor")
                    break
        else:
            it = cfg.max_iters
    finally:
        if logf:
            logf.close()
    if cfg.max_iters == 0 or last_path is None:
        last_path = checkpoint(it, "last")
        best_path = best_path or last_path
    return StageResult(model, head, best_path, last_path, history, it)


def refine_init(base_checkpoint, subset_speakers: list):
    """Stage-2 start: backbone from the base checkpoint, classifier rows for ``subset_speakers``."""
    model, head, meta, _ = load_checkpoint(base_checkpoint)
    if head is None:
        raise ConfigError(f"{base_checkpoint} has no classifier weights")
    mapping = speaker_mapping(meta["speakers"], subset_speakers)
    return model, transplant_classifier(head, mapping)

