"""Run configuration: a YAML file validated against dataclass schemas.

Unknown keys and type mismatches are reported with the line they occur on.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class PathsConfig:
    workdir: str = "work"
    corpus: str | None = None


@dataclass
class SynthConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 10
    duration_s: float = 6.0
    indomain_speakers: int = 10
    indomain_utts: int = 10
    eval_enroll_utts: int = 8
    eval_test_utts: int = 8
    dev_enroll_utts: int = 4
    dev_test_utts: int = 4
    valid_fraction: float = 0.1
    n_target: int = 500
    n_nontarget: int = 500
    n_dev_target: int = 150
    n_dev_nontarget: int = 600


@dataclass
class FrontendSection:
    num_mel_bins: int = 64
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    low_freq: float = 20.0
    high_freq: float = 3700.0
    fft_size: int = 256
    window: str = "hamming"
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    cmn_window: int = 300
    cache: bool = True


@dataclass
class VadSection:
    energy_threshold: float = 5.0
    energy_mean_scale: float = 0.5
    proportion_threshold: float = 0.6
    frames_context: int = 2


@dataclass
class AugmentSection:
    copies: int = 0
    kinds: list = field(default_factory=lambda: ["reverb", "music", "noise", "babble"])
    rir_dir: str | None = None
    music_dir: str | None = None
    noise_dir: str | None = None


@dataclass
class ResNetSection:
    base_channels: int = 4
    block_counts: list = field(default_factory=lambda: [1, 1, 1, 1])
    embedding_dim: int = 128
    stem_stride: int = 2


@dataclass
class RepVGGSection:
    base_channels: int = 8
    stage_depths: list = field(default_factory=lambda: [1, 1, 1, 1, 1])
    width_a: float = 2.5
    width_b: float = 5.0
    embedding_dim: int = 128


@dataclass
class ModelConfig:
    kind: str = "resnet"
    dtype: str = "float32"
    resnet: ResNetSection = field(default_factory=ResNetSection)
    repvgg: RepVGGSection = field(default_factory=RepVGGSection)


@dataclass
class ScheduleSection:
    kind: str = "linear"
    start_value: float = 0.0
    end_value: float = 0.0
    duration_iters: int = 1


@dataclass
class StageSection:
    preset: str | None = None
    batch_size: int = 16
    chunk_frames: int = 200
    max_iters: int = 600
    lr: float = 0.05
    momentum: float = 0.9
    min_lr: float = 1e-6
    validate_every: int = 100
    patience: int = 2
    factor: float = 0.5
    log_every: int = 10
    m1: ScheduleSection = field(default_factory=lambda: ScheduleSection("linear", 0.0, 0.2, 150))
    m2: ScheduleSection = field(default_factory=lambda: ScheduleSection("linear", 0.0, 0.1, 150))


def _stage2_default():
    return StageSection(
        chunk_frames=300,
        max_iters=200,
        lr=0.01,
        validate_every=50,
        m1=ScheduleSection("exponential", 0.2, 0.8, 100),
        m2=ScheduleSection("constant", 0.0, 0.0, 1),
    )


@dataclass
class DcfSection:
    p_targets: list = field(default_factory=lambda: [0.01, 0.005])
    c_miss: float = 1.0
    c_fa: float = 1.0


@dataclass
class CalibrationSection:
    prior: float = 0.01


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    vad: VadSection = field(default_factory=VadSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    s: float = 32.0
    stage1: StageSection = field(default_factory=StageSection)
    stage2: StageSection = field(default_factory=_stage2_default)
    dcf: DcfSection = field(default_factory=DcfSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)


def _line_index(node, prefix=(), out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = prefix + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_index(v, key, out)
    return out


def _where(lines, keypath, source):
    line = lines.get(tuple(keypath))
    dotted = ".".join(keypath)
    return f"{source}:{line}: {dotted}" if line else f"{source}: {dotted}"


def _coerce(tp, value, keypath, lines, source, default=None):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, keypath, lines, source, default)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        return _coerce(next(a for a in args if a is not type(None)), value, keypath, lines, source)
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (str, bool) and isinstance(value, tp):
        return value
    if tp is list and isinstance(value, list):
        return value
    raise ConfigError(f"{_where(lines, keypath, source)}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def _build(cls, data, keypath, lines, source, base=None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(lines, keypath, source)}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{_where(lines, list(keypath) + [key], source)}: unknown key")
    base = base if base is not None else cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(
                hints[f.name], data[f.name], list(keypath) + [f.name], lines, source, getattr(base, f.name)
            )
        else:
            kwargs[f.name] = getattr(base, f.name)
    return cls(**kwargs)


def _set_path(data: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {dotted}: {k} is not a section")
    cur[keys[-1]] = value


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Parse and validate a YAML run config; ``overrides`` are ``dotted.key=value`` strings."""
    data, lines, source = {}, {}, "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from err
        lines = _line_index(node)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        _set_path(data, key.strip(), yaml.safe_load(raw))
    cfg = _build(RunConfig, data, [], lines, source)
    validate(cfg, source)
    return cfg


def validate(cfg: RunConfig, source="<config>"):
    if cfg.model.kind not in ("resnet", "repvgg"):
        raise ConfigError(f"{source}: model.kind must be resnet or repvgg")
    if cfg.model.dtype not in ("float32", "float64"):
        raise ConfigError(f"{source}: model.dtype must be float32 or float64")
    for name in ("stage1", "stage2"):
        st = getattr(cfg, name)
        if st.preset is not None and st.preset not in ("full-stage1", "full-stage2"):
            raise ConfigError(f"{source}: {name}.preset must be full-stage1 or full-stage2")
    if not 0 < cfg.synth.valid_fraction < 1:
        raise ConfigError(f"{source}: synth.valid_fraction must lie in (0, 1)")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
