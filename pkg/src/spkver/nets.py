"""ResNet-bottleneck and RepVGG embedding extractors on log-mel "images".

Input features [N, T, D] are treated as a single-channel image laid out as
[N, 1, D(freq), T(time)]. Every stage after the first halves both axes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, LengthError, ShapeError, StateError
from .gradcore import Tensor


class Module:
    """Minimal parameter container: named params, buffers and child modules."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def named_parameters(self, prefix=""):
        for k, p in self.params.items():
            yield prefix + k, p
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, b in self.buffers.items():
            yield prefix + k, b
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_parameters()}
        state.update({k: b for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        if missing:
            raise ShapeError(f"state is missing {sorted(missing)[:5]}")
        for k, p in expected.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for k, b in buffers.items():
            b[...] = state[k]


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, pad=0, bias=False, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.pad = stride, pad
        self.params["weight"] = Tensor(
            _he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel, dtype), requires_grad=True
        )
        if bias:
            self.params["bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return gc.conv2d(x, self.params["weight"], self.params.get("bias"), self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["weight"] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def __call__(self, x):
        return gc.batchnorm2d(
            x,
            self.params["weight"],
            self.params["bias"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )

    def affine(self):
        """(scale, shift) of the eval-mode transform ``x * scale + shift``."""
        std = np.sqrt(self.buffers["running_var"] + self.eps)
        scale = self.params["weight"].data / std
        return scale, self.params["bias"].data - self.buffers["running_mean"] * scale


class Linear(Module):
    def __init__(self, din, dout, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = Tensor(
            (rng.standard_normal((dout, din)) * np.sqrt(1.0 / din)).astype(dtype), requires_grad=True
        )
        if bias:
            self.params["bias"] = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return gc.linear(x, self.params["weight"], self.params.get("bias"))


# -- ResNet ------------------------------------------------------------------


@dataclass
class ResNetConfig:
    base_channels: int = 64
    block_counts: tuple = (3, 4, 14, 3)
    embedding_dim: int = 256
    feat_dim: int = 64
    stem_stride: int = 1
    expansion: int = 4

    def validate(self):
        if len(self.block_counts) != 4 or any(int(b) < 1 for b in self.block_counts):
            raise ConfigError(f"block_counts must be four counts >= 1, got {self.block_counts}")
        if self.base_channels < 1 or self.embedding_dim < 1 or self.feat_dim < 1:
            raise ConfigError("channel, embedding and feature sizes must be positive")
        if self.expansion != 4:
            raise ConfigError("bottleneck expansion is fixed at 4")
        if self.stem_stride not in (1, 2):
            raise ConfigError("stem_stride must be 1 or 2")


class Bottleneck(Module):
    def __init__(self, cin, planes, stride, expansion, rng, dtype):
        super().__init__()
        cout = planes * expansion
        c = self.children
        c["conv1"] = Conv2d(cin, planes, 1, rng=rng, dtype=dtype)
        c["bn1"] = BatchNorm2d(planes, dtype=dtype)
        c["conv2"] = Conv2d(planes, planes, 3, stride, 1, rng=rng, dtype=dtype)
        c["bn2"] = BatchNorm2d(planes, dtype=dtype)
        c["conv3"] = Conv2d(planes, cout, 1, rng=rng, dtype=dtype)
        c["bn3"] = BatchNorm2d(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            c["proj"] = Conv2d(cin, cout, 1, stride, rng=rng, dtype=dtype)
            c["proj_bn"] = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x):
        c = self.children
        out = gc.relu(c["bn1"](c["conv1"](x)))
        out = gc.relu(c["bn2"](c["conv2"](out)))
        out = c["bn3"](c["conv3"](out))
        short = c["proj_bn"](c["proj"](x)) if "proj" in c else x
        return gc.relu(gc.add(out, short))


class ResNet(Module):
    kind = "resnet"

    def __init__(self, cfg: ResNetConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.children["stem"] = Conv2d(1, cfg.base_channels, 3, cfg.stem_stride, 1, rng=rng, dtype=dtype)
        self.children["stem_bn"] = BatchNorm2d(cfg.base_channels, dtype=dtype)
        cin = cfg.base_channels
        for s, n in enumerate(cfg.block_counts):
            planes = cfg.base_channels * 2**s
            for i in range(int(n)):
                stride = 2 if (s > 0 and i == 0) else 1
                self.children[f"layer{s + 1}.{i}"] = Bottleneck(cin, planes, stride, cfg.expansion, rng, dtype)
                cin = planes * cfg.expansion
        self.out_channels = cin
        self.total_stride = cfg.stem_stride * 8

    def __call__(self, x):
        out = gc.relu(self.children["stem_bn"](self.children["stem"](x)))
        for name, child in self.children.items():
            if name.startswith("layer"):
                out = child(out)
        return out

    def layer_count(self) -> int:
        """Weighted layers in the naming convention: stem + 3 per bottleneck + embedding head.

        Projection shortcuts are not counted.
        """
        return 1 + 3 * sum(int(n) for n in self.cfg.block_counts) + 1


# -- RepVGG ------------------------------------------------------------------


@dataclass
class RepVGGConfig:
    base_channels: int = 64
    stage_depths: tuple = (1, 4, 6, 16, 1)
    width_a: float = 2.5
    width_b: float = 5.0
    embedding_dim: int = 256
    feat_dim: int = 64

    def validate(self):
        if len(self.stage_depths) != 5 or any(int(d) < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be five counts >= 1, got {self.stage_depths}")
        if self.width_a <= 0 or self.width_b <= 0:
            raise ConfigError("width multipliers must be positive")
        if self.base_channels < 1 or self.embedding_dim < 1 or self.feat_dim < 1:
            raise ConfigError("channel, embedding and feature sizes must be positive")

    def stage_widths(self) -> list[int]:
        b, a = self.base_channels, self.width_a
        return [
            min(b, int(b * a)),
            int(b * a),
            int(2 * b * a),
            int(4 * b * a),
            int(8 * b * self.width_b),
        ]


class RepVGGBlock(Module):
    def __init__(self, cin, cout, stride, rng, dtype):
        super().__init__()
        self.cin, self.cout, self.stride = cin, cout, stride
        self.fused = False
        c = self.children
        c["dense"] = Conv2d(cin, cout, 3, stride, 1, rng=rng, dtype=dtype)
        c["dense_bn"] = BatchNorm2d(cout, dtype=dtype)
        c["one"] = Conv2d(cin, cout, 1, stride, 0, rng=rng, dtype=dtype)
        c["one_bn"] = BatchNorm2d(cout, dtype=dtype)
        if cin == cout and stride == 1:
            c["identity_bn"] = BatchNorm2d(cout, dtype=dtype)

    @property
    def num_branches(self) -> int:
        return 1 if self.fused else (3 if "identity_bn" in self.children else 2)

    def __call__(self, x):
        c = self.children
        if self.fused:
            return gc.relu(c["reparam"](x))
        out = gc.add(c["dense_bn"](c["dense"](x)), c["one_bn"](c["one"](x)))
        if "identity_bn" in c:
            out = gc.add(out, c["identity_bn"](x))
        return gc.relu(out)

    def fused_kernel(self):
        """Single 3x3 kernel and bias equivalent to the eval-mode branch sum."""
        c = self.children
        scale, shift = c["dense_bn"].affine()
        kernel = c["dense"].params["weight"].data * scale[:, None, None, None]
        bias = shift.copy()
        scale, shift = c["one_bn"].affine()
        one = c["one"].params["weight"].data * scale[:, None, None, None]
        kernel[:, :, 1:2, 1:2] += one
        bias += shift
        if "identity_bn" in c:
            scale, shift = c["identity_bn"].affine()
            idx = np.arange(self.cout)
            kernel[idx, idx, 1, 1] += scale
            bias += shift
        return kernel, bias

    def fuse(self):
        kernel, bias = self.fused_kernel()
        conv = Conv2d(self.cin, self.cout, 3, self.stride, 1, bias=True, dtype=kernel.dtype)
        conv.params["weight"].data = kernel
        conv.params["bias"].data = bias
        conv.train(self.training)
        self.children = {"reparam": conv}
        self.fused = True


class RepVGG(Module):
    kind = "repvgg"

    def __init__(self, cfg: RepVGGConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.fused = False
        rng = np.random.default_rng(seed)
        cin = 1
        for s, (depth, width) in enumerate(zip(cfg.stage_depths, cfg.stage_widths())):
            for i in range(int(depth)):
                stride = 2 if (s > 0 and i == 0) else 1
                self.children[f"stage{s}.{i}"] = RepVGGBlock(cin, width, stride, rng, dtype)
                cin = width
        self.out_channels = cin
        self.total_stride = 16

    def __call__(self, x):
        for child in self.children.values():
            x = child(x)
        return x

    def blocks(self):
        return list(self.children.values())


# -- pooling and the full extractor -------------------------------------------


def gsp_pool(fmap: Tensor, eps: float = 1e-10) -> Tensor:
    """Global statistics pooling: per (channel, freq) mean and std over time.

    Output is [N, 2*C*F] laid out as [means | stds]. The std is exact in the
    forward pass; its gradient uses max(std, sqrt(eps)) so a constant map
    does not produce an infinite derivative.
    """
    if fmap.data.ndim != 4 or fmap.shape[3] < 1:
        raise ShapeError(f"gsp_pool expects [N, C, F, T>=1], got {fmap.shape}")
    N, C, F, T = fmap.shape
    x = fmap.data
    mean = x.mean(axis=3)
    centered = x - mean[..., None]
    var = np.mean(centered**2, axis=3)
    std = np.sqrt(var)
    out = np.concatenate([mean.reshape(N, -1), std.reshape(N, -1)], axis=1)

    def backward(g):
        gm = g[:, : C * F].reshape(N, C, F, 1)
        gs = g[:, C * F :].reshape(N, C, F, 1)
        denom = np.maximum(std, np.sqrt(eps))[..., None]
        return (np.broadcast_to(gm / T, x.shape) + gs * centered / (T * denom),)

    return gc.make_op(out, (fmap,), backward, "gsp_pool")


class SpeakerNet(Module):
    """Backbone + statistics pooling + linear embedding head."""

    def __init__(self, backbone: Module, embedding_dim: int, feat_dim: int, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.children["backbone"] = backbone
        self.freq_out = -(-feat_dim // backbone.total_stride)
        self.feat_dim = feat_dim
        pooled = 2 * backbone.out_channels * self.freq_out
        self.children["head"] = Linear(pooled, embedding_dim, rng=np.random.default_rng(seed + 7919), dtype=dtype)
        self.embedding_dim = embedding_dim
        self.dtype = np.dtype(dtype)

    @property
    def backbone(self):
        return self.children["backbone"]

    @property
    def head(self):
        return self.children["head"]

    @property
    def kind(self):
        return self.backbone.kind

    @property
    def fused(self):
        return getattr(self.backbone, "fused", False)

    @property
    def min_frames(self) -> int:
        return self.backbone.total_stride

    def config_dict(self) -> dict:
        return {"kind": self.kind, "config": asdict(self.backbone.cfg), "fused": self.fused, "dtype": self.dtype.name}

    def __call__(self, feats) -> Tensor:
        return embed(self, gsp_pool(forward_frames(self, feats)))


def _to_input(feats, feat_dim, dtype) -> Tensor:
    if isinstance(feats, Tensor):
        return feats
    x = np.asarray(feats, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != feat_dim:
        raise ShapeError(f"expected features [N, T, {feat_dim}], got {x.shape}")
    return Tensor(np.ascontiguousarray(x.transpose(0, 2, 1)[:, None]))


def forward_frames(model: SpeakerNet, feats) -> Tensor:
    """[N, T, D] features -> frame-level map [N, C, ceil(D/s), ceil(T/s)]."""
    x = _to_input(feats, model.feat_dim, model.dtype)
    T = x.shape[3]
    if T < model.min_frames:
        raise LengthError(f"need at least {model.min_frames} frames, got {T}")
    return model.backbone(x)


def embed(model: SpeakerNet, pooled: Tensor) -> Tensor:
    expected = model.head.params["weight"].shape[1]
    if pooled.data.ndim != 2 or pooled.shape[1] != expected:
        raise ShapeError(f"pooled vector has shape {pooled.shape}, head expects {expected}")
    return model.head(pooled)


def build_resnet(cfg: ResNetConfig, seed: int = 0, dtype=np.float64) -> SpeakerNet:
    return SpeakerNet(ResNet(cfg, seed, dtype), cfg.embedding_dim, cfg.feat_dim, seed, dtype)


def build_repvgg(cfg: RepVGGConfig, seed: int = 0, dtype=np.float64) -> SpeakerNet:
    return SpeakerNet(RepVGG(cfg, seed, dtype), cfg.embedding_dim, cfg.feat_dim, seed, dtype)


def build_model(kind: str, config: dict, seed: int = 0, dtype="float64") -> SpeakerNet:
    if kind == "resnet":
        cfg = ResNetConfig(**{**config, "block_counts": tuple(config.get("block_counts", (3, 4, 14, 3)))})
        return build_resnet(cfg, seed, np.dtype(dtype))
    if kind == "repvgg":
        cfg = RepVGGConfig(**{**config, "stage_depths": tuple(config.get("stage_depths", (1, 4, 6, 16, 1)))})
        return build_repvgg(cfg, seed, np.dtype(dtype))
    raise ConfigError(f"unknown architecture {kind!r}")


def reparameterize(model: SpeakerNet) -> SpeakerNet:
    """Fuse every RepVGG block into one 3x3 conv with bias, in place."""
    if model.kind != "repvgg":
        raise StateError("only RepVGG models can be re-parameterized")
    if model.fused:
        raise StateError("model is already fused")
    if model.training:
        raise StateError("re-parameterization requires an eval-mode model")
    for block in model.backbone.blocks():
        block.fuse()
    model.backbone.fused = True
    return model
