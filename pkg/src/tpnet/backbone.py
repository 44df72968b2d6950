"""Toy-scale residual backbones exposing the res2-res5 stage features.

Two flavours share one bottleneck design:

* ``conv3d`` -- an inflated 3D ResNet (slow-only style). Temporal kernels are
  3x1x1 on the first conv of a block where the stage's temporal kernel is 3,
  and there is no temporal striding anywhere.
* ``conv2d_segments`` -- a plain 2D ResNet run independently on each TSN
  segment. Its stage features are stacked along a synthetic time axis so the
  pyramid sees a (batch, channel, segment, h, w) tensor like the 3D flavour.
"""

from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericError, ShapeError

KINDS = ("conv3d", "conv2d_segments")
STAGE_IDS = (2, 3, 4, 5)
STAGE_STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}
EXPANSION = 4
ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU, "softplus": nn.Softplus}


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "conv3d"
    depth_blocks: Sequence[int] = (1, 1, 1, 1)
    base_channels: int = 8
    temporal_kernels: Sequence[int] = (1, 1, 3, 3)
    input_frames: int = 8
    input_size: int = 32
    in_channels: int = 3
    # smooth choices exist for finite-difference checks, where ReLU kinks dominate
    activation: str = "relu"

    def __post_init__(self):
        # lists arriving from config files are normalised to tuples
        object.__setattr__(self, "depth_blocks", tuple(self.depth_blocks))
        object.__setattr__(self, "temporal_kernels", tuple(self.temporal_kernels))

    @classmethod
    def full_width(cls, kind="conv3d"):
        """The ResNet-50 layout: 3/4/6/3 blocks, 64 base channels, 8x224x224 input."""
        return cls(kind=kind, depth_blocks=(3, 4, 6, 3), base_channels=64,
                   input_frames=8, input_size=224)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"backbone.{sorted(unknown)[0]}", "unknown key")
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self):
        return {
            "kind": self.kind,
            "depth_blocks": list(self.depth_blocks),
            "base_channels": self.base_channels,
            "temporal_kernels": list(self.temporal_kernels),
            "input_frames": self.input_frames,
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "activation": self.activation,
        }

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError("backbone.kind", f"expected one of {KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError("backbone.activation", f"expected one of {sorted(ACTIVATIONS)}")
        if len(self.depth_blocks) != 4:
            raise ConfigError("backbone.depth_blocks",
                              f"needs 4 entries (res2-res5), got {len(self.depth_blocks)}")
        if any(int(b) != b or b < 1 for b in self.depth_blocks):
            raise ConfigError("backbone.depth_blocks", "entries must be positive ints")
        if len(self.temporal_kernels) != 4:
            raise ConfigError("backbone.temporal_kernels",
                              f"needs 4 entries, got {len(self.temporal_kernels)}")
        if any(k not in (1, 3) for k in self.temporal_kernels):
            raise ConfigError("backbone.temporal_kernels", "entries must be 1 or 3")
        for name in ("base_channels", "input_frames", "input_size", "in_channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"backbone.{name}", f"must be a positive int, got {value!r}")
        if self.input_size % 32:
            raise ConfigError("backbone.input_size", "must be divisible by 32")
        return self

    def stage_channels(self, stage_id):
        return self.base_channels * 2 ** (stage_id - 2) * EXPANSION

    def temporal_rf(self, stage_id):
        """Temporal receptive field (input frames) of a stage's output."""
        if self.kind == "conv2d_segments":
            return 1
        n = sum(self.depth_blocks[s - 2] for s in STAGE_IDS
                if s <= stage_id and self.temporal_kernels[s - 2] == 3)
        return 1 + 2 * n


@dataclass
class FeatureMap:
    """A (batch, channel, time, height, width) feature plus stage metadata."""

    data: torch.Tensor
    stage_id: int
    spatial_stride: int
    temporal_rf: int = 1

    def __post_init__(self):
        if self.data.dim() != 5:
            raise ShapeError(f"FeatureMap needs a rank-5 tensor, got shape {tuple(self.data.shape)}")
        if any(s <= 0 for s in self.data.shape):
            raise ShapeError(f"FeatureMap dimensions must be positive, got {tuple(self.data.shape)}")

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def time(self):
        return self.data.shape[2]

    def with_data(self, data):
        return FeatureMap(data, self.stage_id, self.spatial_stride, self.temporal_rf)


@dataclass
class StagePyramid:
    levels: List[FeatureMap] = field(default_factory=list)

    def __post_init__(self):
        ids = [f.stage_id for f in self.levels]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ShapeError(f"pyramid stage ids must be strictly increasing, got {ids}")
        if len({f.data.shape[0] for f in self.levels}) > 1:
            raise ShapeError("pyramid levels disagree on batch size")

    def __getitem__(self, stage_id):
        for f in self.levels:
            if f.stage_id == stage_id:
                return f
        raise KeyError(stage_id)

    def __contains__(self, stage_id):
        return any(f.stage_id == stage_id for f in self.levels)

    def __len__(self):
        return len(self.levels)

    @property
    def stage_ids(self):
        return [f.stage_id for f in self.levels]


def _conv(dims, cin, cout, kt, k, stride=1):
    if dims == 3:
        return nn.Conv3d(cin, cout, (kt, k, k), stride=(1, stride, stride),
                         padding=(kt // 2, k // 2, k // 2), bias=False)
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False)


def _norm(dims, c):
    return nn.BatchNorm3d(c) if dims == 3 else nn.BatchNorm2d(c)


class Bottleneck(nn.Module):
    """1x1 (or 3x1x1) -> 1x3x3 (strided) -> 1x1 bottleneck with 4x expansion."""

    def __init__(self, inplanes, planes, stride=1, temporal_kernel=1, dims=3, act=nn.ReLU):
        super().__init__()
        self.conv1 = _conv(dims, inplanes, planes, temporal_kernel, 1)
        self.bn1 = _norm(dims, planes)
        self.conv2 = _conv(dims, planes, planes, 1, 3, stride)
        self.bn2 = _norm(dims, planes)
        self.conv3 = _conv(dims, planes, planes * EXPANSION, 1, 1)
        self.bn3 = _norm(dims, planes * EXPANSION)
        self.relu = act()
        self.downsample = None
        if stride != 1 or inplanes != planes * EXPANSION:
            self.downsample = nn.Sequential(
                _conv(dims, inplanes, planes * EXPANSION, 1, 1, stride),
                _norm(dims, planes * EXPANSION))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class Backbone(nn.Module):
    """ResNet trunk with res2-res5 stages and a GAP + dropout + fc head.

    ``forward`` takes clips laid out frame-first, (B, T, C, H, W), for either
    kind; the stage methods take each kind's native layout.
    """

    def __init__(self, spec: BackboneSpec, num_classes: int, dropout: float = 0.5):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.num_classes = num_classes
        self.dims = dims = 3 if spec.kind == "conv3d" else 2
        base = spec.base_channels
        if dims == 3:
            self.conv1 = nn.Conv3d(spec.in_channels, base, (1, 7, 7), stride=(1, 2, 2),
                                   padding=(0, 3, 3), bias=False)
            self.pool1 = nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        else:
            self.conv1 = nn.Conv2d(spec.in_channels, base, 7, stride=2, padding=3, bias=False)
            self.pool1 = nn.MaxPool2d(3, stride=2, padding=1)
        self.bn1 = _norm(dims, base)
        act = ACTIVATIONS[spec.activation]
        self.relu = act()

        inplanes = base
        stages = []
        for i, stage_id in enumerate(STAGE_IDS):
            planes = base * 2 ** i
            stride = 1 if stage_id == 2 else 2
            blocks = []
            for b in range(spec.depth_blocks[i]):
                blocks.append(Bottleneck(inplanes, planes, stride if b == 0 else 1,
                                         spec.temporal_kernels[i], dims, act))
                inplanes = planes * EXPANSION
            stages.append(nn.Sequential(*blocks))
        self.res2, self.res3, self.res4, self.res5 = stages

        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(inplanes, num_classes)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.fc.weight, std=0.01)
        nn.init.zeros_(self.fc.bias)

    @property
    def out_channels(self):
        return self.fc.in_features

    def _check_input(self, x, channel_dim):
        if not x.is_meta and not torch.isfinite(x).all():
            raise NumericError("backbone input contains non-finite values")
        if x.shape[channel_dim] != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} input channels, "
                             f"got {x.shape[channel_dim]}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"spatial side must be divisible by 32, got {h}x{w}")

    def _trunk(self, x):
        x = self.pool1(self.relu(self.bn1(self.conv1(x))))
        outs = []
        for stage in (self.res2, self.res3, self.res4, self.res5):
            x = stage(x)
            outs.append(x)
        return outs

    def _pyramid(self, tensors):
        return StagePyramid([
            FeatureMap(t, sid, STAGE_STRIDES[sid], self.spec.temporal_rf(sid))
            for sid, t in zip(STAGE_IDS, tensors)])

    def forward_stages(self, clips):
        """clips: (B, C, T, H, W) for the 3D kind."""
        if self.dims != 3:
            raise ShapeError("forward_stages needs a conv3d backbone; use forward_stages_2d")
        if clips.dim() != 5:
            raise ShapeError(f"expected (B, C, T, H, W), got {tuple(clips.shape)}")
        self._check_input(clips, 1)
        return self._pyramid(self._trunk(clips))

    def forward_stages_2d(self, segments):
        """segments: (B, S, C, H, W); returns features with time = S."""
        if self.dims != 2:
            raise ShapeError("forward_stages_2d needs a conv2d_segments backbone")
        if segments.dim() != 5 or segments.shape[1] < 1:
            raise ShapeError(f"expected (B, S, C, H, W), got {tuple(segments.shape)}")
        self._check_input(segments, 2)
        b, s = segments.shape[:2]
        outs = self._trunk(segments.reshape(b * s, *segments.shape[2:]))
        stacked = [o.reshape(b, s, *o.shape[1:]).transpose(1, 2) for o in outs]
        return self._pyramid(stacked)

    def stages(self, clips_btchw):
        if self.dims == 3:
            return self.forward_stages(clips_btchw.transpose(1, 2))
        return self.forward_stages_2d(clips_btchw)

    def head(self, res5):
        x = res5.mean(dim=(2, 3, 4))
        return self.fc(self.dropout(x))

    def forward(self, clips_btchw):
        return self.head(self.stages(clips_btchw)[5].data)


def build_backbone(spec: BackboneSpec, num_classes: int, seed: int = 0, dropout: float = 0.5,
                   device=None) -> Backbone:
    """Build a backbone whose initial weights depend only on ``seed``."""
    if num_classes < 2:
        raise ConfigError("num_classes", f"must be >= 2, got {num_classes}")
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if device is None:
            return Backbone(spec, num_classes, dropout)
        with torch.device(device):
            return Backbone(spec, num_classes, dropout)


def forward_stages(backbone: Backbone, clips: torch.Tensor) -> StagePyramid:
    return backbone.forward_stages(clips)


def forward_stages_2d(backbone: Backbone, segments: torch.Tensor) -> StagePyramid:
    return backbone.forward_stages_2d(segments)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def infer_stage_shapes(spec: BackboneSpec, batch: int, frames: Optional[int] = None,
                       size: Optional[int] = None):
    """Shape of each stage output from stride arithmetic alone.

    Returns ``{stage_id: (B, C, T, H, W)}`` without building a network.
    """
    t = spec.input_frames if frames is None else frames
    n = spec.input_size if size is None else size
    n = _conv_out(n, 7, 2, 3)   # conv1
    n = _conv_out(n, 3, 2, 1)   # pool1
    shapes = {}
    for stage_id in STAGE_IDS:
        if stage_id != 2:
            n = _conv_out(n, 3, 2, 1)
        shapes[stage_id] = (batch, spec.stage_channels(stage_id), t, n, n)
    return shapes


def inflate_kernel(kernel2d, t: int):
    """Inflate an (out, in, k, k) kernel to (out, in, t, k, k).

    The kernel is copied ``t`` times along time and rescaled by 1/t, so that a
    temporally constant input produces the same response as the 2D kernel.
    Works on numpy arrays and torch tensors alike.
    """
    if int(t) != t or t < 1:
        raise ValueError(f"inflation size t must be an int >= 1, got {t!r}")
    if kernel2d.ndim != 4:
        raise ValueError(f"expected an (out, in, k, k) kernel, got shape {tuple(kernel2d.shape)}")
    if isinstance(kernel2d, torch.Tensor):
        return kernel2d.unsqueeze(2).repeat(1, 1, t, 1, 1) / t
    k = np.asarray(kernel2d)
    return np.repeat(k[:, :, None], t, axis=2) / t


@torch.no_grad()
def inflate_from_2d(net3d: Backbone, net2d: Backbone) -> Backbone:
    """Copy a 2D backbone's weights into a 3D one, inflating every conv kernel."""
    src = dict(net2d.named_modules())
    for name, m3 in net3d.named_modules():
        m2 = src.get(name)
        if isinstance(m3, nn.Conv3d):
            if not isinstance(m2, nn.Conv2d):
                raise ShapeError(f"no 2D conv to inflate into {name!r}")
            t = m3.weight.shape[2]
            # a 1xkxk 3D kernel holds the 2D kernel as is; a txkxk one gets copies
            m3.weight.copy_(inflate_kernel(m2.weight, t))
        elif isinstance(m3, nn.BatchNorm3d):
            for attr in ("weight", "bias", "running_mean", "running_var"):
                getattr(m3, attr).copy_(getattr(m2, attr))
        elif isinstance(m3, nn.Linear):
            m3.weight.copy_(m2.weight)
            m3.bias.copy_(m2.bias)
    return net3d


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = [
    "BackboneSpec", "FeatureMap", "StagePyramid", "Backbone", "Bottleneck",
    "build_backbone", "forward_stages", "forward_stages_2d", "infer_stage_shapes",
    "inflate_kernel", "inflate_from_2d", "count_parameters", "STAGE_STRIDES",
]
