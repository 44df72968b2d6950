"""Temporal Pyramid Network head.

Pipeline, per forward pass::

    collect_sources -> SpatialModulation -> (auxiliary heads)
        -> TemporalModulation -> aggregate(flow) -> PredictionHead

Levels are always ordered bottom (shallowest / finest time) to top.
"""

import enum
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ACTIVATIONS, BackboneSpec, FeatureMap, StagePyramid, STAGE_IDS
from .errors import ConfigError, ShapeError


class FlowKind(str, enum.Enum):
    ISOLATION = "isolation"
    BOTTOM_UP = "bottom_up"
    TOP_DOWN = "top_down"
    CASCADE = "cascade"
    PARALLEL = "parallel"

    @classmethod
    def parse(cls, value):
        """Accept ``FlowKind`` members and names like 'BottomUp', 'bottom-up', 'bottom_up'."""
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").replace(" ", "").lower()
        for member in cls:
            if member.value.replace("_", "") == key:
                return member
        raise ConfigError("tpn.flow", f"unknown flow {value!r}; "
                          f"expected one of {[m.value for m in cls]}")

    @property
    def title(self):
        return {"isolation": "Isolation", "bottom_up": "BottomUp", "top_down": "TopDown",
                "cascade": "Cascade", "parallel": "Parallel"}[self.value]


def default_alphas(num_levels):
    """Rates that give the top level a time of T/8 and double per level below.

    For two levels this is {4, 8}, for four levels {1, 2, 4, 8}.
    """
    return tuple(max(1, 2 ** (3 - (num_levels - i))) for i in range(1, num_levels + 1))


@dataclass(frozen=True)
class PyramidConfig:
    source_mode: str = "multi_depth"
    stages: Sequence[int] = (4, 5)
    rates: Sequence[int] = ()
    alphas: Optional[Sequence[int]] = None
    flow: FlowKind = FlowKind.PARALLEL
    mod_channels: Optional[int] = None
    lambdas: Optional[Sequence[float]] = None
    dropout: float = 0.5
    # component toggles used by the component ablation
    aux_head: bool = True
    spatial_convs: bool = True
    temporal_modulation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "rates", tuple(self.rates))
        object.__setattr__(self, "flow", FlowKind.parse(self.flow))
        m = self.num_levels
        if self.alphas is None:
            alphas = default_alphas(m) if self.source_mode == "multi_depth" else (1,) * m
        else:
            alphas = tuple(self.alphas)
        object.__setattr__(self, "alphas", alphas)
        lambdas = (0.5,) * max(m - 1, 0) if self.lambdas is None else self.lambdas
        object.__setattr__(self, "lambdas", tuple(float(x) for x in lambdas))

    @property
    def num_levels(self):
        if self.source_mode == "single_depth":
            return len(self.rates)
        return len(self.stages)

    @property
    def effective_alphas(self):
        return self.alphas if self.temporal_modulation else (1,) * self.num_levels

    def validate(self):
        if self.source_mode not in ("single_depth", "multi_depth"):
            raise ConfigError("tpn.source_mode", f"unknown mode {self.source_mode!r}")
        if any(s not in STAGE_IDS for s in self.stages):
            raise ConfigError("tpn.stages", f"unknown stage in {list(self.stages)}; "
                              f"valid ids are {list(STAGE_IDS)}")
        if self.source_mode == "multi_depth":
            if not self.stages:
                raise ConfigError("tpn.stages", "at least one source stage is required")
            if any(b <= a for a, b in zip(self.stages, self.stages[1:])):
                raise ConfigError("tpn.stages", "stages must be strictly increasing")
        else:
            if len(self.stages) != 1:
                raise ConfigError("tpn.stages", "single_depth takes exactly one stage")
            if not self.rates:
                raise ConfigError("tpn.rates", "single_depth needs at least one rate")
            if any(r < 1 for r in self.rates):
                raise ConfigError("tpn.rates", "rates must be positive")
            if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
                raise ConfigError("tpn.rates", "rates must be strictly increasing")
        m = self.num_levels
        if len(self.alphas) != m:
            raise ConfigError("tpn.alphas", f"expected {m} values, got {len(self.alphas)}")
        if any(int(a) != a or a < 1 for a in self.alphas):
            raise ConfigError("tpn.alphas", "alphas must be positive ints")
        if len(self.lambdas) != m - 1:
            raise ConfigError("tpn.lambdas", f"expected {m - 1} values, got {len(self.lambdas)}")
        if any(x < 0 for x in self.lambdas):
            raise ConfigError("tpn.lambdas", "lambdas must be non-negative")
        if self.mod_channels is not None and self.mod_channels < 1:
            raise ConfigError("tpn.mod_channels", "must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("tpn.dropout", "must lie in [0, 1)")
        return self

    def level_times(self, frames):
        """Time length of every level after source collection, for T input frames."""
        if self.source_mode == "single_depth":
            for r in self.rates:
                if frames % r:
                    raise ConfigError("tpn.rates", f"rate {r} does not divide T={frames}")
            return [frames // r for r in self.rates]
        return [frames] * self.num_levels

    def check_frames(self, frames):
        """Raise ConfigError unless T input frames are compatible with rates and alphas."""
        for t, a in zip(self.level_times(frames), self.effective_alphas):
            if t % a:
                raise ConfigError("tpn.alphas", f"alpha {a} does not divide level time {t}")

    def resolve_mod_channels(self, spec: BackboneSpec):
        if self.mod_channels is not None:
            return self.mod_channels
        return spec.stage_channels(max(self.stages)) // 2

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"tpn.{sorted(unknown)[0]}", "unknown key")
        return cls(**d).validate()

    def to_dict(self):
        return {
            "source_mode": self.source_mode,
            "stages": list(self.stages),
            "rates": list(self.rates),
            "alphas": list(self.alphas),
            "flow": self.flow.value,
            "mod_channels": self.mod_channels,
            "lambdas": list(self.lambdas),
            "dropout": self.dropout,
            "aux_head": self.aux_head,
            "spatial_convs": self.spatial_convs,
            "temporal_modulation": self.temporal_modulation,
        }

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class TPNOutput:
    main_logits: torch.Tensor
    aux_logits: List[torch.Tensor] = field(default_factory=list)
    aggregated: List[FeatureMap] = field(default_factory=list)


def _data(f):
    return f.data if isinstance(f, FeatureMap) else f


def collect_sources(pyramid: StagePyramid, cfg: PyramidConfig) -> List[FeatureMap]:
    """Pick the pyramid's source features, bottom to top."""
    for s in cfg.stages:
        if s not in pyramid:
            raise ConfigError("tpn.stages", f"stage res{s} not in pyramid {pyramid.stage_ids}")
    if cfg.source_mode == "multi_depth":
        return [pyramid[s] for s in cfg.stages]
    base = pyramid[cfg.stages[0]]
    cfg.level_times(base.time)
    return [base.with_data(base.data[:, :, ::r]) for r in cfg.rates]


def g_resample(x, delta):
    """Temporal resampling g(F, delta) for an integral or inverse-integral factor.

    delta < 1 max-pools windows of 1/delta frames, delta > 1 repeats every
    frame delta times, delta == 1 returns the input object unchanged.
    """
    fm = x if isinstance(x, FeatureMap) else None
    t = _data(x)
    delta = Fraction(delta).limit_denominator(1 << 16) if isinstance(delta, float) else Fraction(delta)
    if delta <= 0:
        raise ValueError(f"resampling factor must be positive, got {delta}")
    if delta == 1:
        return x
    if delta < 1:
        k = 1 / delta
        if k.denominator != 1:
            raise ValueError(f"non-integral downsampling factor 1/{k}")
        k = int(k)
        if t.shape[2] % k:
            raise ValueError(f"time {t.shape[2]} not divisible by pooling window {k}")
        out = F.max_pool3d(t, (k, 1, 1), (k, 1, 1))
    else:
        if delta.denominator != 1:
            raise ValueError(f"non-integral upsampling factor {delta}")
        out = t.repeat_interleave(int(delta), dim=2)
    return fm.with_data(out) if fm is not None else out


def _match_spatial(x, size):
    """Bring x to spatial ``size`` by max-pooling (down) or nearest repeat (up)."""
    h, w = x.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return x
    if h >= th and w >= tw and h % th == 0 and w % tw == 0:
        return F.max_pool3d(x, (1, h // th, w // tw), (1, h // th, w // tw))
    if th % h == 0 and tw % w == 0:
        return x.repeat_interleave(th // h, dim=3).repeat_interleave(tw // w, dim=4)
    raise ShapeError(f"cannot resample spatial size {(h, w)} to {(th, tw)}")


def _resample_to(src, dst):
    x = g_resample(src, Fraction(dst.shape[2], src.shape[2]))
    if x.shape[1] != dst.shape[1]:
        raise ShapeError(f"channel mismatch in aggregation: {x.shape[1]} vs {dst.shape[1]}")
    return _match_spatial(x, dst.shape[3:])


def _bottom_up(fs):
    out = [fs[0]]
    for i in range(1, len(fs)):
        out.append(fs[i] + _resample_to(out[i - 1], fs[i]))
    return out


def _top_down(fs):
    out = list(fs)
    for i in range(len(fs) - 2, -1, -1):
        out[i] = fs[i] + _resample_to(out[i + 1], fs[i])
    return out


def _parallel(fs):
    out = []
    for i, f in enumerate(fs):
        acc = f
        if i > 0:
            acc = acc + _resample_to(fs[i - 1], f)
        if i < len(fs) - 1:
            acc = acc + _resample_to(fs[i + 1], f)
        out.append(acc)
    return out


def aggregate(features, flow) -> list:
    """Fuse pyramid levels by element-wise addition along one information flow.

    Works on tensors or FeatureMaps (returned in kind). Bottom-up and top-down
    sweep over already-aggregated levels; parallel adds both un-aggregated
    neighbours in one step; cascade is bottom-up applied to top-down's output.
    """
    flow = FlowKind.parse(flow)
    tensors = [_data(f) for f in features]
    if flow is FlowKind.ISOLATION or len(tensors) <= 1:
        out = tensors
    elif flow is FlowKind.BOTTOM_UP:
        out = _bottom_up(tensors)
    elif flow is FlowKind.TOP_DOWN:
        out = _top_down(tensors)
    elif flow is FlowKind.CASCADE:
        out = _bottom_up(_top_down(tensors))
    else:
        out = _parallel(tensors)
    return [f.with_data(t) if isinstance(f, FeatureMap) else t for f, t in zip(features, out)]


class SpatialModulation(nn.Module):
    """Per-level stride-2 1x3x3 conv stacks plus a normalized 1x1x1 projection to ``d`` channels.

    ``downsamples[i]`` is the number of stride-2 convs for level i; the top level
    normally has none and only gets the projection.
    """

    def __init__(self, in_channels, downsamples, d, act=nn.ReLU):
        super().__init__()
        if len(in_channels) != len(downsamples):
            raise ConfigError("tpn.stages", "in_channels/downsamples length mismatch")
        self.downsamples = list(downsamples)
        self.levels = nn.ModuleList()
        for cin, n in zip(in_channels, downsamples):
            layers = []
            for _ in range(n):
                layers += [nn.Conv3d(cin, d, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1), bias=False),
                           nn.BatchNorm3d(d), act()]
                cin = d
            layers += [nn.Conv3d(cin, d, 1, bias=False), nn.BatchNorm3d(d)]
            self.levels.append(nn.Sequential(*layers))

    def forward(self, xs):
        if len(xs) != len(self.levels):
            raise ShapeError(f"expected {len(self.levels)} levels, got {len(xs)}")
        top = xs[-1].shape[-2:]
        for x, n in zip(xs, self.downsamples):
            if n and tuple(x.shape[-2:]) != (top[0] << n, top[1] << n):
                raise ShapeError(f"level of spatial size {tuple(x.shape[-2:])} cannot be brought "
                                 f"to {tuple(top)} with {n} stride-2 convs")
        return [m(x) for m, x in zip(self.levels, xs)]


class TemporalModulation(nn.Module):
    """Per level: 3x1x1 conv (size preserving) with normalization, then temporal max-pool by alpha."""

    def __init__(self, d, alphas, act=nn.ReLU):
        super().__init__()
        self.alphas = list(alphas)
        self.convs = nn.ModuleList(
            nn.Conv3d(d, d, (3, 1, 1), padding=(1, 0, 0), bias=False) for _ in self.alphas)
        self.norms = nn.ModuleList(nn.BatchNorm3d(d) for _ in self.alphas)
        self.act = act()

    @torch.no_grad()
    def reset_identity(self):
        for conv in self.convs:
            conv.weight.zero_()
            idx = torch.arange(conv.weight.shape[0])
            conv.weight[idx, idx, 1, 0, 0] = 1.0
        # running_var = 1 - eps makes the eval-mode norm an exact identity
        for norm in self.norms:
            norm.weight.fill_(1.0)
            norm.bias.zero_()
            norm.running_mean.zero_()
            norm.running_var.fill_(1.0 - norm.eps)

    def forward(self, xs):
        out = []
        for x, conv, norm, a in zip(xs, self.convs, self.norms, self.alphas):
            if x.shape[2] % a:
                raise ConfigError("tpn.alphas", f"alpha {a} does not divide level time {x.shape[2]}")
            y = self.act(norm(conv(x)))
            if a > 1:
                y = F.max_pool3d(y, (a, 1, 1), (a, 1, 1))
            out.append(y)
        return out


class AuxHeads(nn.Module):
    """Global average pool -> dropout -> fc, one head per non-top level."""

    def __init__(self, d, num_heads, num_classes, dropout):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fcs = nn.ModuleList(nn.Linear(d, num_classes) for _ in range(num_heads))

    def forward(self, xs, which=None):
        out = []
        for i, (x, fc) in enumerate(zip(xs, self.fcs)):
            if which is not None and not which[i]:
                out.append(None)
                continue
            out.append(fc(self.dropout(x.mean(dim=(2, 3, 4)))))
        return out


class PredictionHead(nn.Module):
    """Global max-pool every level, concatenate along channels, dropout, fc."""

    def __init__(self, in_features, num_classes, dropout):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(in_features, num_classes)

    def forward(self, xs):
        pooled = torch.cat([_data(x).amax(dim=(2, 3, 4)) for x in xs], dim=1)
        if pooled.shape[1] != self.fc.in_features:
            raise ShapeError(f"prediction head expects {self.fc.in_features} channels, "
                             f"got {pooled.shape[1]}")
        return self.fc(self.dropout(pooled))


def _init_weights(module):
    for mod in module.modules():
        if isinstance(mod, nn.Conv3d):
            nn.init.kaiming_normal_(mod.weight, mode="fan_out", nonlinearity="relu")
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.BatchNorm3d):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.Linear):
            nn.init.normal_(mod.weight, std=0.01)
            nn.init.zeros_(mod.bias)


class TPN(nn.Module):
    def __init__(self, cfg: PyramidConfig, spec: BackboneSpec, num_classes: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m = cfg.num_levels
        d = cfg.resolve_mod_channels(spec)
        self.mod_channels = d
        if cfg.source_mode == "multi_depth":
            in_channels = [spec.stage_channels(s) for s in cfg.stages]
            downs = [cfg.stages[-1] - s for s in cfg.stages]
        else:
            in_channels = [spec.stage_channels(cfg.stages[0])] * m
            downs = [0] * m
        if not cfg.spatial_convs:
            downs = [0] * m
        self.spatial = SpatialModulation(in_channels, downs, d, ACTIVATIONS[spec.activation])
        self.temporal = TemporalModulation(d, cfg.effective_alphas, ACTIVATIONS[spec.activation]) if cfg.temporal_modulation else None
        self.head = PredictionHead(d * m, num_classes, cfg.dropout)
        _init_weights(self)
        # aux heads come last so toggling them leaves every other init untouched
        self.aux = None
        if cfg.aux_head and m > 1:
            self.aux = AuxHeads(d, m - 1, num_classes, cfg.dropout)
            _init_weights(self.aux)

    def forward(self, pyramid: StagePyramid, aux_mask=None) -> TPNOutput:
        sources = collect_sources(pyramid, self.cfg)
        modulated = self.spatial([s.data for s in sources])
        aux = []
        if self.aux is not None and (aux_mask is None or any(aux_mask)):
            aux = self.aux(modulated[:-1], aux_mask)
        if self.temporal is not None:
            modulated = self.temporal(modulated)
        fused = aggregate(modulated, self.cfg.flow)
        logits = self.head(fused)
        top_stride = sources[-1].spatial_stride
        aggregated = [FeatureMap(t, s.stage_id, top_stride if self.cfg.spatial_convs else s.spatial_stride,
                                 s.temporal_rf) for t, s in zip(fused, sources)]
        return TPNOutput(logits, aux, aggregated)


def spatial_modulate(sources, module: SpatialModulation):
    out = module([_data(s) for s in sources])
    return [s.with_data(t) if isinstance(s, FeatureMap) else t for s, t in zip(sources, out)]


def aux_head_logits(modulated, module: Optional[AuxHeads]):
    if module is None or len(modulated) < 2:
        return []
    return module([_data(x) for x in modulated[:-1]])


def temporal_modulate(modulated, module: TemporalModulation):
    out = module([_data(s) for s in modulated])
    return [s.with_data(t) if isinstance(s, FeatureMap) else t for s, t in zip(modulated, out)]


def predict(aggregated, head: PredictionHead):
    return head(aggregated)


def tpn_forward(pyramid: StagePyramid, tpn: TPN) -> TPNOutput:
    return tpn(pyramid)


def total_loss(main_logits, aux_logits, labels, lambdas):
    """Main cross-entropy plus lambda-weighted auxiliary cross-entropies (batch means)."""
    aux_logits = list(aux_logits)
    lambdas = list(lambdas)
    if len(aux_logits) != len(lambdas):
        raise ValueError(f"{len(aux_logits)} auxiliary logits but {len(lambdas)} lambdas")
    num_classes = main_logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    loss = F.cross_entropy(main_logits, labels)
    for lam, logits in zip(lambdas, aux_logits):
        if logits is None:
            if lam != 0:
                raise ValueError("auxiliary head skipped but its lambda is non-zero")
            continue
        loss = loss + lam * F.cross_entropy(logits, labels)
    return loss
