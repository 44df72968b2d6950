"""Experiment configuration: one YAML file with a section per module.

Example::

    backbone: {kind: conv2d_segments, base_channels: 8, input_frames: 8}
    tpn: {flow: parallel}            # omit the section for the plain baseline
    data:
      seed: 0
      num_classes: 6
      sampling: {mode: segments, num_segments: 8}
    train: {lr: 0.01, epochs: 30, milestones: [20, 25]}
    eval: {crop_protocol: center}
    analysis: {bin_width: 10}
    out_dir: runs/tsn_tpn

Everything is validated, including cross-section consistency, before any
command touches the filesystem.
"""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .backbone import BackboneSpec
from .errors import ConfigError, DatasetIOError
from .tempo_analysis import DEFAULT_STRIDES
from .tpn import PyramidConfig
from .trainer import TrainConfig
from .videodata import SampleScheme, SyntheticSpec

SECTIONS = ("backbone", "tpn", "data", "train", "eval", "analysis", "out_dir")
CROPS = ("center", "three_crop", "ten_crop")


def _strict(cls, d, section):
    if not isinstance(d, dict):
        raise ConfigError(section, f"expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}", "unknown key")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from exc


@dataclass(frozen=True)
class EvalConfig:
    crop_protocol: str = "center"
    crop_size: Optional[int] = None
    resize: Optional[int] = None
    clips_per_video: int = 1
    batch_size: int = 64

    def validate(self):
        if self.crop_protocol not in CROPS:
            raise ConfigError("eval.crop_protocol", f"expected one of {CROPS}")
        if self.clips_per_video < 1:
            raise ConfigError("eval.clips_per_video", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size", "must be >= 1")
        return self


@dataclass(frozen=True)
class AnalysisConfig:
    bin_width: float = 10.0
    strides: Sequence[int] = DEFAULT_STRIDES
    per_class_fit: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(self.strides))

    def validate(self):
        if not self.bin_width > 0:
            raise ConfigError("analysis.bin_width", "must be positive")
        if not self.strides or any(int(s) != s or s < 1 for s in self.strides):
            raise ConfigError("analysis.strides", "need positive integer strides")
        return self


@dataclass(frozen=True)
class DataConfig:
    """Where videos come from (a saved dataset ``root`` or the synthetic spec) and how clips are drawn."""

    synthetic: SyntheticSpec
    sampling: SampleScheme
    root: Optional[str] = None
    seed_given: bool = True

    @property
    def num_classes(self):
        return self.synthetic.num_classes

    def to_dict(self):
        d = self.synthetic.to_dict()
        d["sampling"] = self.sampling.to_dict()
        if self.root is not None:
            d["root"] = self.root
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneSpec
    tpn: Optional[PyramidConfig]
    data: DataConfig
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    out_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a mapping")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        backbone = BackboneSpec.from_dict(d.get("backbone") or {})
        tpn = PyramidConfig.from_dict(d["tpn"]) if d.get("tpn") is not None else None
        data_d = dict(d.get("data") or {})
        sampling = SampleScheme.from_dict(data_d.pop("sampling", {}) or {})
        root = data_d.pop("root", None)
        seed_given = "seed" in data_d
        synthetic = SyntheticSpec.from_dict(data_d)
        data = DataConfig(synthetic, sampling, None if root is None else str(root), seed_given)
        train = TrainConfig.from_dict(d.get("train") or {})
        ev = _strict(EvalConfig, d.get("eval") or {}, "eval").validate()
        an = _strict(AnalysisConfig, d.get("analysis") or {}, "analysis").validate()
        cfg = cls(backbone, tpn, data, train, ev, an, str(d.get("out_dir", "runs/default")))
        return cfg.validate()

    def validate(self):
        """Cross-section checks; each section validated itself on construction."""
        s, bb = self.data.sampling, self.backbone
        if s.frames != bb.input_frames:
            field_name = "data.sampling.T" if s.mode == "windowed" else "data.sampling.num_segments"
            raise ConfigError(field_name, f"gives {s.frames} frames but backbone.input_frames "
                              f"is {bb.input_frames}")
        if bb.kind == "conv3d" and s.mode != "windowed":
            raise ConfigError("data.sampling.mode", "a conv3d backbone needs windowed clips")
        if self.tpn is not None:
            self.tpn.check_frames(bb.input_frames)
        syn = self.data.synthetic
        if s.mode == "windowed" and syn.video_len < s.window:
            raise ConfigError("data.video_len", f"{syn.video_len} frames cannot hold the "
                              f"{s.window}-frame window")
        if s.mode == "segments" and syn.video_len < s.num_segments:
            raise ConfigError("data.video_len", "shorter than the number of segments")
        if bb.input_size > syn.frame_size:
            raise ConfigError("backbone.input_size", f"{bb.input_size} exceeds "
                              f"data.frame_size {syn.frame_size}")
        crop = self.eval.crop_size or bb.input_size
        if crop != bb.input_size:
            raise ConfigError("eval.crop_size", f"must match backbone.input_size {bb.input_size}")
        if self.train.scale_jitter is not None:
            lo, hi = self.train.scale_jitter
            if lo < bb.input_size or hi < lo:
                raise ConfigError("train.scale_jitter", "needs input_size <= lo <= hi")
        return self

    def with_overrides(self, out=None, seed=None):
        cfg = self
        if out is not None:
            cfg = ExperimentConfig(cfg.backbone, cfg.tpn, cfg.data, cfg.train, cfg.eval,
                                   cfg.analysis, str(out))
        if seed is not None:
            train = TrainConfig(**{**cfg.train.to_dict(), "seed": int(seed)})
            syn = SyntheticSpec(**{**cfg.data.synthetic.to_dict(), "seed": int(seed)})
            data = DataConfig(syn, cfg.data.sampling, cfg.data.root, True)
            cfg = ExperimentConfig(cfg.backbone, cfg.tpn, data, train, cfg.eval, cfg.analysis,
                                   cfg.out_dir)
        return cfg.validate()

    def to_dict(self):
        an = asdict(self.analysis)
        an["strides"] = list(self.analysis.strides)
        return {
            "backbone": self.backbone.to_dict(),
            "tpn": None if self.tpn is None else self.tpn.to_dict(),
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "analysis": an,
            "out_dir": self.out_dir,
        }

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(path, "config file not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML ({exc})") from exc
    return ExperimentConfig.from_dict(raw or {})
