"""Synthetic tempo-controlled videos, on-disk storage, clip sampling and crops.

Every synthetic video shows one bright blob on a dark, noisy background. The
blob appears, travels along its class's trajectory at the instance's tempo
(pixels per frame) and disappears again, so the action spans roughly
``extent / tempo`` frames: slower instances act for longer. Classes differ by
trajectory shape, except for tempo-twin pairs which share a trajectory and
differ only in mean tempo.
"""

import json
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, DatasetIOError

log = logging.getLogger(__name__)

SPLITS = ("train", "val")


def _hline(u):
    return u, np.full_like(u, 0.5)


def _vline(u):
    return np.full_like(u, 0.5), u


def _diag(u):
    return u, u


def _circle(u):
    a = 2 * np.pi * u
    return 0.5 + 0.5 * np.cos(a), 0.5 + 0.5 * np.sin(a)


def _zigzag(u):
    tri = 1 - np.abs((4 * u) % 2 - 1)
    return u, 0.2 + 0.6 * tri


def _wave(u):
    return 0.5 + 0.45 * np.sin(2 * np.pi * u), u


def _corner(u):
    # L-shaped: down the left edge, then along the bottom
    x = np.where(u < 0.5, 0.0, (u - 0.5) * 2)
    y = np.where(u < 0.5, u * 2, 1.0)
    return x, y


TRAJECTORIES = {
    "hline": _hline,
    "vline": _vline,
    "diag": _diag,
    "circle": _circle,
    "zigzag": _zigzag,
    "wave": _wave,
    "corner": _corner,
}


class Trajectory:
    """Arc-length parametrised path in pixel coordinates, traversed ping-pong."""

    def __init__(self, name, frame_size, margin=0.15, samples=2048):
        if name not in TRAJECTORIES:
            raise ConfigError("data.trajectories", f"unknown trajectory {name!r}")
        u = np.linspace(0.0, 1.0, samples)
        x, y = TRAJECTORIES[name](u)
        lo = margin * (frame_size - 1)
        span = (1 - 2 * margin) * (frame_size - 1)
        self.xy = np.stack([lo + x * span, lo + y * span], axis=1)
        seg = np.linalg.norm(np.diff(self.xy, axis=0), axis=1)
        self.arc = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.arc[-1])

    def at(self, s):
        """Positions (N, 2) for arc lengths s, reflecting at both ends."""
        period = 2 * self.length
        s = np.mod(np.asarray(s, dtype=np.float64), period)
        s = np.where(s > self.length, period - s, s)
        x = np.interp(s, self.arc, self.xy[:, 0])
        y = np.interp(s, self.arc, self.xy[:, 1])
        return np.stack([x, y], axis=-1)


@dataclass
class SyntheticSpec:
    num_classes: int = 6
    videos_per_class: int = 40
    val_videos_per_class: int = 20
    video_len: int = 64
    frame_size: int = 32
    tempo_mean: Sequence[float] = (1.0, 1.0, 1.0, 1.0, 0.5, 1.5)
    tempo_sigma: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.15, 0.4)
    trajectories: Sequence[str] = ("hline", "vline", "circle", "zigzag", "diag", "diag")
    noise_sigma: float = 0.05
    extent: Sequence[float] = (0.6, 1.0)
    blob_sigma: float = 1.2
    jitter: float = 4.0
    duration: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("tempo_mean", "tempo_sigma", "trajectories", "extent"):
            setattr(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"data.{sorted(unknown)[0]}", "unknown key")
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("data.num_classes", "must be >= 2")
        for name in ("tempo_mean", "tempo_sigma", "trajectories"):
            if len(getattr(self, name)) != self.num_classes:
                raise ConfigError(f"data.{name}", f"needs one entry per class ({self.num_classes})")
        if any(m <= 0 for m in self.tempo_mean):
            raise ConfigError("data.tempo_mean", "tempos must be positive")
        if any(s < 0 for s in self.tempo_sigma):
            raise ConfigError("data.tempo_sigma", "spreads must be non-negative")
        for t in self.trajectories:
            if t not in TRAJECTORIES:
                raise ConfigError("data.trajectories", f"unknown trajectory {t!r}; "
                                  f"known: {sorted(TRAJECTORIES)}")
        if self.noise_sigma < 0:
            raise ConfigError("data.noise_sigma", "must be non-negative")
        if self.video_len < 1 or self.frame_size < 8:
            raise ConfigError("data.video_len", "video_len >= 1 and frame_size >= 8 required")
        if self.videos_per_class < 0 or self.val_videos_per_class < 0:
            raise ConfigError("data.videos_per_class", "must be non-negative")
        if self.duration is not None and not 0 < self.duration <= self.video_len - 1:
            raise ConfigError("data.duration", "must lie in (0, video_len - 1]")
        if len(self.extent) != 2 or not 0 < self.extent[0] <= self.extent[1]:
            raise ConfigError("data.extent", "expected [lo, hi] with 0 < lo <= hi")
        return self

    def twin_pairs(self):
        """Class pairs sharing a trajectory but not a mean tempo."""
        pairs = []
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if (self.trajectories[a] == self.trajectories[b]
                        and self.tempo_mean[a] != self.tempo_mean[b]):
                    pairs.append((a, b))
        return pairs


@dataclass
class VideoRecord:
    id: str
    class_id: int
    frames: Optional[np.ndarray]   # uint8 (T, C, H, W)
    instance_tempo: float
    meta: Dict = field(default_factory=dict)
    path: Optional[str] = None

    @property
    def num_frames(self):
        if self.frames is not None:
            return self.frames.shape[0]
        return int(self.meta["num_frames"])

    def load(self):
        if self.frames is None:
            self.frames = _read_frames(Path(self.path), self.meta)
        return self.frames


class VideoDataset:
    def __init__(self, records: List[VideoRecord], num_classes: int, split: str = "train"):
        self.records = list(records)
        self.num_classes = num_classes
        self.split = split

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def labels(self):
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def subset(self, indices):
        return VideoDataset([self.records[i] for i in indices], self.num_classes, self.split)


def video_seed(master_seed, video_id):
    return np.random.default_rng([int(master_seed), zlib.crc32(video_id.encode())])


def render_blobs(centres, visible, frame_size, sigma):
    """Noise-free float frames (T, H, W) with one Gaussian blob per visible frame."""
    grid = np.arange(frame_size, dtype=np.float64)
    dx = grid[None, :] - centres[:, 0:1]          # (T, W)
    dy = grid[None, :] - centres[:, 1:2]          # (T, H)
    gx = np.exp(-dx ** 2 / (2 * sigma ** 2))
    gy = np.exp(-dy ** 2 / (2 * sigma ** 2))
    img = gy[:, :, None] * gx[:, None, :]
    return img * visible[:, None, None]


def synthesize_video(spec: SyntheticSpec, class_id: int, video_id: str) -> VideoRecord:
    rng = video_seed(spec.seed, video_id)
    traj = Trajectory(spec.trajectories[class_id], spec.frame_size)
    mean, sigma = spec.tempo_mean[class_id], spec.tempo_sigma[class_id]
    tempo = mean + sigma * rng.standard_normal() if sigma > 0 else mean
    tempo = float(max(tempo, 0.1 * mean))
    u = rng.uniform(*spec.extent)
    if spec.duration is None:
        # fixed share of the path, so slower instances last longer
        duration = traj.length * u / tempo
    else:
        # class-independent mean duration; only the instance's deviation from
        # its class tempo stretches or shrinks the action
        duration = spec.duration * u * mean / tempo
    duration = min(duration, spec.video_len - 1.0)
    slack = (spec.video_len - 1 - duration) / 2
    shift = rng.uniform(-1, 1) * min(spec.jitter, slack)
    start = slack + shift
    s0 = rng.uniform(0, 2 * traj.length)
    direction = 1.0 if rng.random() < 0.5 else -1.0

    t = np.arange(spec.video_len, dtype=np.float64)
    elapsed = np.clip(t - start, 0.0, duration)
    visible = ((t >= start) & (t <= start + duration)).astype(np.float64)
    centres = traj.at(s0 + direction * tempo * elapsed)
    clean = render_blobs(centres, visible, spec.frame_size, spec.blob_sigma)
    noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    gray = np.clip(np.rint(noisy * 255), 0, 255).astype(np.uint8)
    frames = np.repeat(gray[:, None], 3, axis=1)
    meta = {"action_start": start, "action_duration": duration, "num_frames": spec.video_len}
    return VideoRecord(video_id, class_id, frames, tempo, meta)


def generate_synthetic(spec: SyntheticSpec, split: str = "train") -> VideoDataset:
    """Balanced synthetic split; each video is seeded from (spec.seed, video id)."""
    spec.validate()
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    per_class = spec.videos_per_class if split == "train" else spec.val_videos_per_class
    records = [synthesize_video(spec, c, f"{split}_{c:02d}_{i:04d}")
               for c in range(spec.num_classes) for i in range(per_class)]
    return VideoDataset(records, spec.num_classes, split)


@dataclass(frozen=True)
class SampleScheme:
    mode: str = "windowed"
    T: int = 8
    tau: int = 8
    window: int = 64
    num_segments: int = 8

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"data.sampling.{sorted(unknown)[0]}", "unknown key")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.mode not in ("windowed", "segments"):
            raise ConfigError("data.sampling.mode", f"unknown mode {self.mode!r}")
        if self.mode == "windowed":
            if self.T < 1 or self.tau < 1:
                raise ConfigError("data.sampling.T", "T and tau must be positive")
            if self.T * self.tau > self.window:
                raise ConfigError("data.sampling.tau",
                                  f"T*tau = {self.T * self.tau} exceeds the {self.window}-frame window")
        elif self.num_segments < 1:
            raise ConfigError("data.sampling.num_segments", "must be >= 1")
        return self

    @property
    def frames(self):
        return self.T if self.mode == "windowed" else self.num_segments


def clip_indices(scheme: SampleScheme, start: int):
    scheme.validate()
    return start + scheme.tau * np.arange(scheme.T)


def sample_clip(video: VideoRecord, scheme: SampleScheme, start="center", rng=None):
    """T frames at stride tau from a window; start is an int, 'center' or 'random'."""
    if scheme.mode != "windowed":
        raise ConfigError("data.sampling.mode", "sample_clip needs a windowed scheme")
    scheme.validate()
    n = video.num_frames
    if scheme.window > n:
        raise DataError(f"video {video.id} has {n} frames, window needs {scheme.window}")
    if start == "center":
        start = (n - scheme.window) // 2
    elif start == "random":
        rng = np.random.default_rng() if rng is None else rng
        start = int(rng.integers(0, n - scheme.window + 1))
    if start < 0 or start + scheme.window > n:
        raise DataError(f"window [{start}, {start + scheme.window}) outside video of {n} frames")
    return video.load()[clip_indices(scheme, start)]


def segment_indices(length: int, n: int, train: bool, rng=None):
    if length < n:
        raise DataError(f"cannot take {n} segments from {length} frames")
    i = np.arange(n)
    if not train:
        return np.floor((i + 0.5) * length / n).astype(np.int64)
    rng = np.random.default_rng() if rng is None else rng
    lo = np.floor(i * length / n).astype(np.int64)
    hi = np.floor((i + 1) * length / n).astype(np.int64)
    return lo + rng.integers(0, np.maximum(hi - lo, 1))


def sample_segments(video: VideoRecord, n: int, train: bool, rng=None):
    """One frame per equal span: random within the span (train) or its centre (eval)."""
    return video.load()[segment_indices(video.num_frames, n, train, rng)]


def _resize_short(frames, short):
    t, c, h, w = frames.shape
    if min(h, w) == short:
        return frames
    scale = short / min(h, w)
    size = (max(short, round(h * scale)), max(short, round(w * scale)))
    x = torch.as_tensor(frames, dtype=torch.float32)
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    if frames.dtype == np.uint8:
        return out.round().clamp(0, 255).to(torch.uint8).numpy()
    return out.numpy().astype(frames.dtype)


def _crop(frames, top, left, size):
    return frames[..., top:top + size, left:left + size]


def crop_protocol(frames, protocol: str, crop_size: Optional[int] = None,
                  resize: Optional[int] = None):
    """Test-time spatial crops of a (T, C, H, W) clip.

    * ``three_crop``: shorter side resized to ``resize`` (256), then three
      ``crop_size`` (256) squares at the start, centre and end of the longer side.
    * ``ten_crop``: four corner and one centre ``crop_size`` (224) crops plus
      their horizontal flips.
    * ``center``: one centre crop (224).
    """
    if protocol == "three_crop":
        crop_size = 256 if crop_size is None else crop_size
        resize = crop_size if resize is None else resize
        frames = _resize_short(frames, resize)
    elif protocol in ("ten_crop", "center"):
        crop_size = 224 if crop_size is None else crop_size
        if resize is not None:
            frames = _resize_short(frames, resize)
    else:
        raise ConfigError("eval.crop_protocol", f"unknown protocol {protocol!r}")
    h, w = frames.shape[-2:]
    if h < crop_size or w < crop_size:
        raise DataError(f"frames of {h}x{w} are smaller than the {crop_size} crop")
    cy, cx = (h - crop_size) // 2, (w - crop_size) // 2
    if protocol == "center":
        return [_crop(frames, cy, cx, crop_size)]
    if protocol == "three_crop":
        if w >= h:
            spots = [(cy, 0), (cy, cx), (cy, w - crop_size)]
        else:
            spots = [(0, cx), (cy, cx), (h - crop_size, cx)]
        return [_crop(frames, y, x, crop_size) for y, x in spots]
    spots = [(0, 0), (0, w - crop_size), (h - crop_size, 0), (h - crop_size, w - crop_size), (cy, cx)]
    crops = [_crop(frames, y, x, crop_size) for y, x in spots]
    return crops + [np.ascontiguousarray(c[..., ::-1]) for c in crops]


def augment_clip(clip, size, rng, flip=True, scale_jitter=None):
    """Training augmentation: optional short-side jitter, random crop, random h-flip."""
    if scale_jitter is not None:
        clip = _resize_short(clip, int(rng.integers(scale_jitter[0], scale_jitter[1] + 1)))
    h, w = clip.shape[-2:]
    if h < size or w < size:
        raise DataError(f"frames of {h}x{w} are smaller than the {size} crop")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    clip = _crop(clip, top, left, size)
    if flip and rng.random() < 0.5:
        clip = clip[..., ::-1]
    return np.ascontiguousarray(clip)


def to_tensor(clips):
    """uint8 (..., C, H, W) -> float32 tensor scaled to [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(clips)).to(torch.float32)
    return x / 127.5 - 1.0


def train_clip(video, scheme: SampleScheme, size, rng, flip=True, scale_jitter=None):
    if scheme.mode == "windowed":
        clip = sample_clip(video, scheme, "random", rng)
    else:
        clip = sample_segments(video, scheme.num_segments, True, rng)
    return augment_clip(clip, size, rng, flip, scale_jitter)


def eval_clips(video, scheme: SampleScheme, clips_per_video=1):
    """Deterministic evaluation clips, evenly placed through the video."""
    n = video.num_frames
    if scheme.mode == "windowed":
        if clips_per_video == 1:
            return [sample_clip(video, scheme, "center")]
        room = n - scheme.window
        if room < 0:
            raise DataError(f"video {video.id} shorter than the {scheme.window}-frame window")
        starts = np.linspace(0, room, clips_per_video).round().astype(int)
        return [sample_clip(video, scheme, int(s)) for s in starts]
    if clips_per_video == 1:
        return [sample_segments(video, scheme.num_segments, False)]
    base = np.floor(np.arange(scheme.num_segments) * n / scheme.num_segments).astype(int)
    span = max(n // scheme.num_segments, 1)
    offsets = np.floor((np.arange(clips_per_video) + 0.5) * span / clips_per_video).astype(int)
    frames = video.load()
    return [frames[np.minimum(base + o, n - 1)] for o in offsets]


# ---------------------------------------------------------------------------
# on-disk layout: root/<split>/index.json, <id>.bin (raw uint8), <id>.json
# plus root/meta.json with num_classes and the generating spec


def _read_frames(path: Path, meta):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(path, f"cannot read frames ({exc.strerror})") from exc
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape)) * np.dtype(meta.get("dtype", "uint8")).itemsize
    if len(raw) != expected:
        raise DatasetIOError(path, f"corrupt frame file: {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=meta.get("dtype", "uint8")).reshape(shape).copy()


def save_dataset(dataset: VideoDataset, root, spec: Optional[SyntheticSpec] = None):
    root = Path(root)
    split_dir = root / dataset.split
    split_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in dataset:
        frames = np.ascontiguousarray(rec.load())
        (split_dir / f"{rec.id}.bin").write_bytes(frames.astype(frames.dtype.newbyteorder("<")).tobytes())
        sidecar = {
            "id": rec.id, "class_id": rec.class_id, "tempo": rec.instance_tempo,
            "num_frames": int(frames.shape[0]), "shape": list(frames.shape),
            "dtype": frames.dtype.str, "meta": rec.meta,
        }
        _write_json(split_dir / f"{rec.id}.json", sidecar)
        index.append({"id": rec.id, "class_id": rec.class_id,
                      "num_frames": int(frames.shape[0]), "tempo": rec.instance_tempo})
    _write_json(split_dir / "index.json", index)
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta["num_classes"] = dataset.num_classes
    meta.setdefault("splits", {})[dataset.split] = len(dataset)
    if spec is not None:
        meta["spec"] = spec.to_dict()
    _write_json(meta_path, meta)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DatasetIOError(path, "file not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIOError(path, f"corrupt JSON ({exc.msg})") from exc


def num_workers():
    cap = os.environ.get("TPN_NUM_WORKERS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer TPN_NUM_WORKERS=%r", cap)
    return n


def load_dataset(root, split: str = "train", lazy: bool = False) -> VideoDataset:
    """Read one split back; frames are bit-identical to what was saved."""
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir() or not any(split_dir.iterdir()):
        raise DatasetIOError(split_dir, "empty dataset (no index.json or videos)")
    index = _load_json(split_dir / "index.json")
    if not index:
        raise DatasetIOError(split_dir / "index.json", "empty dataset")
    meta_path = root / "meta.json"
    num_classes = None
    if meta_path.exists():
        num_classes = _load_json(meta_path).get("num_classes")
    if num_classes is None:
        num_classes = max(e["class_id"] for e in index) + 1

    def load_one(entry):
        sidecar = _load_json(split_dir / f"{entry['id']}.json")
        path = split_dir / f"{entry['id']}.bin"
        rec = VideoRecord(entry["id"], int(entry["class_id"]), None, float(entry["tempo"]),
                          dict(sidecar.get("meta", {}), shape=sidecar["shape"],
                               dtype=sidecar.get("dtype", "|u1"),
                               num_frames=sidecar["num_frames"]), str(path))
        if not lazy:
            rec.load()
        return rec

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        records = list(pool.map(load_one, index))
    bad = [r.id for r in records if not 0 <= r.class_id < num_classes]
    if bad:
        raise DatasetIOError(split_dir / "index.json", f"class ids out of range for {bad[:3]}")
    return VideoDataset(records, num_classes, split)
