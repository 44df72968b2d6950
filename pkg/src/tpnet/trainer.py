"""SGD training loop, evaluation protocol and finite-difference gradient check."""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from .errors import ConfigError, DivergenceError, NumericError
from .videodata import SampleScheme, crop_protocol, eval_clips, to_tensor, train_clip

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    milestones: Sequence[int] = (20, 25)
    batch_size: int = 16
    dropout: float = 0.5
    seed: int = 0
    flip: bool = True
    scale_jitter: Optional[Sequence[int]] = None

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"train.{sorted(unknown)[0]}", "unknown key")
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be non-negative")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("train.milestones", "must be strictly increasing")
        if ms and self.epochs and ms[-1] >= self.epochs:
            raise ConfigError("train.milestones", f"milestone {ms[-1]} is not before epoch {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("train.dropout", "must lie in [0, 1)")
        return self


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: divide the base rate by 10 at every milestone already reached."""
    decays = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr / 10 ** decays


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class_top1: Dict[int, float]
    num_samples: int
    probs: Optional[np.ndarray] = field(default=None, repr=False)
    labels: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self):
        return {"top1": self.top1, "top5": self.top5,
                "per_class_top1": {str(k): v for k, v in sorted(self.per_class_top1.items())},
                "num_samples": self.num_samples}

    @classmethod
    def from_dict(cls, d):
        return cls(d["top1"], d["top5"], {int(k): v for k, v in d["per_class_top1"].items()},
                   d["num_samples"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def make_optimizer(model, cfg: TrainConfig):
    # classical (non-Nesterov) momentum, L2 decay added to the gradient
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def iterate_batches(dataset, scheme: SampleScheme, batch_size, rng, size, flip=True, scale_jitter=None):
    """Shuffled training batches; all randomness comes from ``rng``."""
    order = rng.permutation(len(dataset))
    for i in range(0, len(order), batch_size):
        recs = [dataset[j] for j in order[i:i + batch_size]]
        clips = np.stack([train_clip(r, scheme, size, rng, flip, scale_jitter) for r in recs])
        labels = torch.tensor([r.class_id for r in recs], dtype=torch.long)
        yield to_tensor(clips), labels


def train(model, dataset, cfg: TrainConfig, scheme: SampleScheme, val_dataset=None,
          val_scheme: Optional[SampleScheme] = None, start_epoch: int = 0,
          optimizer_state=None, on_epoch: Optional[Callable] = None):
    """Mini-batch SGD on the model's total loss.

    Returns ``(optimizer, history)``; the model is updated in place. History has
    one dict per epoch with ``epoch``, ``lr``, ``train_loss`` and ``val_top1``
    (None without a validation set).
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.num_classes != model.num_classes:
        raise ConfigError("data.num_classes", f"dataset has {dataset.num_classes} classes, "
                          f"model has {model.num_classes}")
    optimizer = make_optimizer(model, cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    history = []
    size = model.spec.input_size
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        # everything random in an epoch derives from (seed, epoch), so a resumed
        # run replays exactly what an uninterrupted one would have done
        rng = np.random.default_rng([cfg.seed, epoch])
        torch.manual_seed(int(rng.integers(2 ** 63)))
        model.train()
        total, count = 0.0, 0
        for clips, labels in iterate_batches(dataset, scheme, cfg.batch_size, rng, size,
                                             cfg.flip, cfg.scale_jitter):
            loss = model.loss(model(clips), labels)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch} (lr={lr:g})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(labels)
            count += len(labels)
        record = {"epoch": epoch, "lr": lr, "train_loss": total / count, "val_top1": None}
        if val_dataset is not None and len(val_dataset):
            record["val_top1"] = evaluate(model, val_dataset, val_scheme or scheme).top1
        history.append(record)
        log.info("epoch %d lr %g loss %.4f val_top1 %s", epoch, lr, record["train_loss"],
                 record["val_top1"])
        if on_epoch is not None:
            on_epoch(record, optimizer)
    model.trained = model.trained or cfg.epochs > start_epoch
    return optimizer, history


def _topk_hits(probs, labels, k):
    k = min(k, probs.shape[1])
    topk = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (topk == labels[:, None]).any(axis=1)


@torch.no_grad()
def predict_probs(model, clips: List[np.ndarray], batch_size=64):
    """Softmax over a list of (T, C, H, W) uint8 clips."""
    out = []
    for i in range(0, len(clips), batch_size):
        x = to_tensor(np.stack(clips[i:i + batch_size]))
        main, _ = model(x)
        out.append(F.softmax(main.double(), dim=1))
    return torch.cat(out).numpy()


@torch.no_grad()
def evaluate(model, dataset, scheme: SampleScheme, crop: str = "center", clips_per_video: int = 1,
             crop_size: Optional[int] = None, resize: Optional[int] = None, batch_size: int = 64):
    """Average softmax over every crop x clip of a video, then score top-1/top-5."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    size = crop_size or model.spec.input_size
    views, owner = [], []
    for i, rec in enumerate(dataset):
        for clip in eval_clips(rec, scheme, clips_per_video):
            for c in crop_protocol(clip, crop, size, resize):
                views.append(c)
                owner.append(i)
    probs_all = predict_probs(model, views, batch_size)
    owner = np.asarray(owner)
    probs = np.zeros((len(dataset), probs_all.shape[1]))
    np.add.at(probs, owner, probs_all)
    probs /= np.bincount(owner, minlength=len(dataset))[:, None]
    model.train(was_training)
    labels = dataset.labels
    hit1 = _topk_hits(probs, labels, 1)
    hit5 = _topk_hits(probs, labels, 5)
    per_class = {int(c): float(hit1[labels == c].mean()) for c in np.unique(labels)}
    return EvalReport(float(hit1.mean()), float(hit5.mean()), per_class, len(dataset),
                      probs, labels)


def _default_loss(model, batch):
    inputs, labels = batch
    return model.loss(model(inputs), labels)


class _BranchRecorder(TorchFunctionMode):
    """Records which branch every max and relu takes during one forward pass."""

    def __init__(self):
        super().__init__()
        self.branches = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        name = getattr(func, "__name__", "")
        if name in _POOLS and not kwargs.get("return_indices", False):
            out, idx = func(*args, **{**kwargs, "return_indices": True})
            self.branches.append(idx)
            return out
        out = func(*args, **kwargs)
        if name == "amax":
            dim = kwargs.get("dim", args[1] if len(args) > 1 else ())
            self.branches.append(args[0] == args[0].amax(dim=dim, keepdim=True))
        elif name in ("relu", "relu_"):
            self.branches.append(out > 0)
        return out


_POOLS = {"max_pool1d", "max_pool2d", "max_pool3d"}


def _same_branches(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    checked: int
    skipped: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def gradcheck_report(model, batch, loss_fn: Optional[Callable] = None, step: float = 1e-3,
                     dtype64: bool = True, max_coords: Optional[int] = None, seed: int = 0,
                     skip_kinks: bool = True) -> GradcheckReport:
    """Per-parameter relative error between autograd and central differences.

    ``loss_fn(model, batch)`` defaults to the model's total loss. The random
    stream is reset before every evaluation so dropout masks stay fixed. The
    error for a parameter tensor is ``||a - n|| / max(||a||, ||n||, 1e-8)``
    over its checked coordinates. With ``max_coords`` a seeded subsample of
    that many coordinates (across all parameters) is checked.

    With ``skip_kinks`` the winner of every max-pool, amax and relu is
    recorded at x, x + h and x - h. A coordinate whose perturbation changes a
    winner has crossed a kink, its central difference is not a derivative
    estimate, and it is left out (counted in ``skipped``).
    """
    with torch.random.fork_rng(devices=[]):
        return _gradcheck(model, batch, loss_fn or _default_loss, step, dtype64,
                          max_coords, seed, skip_kinks)


def gradcheck_detail(model, batch, loss_fn: Optional[Callable] = None, step: float = 1e-3,
                     dtype64: bool = True, max_coords: Optional[int] = None, seed: int = 0,
                     skip_kinks: bool = True) -> Dict[str, float]:
    return gradcheck_report(model, batch, loss_fn, step, dtype64, max_coords, seed,
                            skip_kinks).errors


def _gradcheck(model, batch, loss_fn, step, dtype64, max_coords, seed, skip_kinks):
    model = copy.deepcopy(model)
    dtype = torch.float64 if dtype64 else torch.float32
    model.to(dtype)
    batch = tuple(b.to(dtype) if torch.is_tensor(b) and b.is_floating_point() else b for b in batch)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]

    def loss_value():
        torch.manual_seed(seed)
        return loss_fn(model, batch)

    def probe():
        if not skip_kinks:
            return loss_value().item(), None
        rec = _BranchRecorder()
        with rec:
            value = loss_value().item()
        return value, rec.branches

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    analytic = {}
    for name, p in named:
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite analytic gradient for parameter {name!r}")
        analytic[name] = g.reshape(-1)

    sizes = [p.numel() for _, p in named]
    total = sum(sizes)
    if max_coords is not None and max_coords < total:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=max_coords, replace=False))
    else:
        picks = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    errors, checked, skipped = {}, 0, 0
    with torch.no_grad():
        _, centre = probe()
        for k, (name, p) in enumerate(named):
            local = picks[(picks >= offsets[k]) & (picks < offsets[k + 1])] - offsets[k]
            flat = p.data.view(-1)
            kept, numeric = [], []
            for idx in local:
                orig = flat[idx].item()
                flat[idx] = orig + step
                up, up_br = probe()
                flat[idx] = orig - step
                down, down_br = probe()
                flat[idx] = orig
                if skip_kinks and not (_same_branches(centre, up_br)
                                       and _same_branches(centre, down_br)):
                    skipped += 1
                    continue
                kept.append(int(idx))
                numeric.append((up - down) / (2 * step))
            if not kept:
                continue
            checked += len(kept)
            a = analytic[name][torch.as_tensor(kept)]
            n = torch.tensor(numeric, dtype=dtype)
            denom = max(a.norm().item(), n.norm().item(), 1e-8)
            errors[name] = (a - n).norm().item() / denom
    return GradcheckReport(errors, checked, skipped)


def gradcheck(model, batch, step: float = 1e-3, dtype64: bool = True, loss_fn=None,
              max_coords: Optional[int] = None, seed: int = 0, skip_kinks: bool = True) -> float:
    """Maximum relative gradient error over all checked parameters."""
    return gradcheck_report(model, batch, loss_fn, step, dtype64, max_coords, seed,
                            skip_kinks).max_error
