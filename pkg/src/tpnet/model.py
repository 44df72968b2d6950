"""Backbone + optional TPN, wired into one trainable classifier."""

from typing import Optional

import torch
from torch import nn

from .backbone import Backbone, BackboneSpec
from .errors import ConfigError
from .tpn import TPN, PyramidConfig, total_loss


class Recognizer(nn.Module):
    """Action classifier over clips laid out (B, T, C, H, W).

    Without a pyramid config this is the plain baseline (backbone GAP + fc).
    With one, the TPN head produces the main logits and the auxiliary heads
    contribute lambda-weighted losses.
    """

    def __init__(self, spec: BackboneSpec, num_classes: int,
                 tpn_cfg: Optional[PyramidConfig] = None, dropout: float = 0.5):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("data.num_classes", f"must be >= 2, got {num_classes}")
        self.spec = spec
        self.num_classes = num_classes
        self.tpn_cfg = tpn_cfg
        self.backbone = Backbone(spec, num_classes, dropout)
        self.tpn = TPN(tpn_cfg, spec, num_classes) if tpn_cfg is not None else None
        self.trained = False

    def forward(self, clips):
        """Return ``(main_logits, aux_logits)``.

        In training mode auxiliary heads whose lambda is zero are skipped (their
        slot holds None), so a zero-lambda model follows the aux-free model's
        random stream exactly.
        """
        pyramid = self.backbone.stages(clips)
        if self.tpn is None:
            return self.backbone.head(pyramid[5].data), []
        mask = None
        if self.training:
            mask = [lam != 0 for lam in self.tpn_cfg.lambdas]
        out = self.tpn(pyramid, mask)
        return out.main_logits, out.aux_logits

    def loss(self, outputs, labels):
        main, aux = outputs
        if not aux:
            return total_loss(main, [], labels, [])
        return total_loss(main, aux, labels, self.tpn_cfg.lambdas)

    def config_dict(self):
        return {
            "backbone": self.spec.to_dict(),
            "num_classes": self.num_classes,
            "tpn": None if self.tpn_cfg is None else self.tpn_cfg.to_dict(),
            "dropout": self.backbone.dropout.p,
        }

    @classmethod
    def from_config_dict(cls, d, seed=0):
        spec = BackboneSpec.from_dict(d["backbone"])
        tpn_cfg = PyramidConfig.from_dict(d["tpn"]) if d.get("tpn") else None
        return build_model(spec, d["num_classes"], tpn_cfg, seed=seed, dropout=d.get("dropout", 0.5))


def build_model(spec: BackboneSpec, num_classes: int, tpn_cfg: Optional[PyramidConfig] = None,
                seed: int = 0, dropout: float = 0.5, device=None) -> Recognizer:
    """Seeded construction; the global torch RNG is left untouched."""
    spec.validate()
    if tpn_cfg is not None:
        tpn_cfg.validate()
        tpn_cfg.check_frames(spec.input_frames)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if device is None:
            return Recognizer(spec, num_classes, tpn_cfg, dropout)
        with torch.device(device):
            return Recognizer(spec, num_classes, tpn_cfg, dropout)
