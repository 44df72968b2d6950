"""Tiny models and datasets shared by the unit tests."""

from tpnet.backbone import BackboneSpec
from tpnet.model import build_model
from tpnet.tpn import PyramidConfig
from tpnet.videodata import SampleScheme, SyntheticSpec, generate_synthetic


def tiny_data(num_classes=3, per_class=4, val=2, seed=0, video_len=16):
    spec = SyntheticSpec(num_classes=num_classes, videos_per_class=per_class,
                         val_videos_per_class=val, video_len=video_len, frame_size=32,
                         tempo_mean=(1.0,) * num_classes, tempo_sigma=(0.1,) * num_classes,
                         trajectories=("hline", "vline", "circle", "zigzag", "diag", "diag")[:num_classes],
                         seed=seed)
    return generate_synthetic(spec, "train"), generate_synthetic(spec, "val")


def tiny_model(tpn=None, num_classes=3, seed=0, kind="conv2d_segments", frames=4, base=1,
               activation="relu"):
    spec = BackboneSpec(kind=kind, base_channels=base, input_frames=frames, input_size=32,
                        activation=activation)
    return build_model(spec, num_classes, tpn, seed=seed)


def segments(n=4):
    return SampleScheme(mode="segments", num_segments=n)


def tiny_tpn(**kw):
    base = dict(stages=(4, 5), alphas=(2, 4), flow="parallel", lambdas=(0.5,), mod_channels=4)
    base.update(kw)
    return PyramidConfig(**base)
