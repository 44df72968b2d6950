"""Temporal pyramid networks for video action recognition, at desk scale."""

from .backbone import Backbone, BackboneSpec, FeatureMap, StagePyramid, build_backbone
from .errors import (ConfigError, DataError, DatasetIOError, DivergenceError, NumericError,
                     ShapeError, TPNError)
from .model import Recognizer, build_model
from .tpn import TPN, FlowKind, PyramidConfig, aggregate, total_loss

__version__ = "0.1.0"
