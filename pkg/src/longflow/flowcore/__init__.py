from .flow import cfg_combine, euler_sample, flow_matching_loss, frame_timestamps, interpolate
from .model import BACKBONES, ConditioningBundle, FieldConfig, VelocityField

__all__ = [
    "BACKBONES",
    "ConditioningBundle",
    "FieldConfig",
    "VelocityField",
    "cfg_combine",
    "euler_sample",
    "flow_matching_loss",
    "frame_timestamps",
    "interpolate",
]
