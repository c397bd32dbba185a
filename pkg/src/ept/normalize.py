"""Feature-map normalization applied before trajectory pooling.

Both operations rescale by a max-absolute-value statistic so they are
idempotent, sign-preserving, and invariant to positive scaling of the
whole volume. Statistics are computed over the full video volume in one
pass; all-zero groups are left untouched rather than treated as errors,
since post-ReLU maps legitimately contain dead channels.
"""

from enum import Enum

import numpy as np

from .core import FeatureMapVolume


class NormalizationKind(Enum):
    IN_CHANNEL = "in-channel"
    IN_VOXEL = "in-voxel"


def _rescaled(volume, axes):
    peak = np.max(np.abs(volume.data), axis=axes, keepdims=True)
    divisor = np.where(peak > 0, peak, np.float32(1.0))
    return FeatureMapVolume(
        data=volume.data / divisor,
        video_height=volume.video_height,
        video_width=volume.video_width,
        stream_tag=volume.stream_tag,
        layer_tag=volume.layer_tag,
        scale_tag=volume.scale_tag,
    )


def in_channel_normalize(volume):
    """Divide each channel by its max absolute value over all (t, y, x)."""
    return _rescaled(volume, axes=(0, 1, 2))


def in_voxel_normalize(volume):
    """Divide each (t, y, x) voxel's channel vector by its max absolute value."""
    return _rescaled(volume, axes=3)


def normalize_volume(volume, kind):
    kind = NormalizationKind(kind)
    if kind is NormalizationKind.IN_CHANNEL:
        return in_channel_normalize(volume)
    return in_voxel_normalize(volume)
