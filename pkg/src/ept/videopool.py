"""Video-level pooling of per-frame Fisher Vectors and representation fusion."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .binio import expect_magic, read_array, read_u32, write_array, write_u32
from .core import Direction
from .encode import power_l2_normalize
from .errors import SizeMismatchError, ValidationError
from .trajpool import approx_rank_pool

VIDEO_VECTOR_MAGIC = b"EPTF1\x00"

_ZERO_WARNING = "pooled vector is all-zero"


class Provenance(Enum):
    AP = "ap"
    HAP = "hap"
    RP_FORWARD = "rp-forward"
    RP_BACKWARD = "rp-backward"
    FUSED = "fused"


@dataclass(frozen=True, eq=False)
class VideoVector:
    """A pooled video representation; unit L2 norm unless `warning` is set."""

    values: np.ndarray
    provenance: Provenance
    warning: str | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValidationError("video vector values must be 1-D")
        if not np.isfinite(values).all():
            raise ValidationError("video vector contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def __len__(self):
        return self.values.shape[0]


def _as_frame_matrix(seq):
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValidationError(
            f"per-frame sequence must be a (T, dim) array with T >= 1, got shape {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise ValidationError("per-frame sequence contains non-finite values")
    return arr


def video_ap(seq, alpha=0.5):
    """Average pooling: power + L2 normalization of the frame sum."""
    frames = _as_frame_matrix(seq)
    total = frames.sum(axis=0)
    if not total.any():
        return VideoVector(values=total, provenance=Provenance.AP, warning=_ZERO_WARNING)
    return VideoVector(values=power_l2_normalize(total, alpha), provenance=Provenance.AP)


def _window_starts(frames, window, stride):
    if frames < window:
        return [0]
    return list(range(0, frames - window + 1, stride))


def video_hap(seq, window=20, stride=1, alpha=0.5):
    """Hierarchical average pooling over sliding windows.

    Every full window [i, i + window) at the given stride is sum-pooled and
    power + L2 normalized; a video shorter than the window contributes one
    truncated full-video window. The window vectors are then summed and
    scaled back to unit L2 norm (they are already commensurately
    normalized, so a second power normalization would distort them and
    break the equality with plain average pooling on short videos).
    """
    frames = _as_frame_matrix(seq)
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be >= 1")
    vectors = []
    for start in _window_starts(frames.shape[0], window, stride):
        chunk = frames[start:start + window].sum(axis=0)
        if chunk.any():
            chunk = power_l2_normalize(chunk, alpha)
        vectors.append(chunk)
    if len(vectors) == 1:
        values = vectors[0]
    else:
        total = np.sum(vectors, axis=0)
        norm = np.linalg.norm(total)
        values = total / norm if norm > 0 else total
    if not values.any():
        return VideoVector(values=values, provenance=Provenance.HAP, warning=_ZERO_WARNING)
    return VideoVector(values=values, provenance=Provenance.HAP)


def video_rp(seq, direction=Direction.FORWARD, alpha=0.5):
    """Rank pooling across frames: closed-form pooling of the frame sequence.

    The sequence is reversed first for the backward direction. Sequences
    with no evolution (constant rows, or a single frame) pool to the zero
    vector, reported via the warning field.
    """
    frames = _as_frame_matrix(seq)
    direction = Direction(direction)
    if direction is Direction.BACKWARD:
        frames = frames[::-1]
    provenance = (
        Provenance.RP_BACKWARD if direction is Direction.BACKWARD else Provenance.RP_FORWARD
    )
    pooled = approx_rank_pool(frames)
    if not pooled.any():
        return VideoVector(values=pooled, provenance=provenance, warning=_ZERO_WARNING)
    return VideoVector(values=power_l2_normalize(pooled, alpha), provenance=provenance)


def fuse(vectors, weights=None):
    """Concatenate unit-norm representations so inner products average blockwise.

    Each block is scaled by sqrt(w_i / sum(w)); the fused vectors of two
    videos then have inner product equal to the weighted average of the
    blockwise inner products (kernel averaging), and the fused vector has
    unit L2 norm.
    """
    if not vectors:
        raise ValidationError("fuse needs at least one vector")
    if weights is None:
        weights = np.ones(len(vectors))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(vectors),) or (weights <= 0).any():
        raise ValidationError("weights must be positive, one per vector")
    blocks = []
    for vec in vectors:
        values = vec.values if isinstance(vec, VideoVector) else np.asarray(vec, np.float64)
        norm = np.linalg.norm(values)
        if abs(norm - 1.0) > 1e-5:
            raise ValidationError(f"fuse inputs must be L2-normalized, got norm {norm:.6g}")
        blocks.append(values)
    scales = np.sqrt(weights / weights.sum())
    fused = np.concatenate([s * b for s, b in zip(scales, blocks)])
    return VideoVector(values=fused, provenance=Provenance.FUSED)


# ---------------------------------------------------------------------------
# Video vector file: magic, u32 dim, float64 values.
# ---------------------------------------------------------------------------


def save_video_vector(vector, path):
    values = vector.values if isinstance(vector, VideoVector) else np.asarray(vector, np.float64)
    with open(path, "wb") as f:
        f.write(VIDEO_VECTOR_MAGIC)
        write_u32(f, values.shape[0])
        write_array(f, values, "<f8")


def load_video_vector(path):
    with open(path, "rb") as f:
        expect_magic(f, VIDEO_VECTOR_MAGIC, "video vector")
        dim = read_u32(f, "dimension")
        expected = dim * 8
        raw = f.read(expected)
        if len(raw) != expected:
            raise SizeMismatchError(
                f"video vector payload size mismatch: header declares {dim} float64 "
                f"({expected} bytes), got {len(raw)} bytes",
                offset=10,
            )
        return np.frombuffer(raw, dtype="<f8").copy()
