"""Domain types, on-disk formats, and synthetic data generation.

All multi-byte values in the binary formats are little-endian. Frame and
cell indices are 0-based everywhere.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .binio import (
    expect_magic,
    read_array,
    read_exact,
    read_string,
    read_u32,
    write_string,
    write_u32,
)
from .errors import FormatError, SizeMismatchError, ValidationError

VOLUME_MAGIC = b"EPTV1\x00"
TRAJECTORY_HEADER_PREFIX = "#EPT-TRAJ v1 L="
DEFAULT_TRAJECTORY_LENGTH = 16


class _CodedEnum(Enum):
    """Enum whose wire code is its declaration index."""

    @property
    def code(self):
        return list(type(self)).index(self)

    @classmethod
    def from_code(cls, code):
        members = list(cls)
        if not 0 <= code < len(members):
            raise FormatError(f"unknown {cls.__name__} code {code}")
        return members[code]


class StreamTag(_CodedEnum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


class PoolingKind(_CodedEnum):
    AVERAGE = "average"
    EXACT_RANK = "exact-rank"
    APPROX_RANK = "approx-rank"


class Direction(_CodedEnum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class VolumeGeometry:
    """The volume metadata needed to validate trajectories against it."""

    frames: int
    video_height: int
    video_width: int


@dataclass(frozen=True, eq=False)
class FeatureMapVolume:
    """Dense T x H x W x C activation volume with source-video geometry.

    `data` is float32, indexed (t, y, x, c), and read-only after
    construction. `video_height`/`video_width` give the pixel geometry of
    the video the maps were computed from; trajectory coordinates live in
    that pixel space, not in cell space.
    """

    data: np.ndarray
    video_height: int
    video_width: int
    stream_tag: StreamTag = StreamTag.SPATIAL
    layer_tag: str = ""
    scale_tag: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 4:
            raise ValidationError(f"volume data must be 4-D (t, y, x, c), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValidationError(f"volume dimensions must all be >= 1, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("volume data contains non-finite values")
        if self.video_height < 1 or self.video_width < 1:
            raise ValidationError("video_height and video_width must be >= 1")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stream_tag", StreamTag(self.stream_tag))

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def channels(self):
        return self.data.shape[3]

    @property
    def geometry(self):
        return VolumeGeometry(self.frames, self.video_height, self.video_width)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A tracked point sequence: L (x, y) pixel positions from start_frame on.

    `points` is an (L, 2) float64 array with columns (x, y) in video pixel
    coordinates. `spatial_scale` is the side length in pixels of the window
    the trajectory was tracked at.
    """

    id: int
    start_frame: int
    points: np.ndarray
    spatial_scale: float

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64, order="C")
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
            raise ValidationError(
                f"trajectory {self.id}: points must be an (L, 2) array, got shape {points.shape}"
            )
        if not np.isfinite(points).all():
            raise ValidationError(f"trajectory {self.id}: points contain non-finite values")
        if self.id < 0:
            raise ValidationError(f"trajectory id must be >= 0, got {self.id}")
        if self.start_frame < 0:
            raise ValidationError(f"trajectory {self.id}: start_frame must be >= 0")
        if not (math.isfinite(self.spatial_scale) and self.spatial_scale > 0):
            raise ValidationError(f"trajectory {self.id}: spatial_scale must be positive")
        points.flags.writeable = False
        object.__setattr__(self, "points", points)

    @property
    def length(self):
        return self.points.shape[0]

    def validate_against(self, geom):
        """Check temporal and spatial bounds against a volume or VolumeGeometry."""
        if self.start_frame + self.length - 1 >= geom.frames:
            raise ValidationError(
                f"trajectory {self.id}: spans frames {self.start_frame}.."
                f"{self.start_frame + self.length - 1} but the volume has {geom.frames} frames"
            )
        x, y = self.points[:, 0], self.points[:, 1]
        if not ((x >= 0).all() and (x < geom.video_width).all()
                and (y >= 0).all() and (y < geom.video_height).all()):
            raise ValidationError(
                f"trajectory {self.id}: points outside "
                f"[0, {geom.video_width}) x [0, {geom.video_height})"
            )


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Fixed-dimension trajectory descriptors with frame assignments."""

    dim: int
    vectors: np.ndarray
    assigned_frames: np.ndarray
    trajectory_ids: np.ndarray
    pooling_kind: PoolingKind
    direction: Direction

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, order="C").reshape(-1, self.dim)
        frames = np.array(self.assigned_frames, dtype=np.int64)
        ids = np.array(self.trajectory_ids, dtype=np.int64)
        if self.dim < 1:
            raise ValidationError("descriptor dimension must be >= 1")
        if not (len(vectors) == len(frames) == len(ids)):
            raise ValidationError("descriptor row arrays have mismatched lengths")
        if not np.isfinite(vectors).all():
            raise ValidationError("descriptor vectors contain non-finite values")
        if len(frames) and frames.min() < 0:
            raise ValidationError("assigned frames must be >= 0")
        for arr, name in ((vectors, "vectors"), (frames, "assigned_frames"), (ids, "trajectory_ids")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "pooling_kind", PoolingKind(self.pooling_kind))
        object.__setattr__(self, "direction", Direction(self.direction))

    def __len__(self):
        return self.vectors.shape[0]

    @classmethod
    def empty(cls, dim, pooling_kind, direction):
        return cls(
            dim=dim,
            vectors=np.empty((0, dim)),
            assigned_frames=np.empty(0, dtype=np.int64),
            trajectory_ids=np.empty(0, dtype=np.int64),
            pooling_kind=pooling_kind,
            direction=direction,
        )


_SPLITS = ("train", "test")


@dataclass(frozen=True)
class LabelEntry:
    labels: frozenset
    split: str

    @property
    def single_label(self):
        if len(self.labels) != 1:
            raise ValidationError(f"expected a single label, got {sorted(self.labels)}")
        return next(iter(self.labels))


@dataclass(frozen=True, eq=False)
class LabeledVideoTable:
    """video_id -> (label set, train/test split) with a declared class count."""

    n_classes: int
    entries: dict

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")
        for vid, entry in self.entries.items():
            if entry.split not in _SPLITS:
                raise ValidationError(f"video {vid}: unknown split {entry.split!r}")
            if not entry.labels:
                raise ValidationError(f"video {vid}: empty label set")
            bad = [c for c in entry.labels if not 0 <= c < self.n_classes]
            if bad:
                raise ValidationError(
                    f"video {vid}: labels {bad} outside declared class count {self.n_classes}"
                )

    def ids(self, split=None):
        """Video ids in sorted order, optionally restricted to one split."""
        return sorted(
            vid for vid, e in self.entries.items() if split is None or e.split == split
        )

    def single_labels(self, ids):
        return np.array([self.entries[v].single_label for v in ids], dtype=np.int64)

    def positives_matrix(self, ids):
        out = np.zeros((len(ids), self.n_classes), dtype=bool)
        for i, v in enumerate(ids):
            for c in self.entries[v].labels:
                out[i, c] = True
        return out


# ---------------------------------------------------------------------------
# Volume format: magic, 7 u32 (T, H, W, C, video_height, video_width, stream
# code), two length-prefixed UTF-8 strings (layer_tag, scale_tag), then
# T*H*W*C little-endian float32 in (t, y, x, c) order.
# ---------------------------------------------------------------------------


def write_volume(volume, path):
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        for value in (
            volume.frames,
            volume.height,
            volume.width,
            volume.channels,
            volume.video_height,
            volume.video_width,
            volume.stream_tag.code,
        ):
            write_u32(f, value)
        write_string(f, volume.layer_tag)
        write_string(f, volume.scale_tag)
        f.write(volume.data.astype("<f4", copy=False).tobytes())


def read_volume(path):
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        expect_magic(f, VOLUME_MAGIC, "feature-map volume")
        header = {}
        for name in ("T", "H", "W", "C", "video_height", "video_width", "stream"):
            header[name] = read_u32(f, name)
            if name != "stream" and header[name] < 1:
                raise FormatError(f"header field {name} must be >= 1, got {header[name]}",
                                  offset=f.tell() - 4)
        try:
            stream = StreamTag.from_code(header["stream"])
        except FormatError as exc:
            raise FormatError(str(exc), offset=30) from None
        layer_tag = read_string(f, "layer_tag")
        scale_tag = read_string(f, "scale_tag")
        count = header["T"] * header["H"] * header["W"] * header["C"]
        expected = count * 4
        remaining = size - f.tell()
        if remaining < expected:
            raise SizeMismatchError(
                f"volume payload size mismatch: header declares {count} float32 values "
                f"({expected} bytes) but only {remaining} bytes remain",
                offset=f.tell(),
            )
        raw = read_exact(f, expected, "volume payload")
        data = np.frombuffer(raw, dtype="<f4").reshape(
            header["T"], header["H"], header["W"], header["C"]
        )
        return FeatureMapVolume(
            data=data,
            video_height=header["video_height"],
            video_width=header["video_width"],
            stream_tag=stream,
            layer_tag=layer_tag,
            scale_tag=scale_tag,
        )


# ---------------------------------------------------------------------------
# Trajectory format: UTF-8 text. Header line "#EPT-TRAJ v1 L=<L>", then one
# trajectory per line: "id start_frame scale x1,y1 x2,y2 ... xL,yL".
# ---------------------------------------------------------------------------


def write_trajectories(trajectories, path, length=None):
    if length is None:
        if not trajectories:
            length = DEFAULT_TRAJECTORY_LENGTH
        else:
            length = trajectories[0].length
    lines = [f"{TRAJECTORY_HEADER_PREFIX}{length}"]
    for tr in trajectories:
        if tr.length != length:
            raise ValidationError(
                f"trajectory {tr.id} has length {tr.length}, file header declares {length}"
            )
        pts = " ".join(f"{float(x)!r},{float(y)!r}" for x, y in tr.points)
        lines.append(f"{tr.id} {tr.start_frame} {float(tr.spatial_scale)!r} {pts}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_trajectories(path, volume_geom):
    """Parse a trajectory file and validate every row against volume_geom.

    volume_geom may be a FeatureMapVolume or a VolumeGeometry; only
    frames, video_height, and video_width are consulted.
    """
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if not header.startswith(TRAJECTORY_HEADER_PREFIX):
            raise FormatError(
                f"missing trajectory header, expected line starting with "
                f"{TRAJECTORY_HEADER_PREFIX!r}",
                line=1,
            )
        try:
            length = int(header[len(TRAJECTORY_HEADER_PREFIX):])
        except ValueError:
            raise FormatError(f"cannot parse trajectory length from header {header!r}", line=1)
        if length < 1:
            raise FormatError(f"declared trajectory length must be >= 1, got {length}", line=1)

        trajectories = []
        for lineno, line in enumerate(f, start=2):
            text = line.strip()
            if not text:
                continue
            tokens = text.split()
            if len(tokens) != 3 + length:
                raise FormatError(
                    f"expected {3 + length} fields (id, start_frame, scale, {length} points), "
                    f"got {len(tokens)}",
                    line=lineno,
                )
            try:
                traj_id = int(tokens[0])
                start_frame = int(tokens[1])
                scale = float(tokens[2])
                points = []
                for token in tokens[3:]:
                    xy = token.split(",")
                    if len(xy) != 2:
                        raise ValueError(f"malformed point {token!r}")
                    points.append((float(xy[0]), float(xy[1])))
            except ValueError as exc:
                raise FormatError(f"cannot parse trajectory line: {exc}", line=lineno) from None
            tr = Trajectory(id=traj_id, start_frame=start_frame, points=np.array(points),
                            spatial_scale=scale)
            tr.validate_against(volume_geom)
            trajectories.append(tr)
    return trajectories


# ---------------------------------------------------------------------------
# Label table format: text lines "video_id label split" where label is an
# integer or a comma-separated integer set and split is train|test.
# ---------------------------------------------------------------------------


def write_label_table(table, path):
    lines = []
    for vid in table.ids():
        entry = table.entries[vid]
        label = ",".join(str(c) for c in sorted(entry.labels))
        lines.append(f"{vid} {label} {entry.split}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_label_table(path, n_classes=None):
    """Read a label table; n_classes defaults to max label + 1."""
    entries = {}
    max_label = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = text.split()
            if len(tokens) != 3:
                raise FormatError(f"expected 'video_id label split', got {len(tokens)} fields",
                                  line=lineno)
            vid, label_text, split = tokens
            if vid in entries:
                raise ValidationError(f"duplicate video id {vid!r} (line {lineno})")
            try:
                labels = frozenset(int(tok) for tok in label_text.split(","))
            except ValueError:
                raise FormatError(f"cannot parse label set {label_text!r}", line=lineno) from None
            entries[vid] = LabelEntry(labels=labels, split=split)
            max_label = max(max_label, max(labels, default=0))
    if n_classes is None:
        n_classes = max_label + 1
    return LabeledVideoTable(n_classes=n_classes, entries=entries)


# ---------------------------------------------------------------------------
# Synthetic order-discrimination data
# ---------------------------------------------------------------------------


def synth_ordered_pair_dataset(
    seed,
    videos_per_class,
    trajectories_per_video,
    length=DEFAULT_TRAJECTORY_LENGTH,
    dim=8,
    noise_scale=0.05,
    cell_pixels=16,
    direction_spread=1.0,
):
    """Generate a two-class dataset separable by temporal order only.

    Every trajectory in a class-"a" video carries a feature sequence that
    drifts low-to-high along a per-trajectory direction; the paired class-"b"
    video holds the same sequences reversed in time, plus independent
    isotropic noise. The drift ramp is centered, so with noise_scale=0 the
    per-trajectory mean is identical across the two classes, while pooling
    that respects temporal order sees sequences of equal magnitude and
    opposite orientation. Drift directions are drawn from a cone around one
    dataset-level direction so the classes are linearly separable.

    Returns (volumes, trajectories, table): dicts keyed by video id plus a
    LabeledVideoTable. Deterministic for fixed arguments.
    """
    if videos_per_class < 1 or trajectories_per_video < 1:
        raise ValidationError("videos_per_class and trajectories_per_video must be >= 1")
    if length < 1:
        raise ValidationError("length must be >= 1")
    if dim < 2:
        raise ValidationError("dim must be >= 2")
    if noise_scale < 0:
        raise ValidationError("noise_scale must be >= 0")

    rng = np.random.default_rng(seed)
    n_traj = trajectories_per_video
    grid_w = math.ceil(math.sqrt(n_traj))
    grid_h = math.ceil(n_traj / grid_w)
    video_width = grid_w * cell_pixels
    video_height = grid_h * cell_pixels

    # Antisymmetric ramp around the sequence midpoint; dyadic values so the
    # float32 cast keeps exact sign symmetry between mirrored time steps.
    ramp = np.arange(1, length + 1, dtype=np.float64) - (length + 1) / 2.0

    base_direction = rng.normal(size=dim)
    base_direction /= np.linalg.norm(base_direction)

    cols = np.arange(n_traj) % grid_w
    rows = np.arange(n_traj) // grid_w
    shared_trajectories = [
        Trajectory(
            id=k,
            start_frame=0,
            points=np.repeat(
                [[(cols[k] + 0.5) * cell_pixels, (rows[k] + 0.5) * cell_pixels]], length, axis=0
            ),
            spatial_scale=float(cell_pixels),
        )
        for k in range(n_traj)
    ]

    volumes = {}
    trajectories = {}
    entries = {}
    for j in range(videos_per_class):
        perturb = rng.normal(size=(n_traj, dim))
        perturb /= np.linalg.norm(perturb, axis=1, keepdims=True)
        directions = base_direction[None, :] + direction_spread * perturb
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)

        drift = ramp[:, None, None] * directions[None, :, :]
        grid = np.zeros((length, grid_h, grid_w, dim))
        grid[:, rows, cols, :] = drift

        split = "train" if j % 2 == 0 else "test"
        for class_name, label, grid_data in (("a", 0, grid), ("b", 1, grid[::-1])):
            noise = rng.normal(size=grid.shape) * noise_scale
            vid = f"{class_name}{j:03d}"
            volumes[vid] = FeatureMapVolume(
                data=(grid_data + noise).astype(np.float32),
                video_height=video_height,
                video_width=video_width,
                stream_tag=StreamTag.SPATIAL,
                layer_tag="synthetic-drift",
                scale_tag="1x",
            )
            trajectories[vid] = list(shared_trajectories)
            entries[vid] = LabelEntry(labels=frozenset([label]), split=split)

    return volumes, trajectories, LabeledVideoTable(n_classes=2, entries=entries)


def resolve_thread_count(requested=None):
    """Worker count for parallel stages; the EPT_THREADS env var caps it."""
    count = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("EPT_THREADS")
    if cap:
        try:
            cap_value = int(cap)
        except ValueError:
            raise ValidationError(f"EPT_THREADS must be an integer, got {cap!r}") from None
        if cap_value < 1:
            raise ValidationError(f"EPT_THREADS must be >= 1, got {cap_value}")
        count = min(count, cap_value)
    return max(1, int(count))
