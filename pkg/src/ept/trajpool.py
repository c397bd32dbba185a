"""Trajectory-level pooling of feature-map volumes into descriptors.

Each trajectory is turned into one fixed-dimension vector: sample the
channel vectors along the trajectory's points, then pool the resulting
sequence by plain averaging, by the closed-form linear approximation of
rank pooling, or by solving the pairwise ranking objective directly.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .binio import expect_magic, read_exact, read_u32, write_u32
from .core import (
    DescriptorSet,
    Direction,
    PoolingKind,
    resolve_thread_count,
)
from .errors import FormatError, SizeMismatchError, ValidationError

log = logging.getLogger(__name__)

DESCRIPTOR_MAGIC = b"EPTD1\x00"

_POOL_CHUNK = 8192
_EXACT_CHECK_INTERVAL = 25


@dataclass(frozen=True)
class RankPoolConfig:
    """Ranking-objective solver settings.

    lambda_ weights the quadratic regularizer. The solver stops once the
    best objective found improves by less than `tolerance` (relative)
    over a check window, or after max_iters subgradient steps.
    """

    lambda_: float = 1.0
    max_iters: int = 200
    tolerance: float = 1e-6
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValidationError("lambda_ must be >= 0")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.tolerance <= 0:
            raise ValidationError("tolerance must be > 0")
        object.__setattr__(self, "direction", Direction(self.direction))


@dataclass(frozen=True)
class RankPoolInfo:
    """Optional solver diagnostics returned by exact_rank_pool."""

    converged: bool
    iterations: int
    objective: float
    objective_trace: tuple = field(repr=False, default=())


def _as_sequence(seq):
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValidationError(f"feature sequence must be (L, d) with L >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("feature sequence contains non-finite values")
    return arr


def _cell_indices(points, volume):
    """Map pixel coordinates to feature-map cells by proportional scaling."""
    cx = np.floor(points[..., 0] * volume.width / volume.video_width).astype(np.int64)
    cy = np.floor(points[..., 1] * volume.height / volume.video_height).astype(np.int64)
    return np.clip(cy, 0, volume.height - 1), np.clip(cx, 0, volume.width - 1)


def _sample_batch(volume, points, start_frames, window_cells, data=None):
    """Sample (n, L, C) float64 sequences for a batch of equal-length trajectories.

    points: (n, L, 2) pixel coordinates; start_frames: (n,). The sampled
    vector at each step is the mean over a window_cells x window_cells cell
    window centered on the mapped cell, with out-of-bounds cells excluded
    from the mean. `data` may hold the volume payload pre-cast to float64.
    """
    n, length = points.shape[:2]
    if data is None:
        data = volume.data.astype(np.float64)
    t_idx = start_frames[:, None] + np.arange(length)[None, :]
    cy, cx = _cell_indices(points, volume)
    if window_cells == 1:
        return data[t_idx, cy, cx, :]

    radius = window_cells // 2
    acc = np.zeros((n, length, volume.channels))
    count = np.zeros((n, length, 1))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            yy = cy + dy
            xx = cx + dx
            valid = (yy >= 0) & (yy < volume.height) & (xx >= 0) & (xx < volume.width)
            values = data[
                t_idx, np.clip(yy, 0, volume.height - 1), np.clip(xx, 0, volume.width - 1), :
            ]
            acc += values * valid[..., None]
            count += valid[..., None]
    return acc / count


def _check_window(window_cells):
    if window_cells < 1 or window_cells % 2 == 0:
        raise ValidationError(f"window_cells must be a positive odd count, got {window_cells}")


def _check_temporal(volume, trajectories):
    for tr in trajectories:
        if tr.start_frame + tr.length > volume.frames:
            raise ValidationError(
                f"trajectory {tr.id}: frame range {tr.start_frame}.."
                f"{tr.start_frame + tr.length - 1} outside volume with {volume.frames} frames"
            )


def sample_sequence(volume, trajectory, window_cells=1):
    """Sample the (L, C) feature sequence along one trajectory."""
    _check_window(window_cells)
    _check_temporal(volume, [trajectory])
    return _sample_batch(
        volume,
        trajectory.points[None, :, :],
        np.array([trajectory.start_frame]),
        window_cells,
    )[0]


def average_pool(seq):
    """Mean of the sequence vectors; ignores temporal order."""
    return _as_sequence(seq).mean(axis=0)


def cumulative_normalized(seq):
    """L2-normalized cumulative sums F_t = S_t / ||S_t||, with 0 for ||S_t|| = 0.

    Accepts (L, d) or a batched (..., L, d) array; sums run over the
    second-to-last axis.
    """
    arr = np.asarray(seq, dtype=np.float64)
    sums = np.cumsum(arr, axis=-2)
    norms = np.linalg.norm(sums, axis=-1, keepdims=True)
    return np.divide(sums, norms, out=np.zeros_like(sums), where=norms > 0)


def _approx_batch(seqs):
    """Closed-form rank pooling of an (n, L, d) batch.

    Equals the sum of all pairwise differences F_j - F_i (i < j) of the
    normalized cumulative sums, folded into per-step weights 2t - L - 1.
    The per-step weight and the cumulative-sum normalization are combined
    into one scaling so only a single weighted reduction runs over the
    batch. Sequences with no temporal change pool to exactly zero: the
    weights cancel in exact arithmetic, and the short-circuit keeps that
    exact under floating point.
    """
    length = seqs.shape[1]
    sums = np.cumsum(seqs, axis=1)
    norms = np.sqrt(np.einsum("nld,nld->nl", sums, sums))
    weights = 2.0 * np.arange(1, length + 1) - length - 1
    scaled = np.divide(
        np.broadcast_to(weights, norms.shape), norms,
        out=np.zeros_like(norms), where=norms > 0,
    )
    pooled = np.einsum("nt,ntd->nd", scaled, sums)
    static = (seqs == seqs[:, :1, :]).all(axis=(1, 2))
    pooled[static] = 0.0
    return pooled


def approx_rank_pool(seq):
    """Closed-form approximate rank pooling of an (L, d) sequence."""
    return _approx_batch(_as_sequence(seq)[None, :, :])[0]


def _ranking_objective(mu, diffs, lambda_):
    margins = diffs @ mu
    return 0.5 * lambda_ * float(mu @ mu) + float(np.maximum(0.0, 1.0 - margins).sum())


def exact_rank_pool(seq, config=None, return_info=False):
    """Minimize the pairwise ranking objective over the normalized cumulative sums.

    Subgradient descent from zero with step 1/(lambda * iter), projected
    onto the ball that must contain the optimum, keeping the best iterate
    seen. The returned vector never scores a worse objective than either
    the zero vector or the closed-form approximation. On non-convergence
    the best iterate so far is returned and a warning is logged; no
    exception is raised for that case.
    """
    arr = _as_sequence(seq)
    if arr.shape[0] < 2:
        raise ValidationError("exact rank pooling needs a sequence of length >= 2")
    config = config or RankPoolConfig()

    normalized = cumulative_normalized(arr)
    i_idx, j_idx = np.triu_indices(arr.shape[0], k=1)
    diffs = normalized[j_idx] - normalized[i_idx]
    lambda_ = config.lambda_

    mu = np.zeros(arr.shape[1])
    best_mu = mu.copy()
    best_obj = _ranking_objective(mu, diffs, lambda_)
    approx = diffs.sum(axis=0)
    approx_obj = _ranking_objective(approx, diffs, lambda_)
    if approx_obj < best_obj:
        best_mu, best_obj = approx.copy(), approx_obj

    radius = np.sqrt(2.0 * len(diffs) / lambda_) if lambda_ > 0 else None
    trace = [best_obj]
    window_start = best_obj
    converged = False
    iterations = 0
    for t in range(1, config.max_iters + 1):
        iterations = t
        margins = diffs @ mu
        grad = lambda_ * mu - diffs[margins < 1.0].sum(axis=0)
        step = 1.0 / (lambda_ * t) if lambda_ > 0 else 1.0 / np.sqrt(t)
        mu = mu - step * grad
        if radius is not None:
            norm = np.linalg.norm(mu)
            if norm > radius:
                mu *= radius / norm
        obj = _ranking_objective(mu, diffs, lambda_)
        if obj < best_obj:
            best_mu, best_obj = mu.copy(), obj
        trace.append(best_obj)
        if t % _EXACT_CHECK_INTERVAL == 0:
            if window_start - best_obj <= config.tolerance * max(abs(window_start), 1e-12):
                converged = True
                break
            window_start = best_obj

    if not converged:
        log.warning(
            "ranking solver stopped after %d iterations without meeting tolerance %g "
            "(best objective %.6g)",
            iterations, config.tolerance, best_obj,
        )
    if return_info:
        info = RankPoolInfo(
            converged=converged,
            iterations=iterations,
            objective=best_obj,
            objective_trace=tuple(trace),
        )
        return best_mu, info
    return best_mu


def _pool_batch(seqs, kind, rank_config):
    if kind is PoolingKind.AVERAGE:
        return seqs.mean(axis=1), 0
    if kind is PoolingKind.APPROX_RANK:
        return _approx_batch(seqs), 0
    failed = 0
    out = np.empty((seqs.shape[0], seqs.shape[2]))
    for i in range(seqs.shape[0]):
        out[i], info = exact_rank_pool(seqs[i], rank_config, return_info=True)
        failed += 0 if info.converged else 1
    return out, failed


def pool_trajectories(
    volume,
    trajectories,
    kind,
    direction=None,
    window_cells=1,
    rank_config=None,
    threads=None,
):
    """Pool every trajectory of a volume into one descriptor row each.

    Each descriptor is assigned to the middle frame of its trajectory's
    span, start_frame + (L - 1) // 2. With direction backward the sampled
    sequence is reversed in time before pooling. Rows keep the input
    trajectory order; results are identical for any thread count.
    """
    kind = PoolingKind(kind)
    if direction is None:
        direction = rank_config.direction if rank_config is not None else Direction.FORWARD
    direction = Direction(direction)
    if rank_config is not None and rank_config.direction is not direction:
        raise ValidationError(
            f"direction argument {direction.value!r} conflicts with "
            f"rank_config.direction {rank_config.direction.value!r}"
        )
    _check_window(window_cells)

    dim = volume.channels
    if not trajectories:
        return DescriptorSet.empty(dim, kind, direction)

    length = trajectories[0].length
    for tr in trajectories:
        if tr.length != length:
            raise ValidationError(
                f"mixed trajectory lengths in one batch: {length} and {tr.length} "
                f"(trajectory {tr.id})"
            )
    _check_temporal(volume, trajectories)

    points = np.stack([tr.points for tr in trajectories])
    starts = np.array([tr.start_frame for tr in trajectories], dtype=np.int64)
    ids = np.array([tr.id for tr in trajectories], dtype=np.int64)

    n = len(trajectories)
    vectors = np.empty((n, dim))
    chunk_starts = list(range(0, n, _POOL_CHUNK))
    failures = np.zeros(len(chunk_starts), dtype=np.int64)
    data = volume.data.astype(np.float64)

    def run_chunk(chunk_index):
        lo = chunk_starts[chunk_index]
        hi = min(lo + _POOL_CHUNK, n)
        seqs = _sample_batch(volume, points[lo:hi], starts[lo:hi], window_cells, data=data)
        if direction is Direction.BACKWARD:
            seqs = seqs[:, ::-1, :]
        vectors[lo:hi], failures[chunk_index] = _pool_batch(seqs, kind, rank_config)

    workers = resolve_thread_count(threads)
    if workers == 1 or len(chunk_starts) == 1:
        for chunk_index in range(len(chunk_starts)):
            run_chunk(chunk_index)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, range(len(chunk_starts))))

    total_failures = int(failures.sum())
    if total_failures:
        log.warning("%d of %d ranking solves did not converge", total_failures, n)

    return DescriptorSet(
        dim=dim,
        vectors=vectors,
        assigned_frames=starts + (length - 1) // 2,
        trajectory_ids=ids,
        pooling_kind=kind,
        direction=direction,
    )


# ---------------------------------------------------------------------------
# Descriptor file: magic, header (count, d, pooling code, direction code) as
# u32, then rows of (id u32, assigned_frame u32, d float32).
# ---------------------------------------------------------------------------


def _row_dtype(dim):
    return np.dtype([("id", "<u4"), ("frame", "<u4"), ("vec", "<f4", (dim,))])


def write_descriptors(descriptors, path):
    if len(descriptors):
        for name, arr in (("trajectory id", descriptors.trajectory_ids),
                          ("assigned frame", descriptors.assigned_frames)):
            if arr.min() < 0 or arr.max() > 0xFFFFFFFF:
                raise ValidationError(f"{name} outside the unsigned 32-bit file range")
    rows = np.empty(len(descriptors), dtype=_row_dtype(descriptors.dim))
    rows["id"] = descriptors.trajectory_ids
    rows["frame"] = descriptors.assigned_frames
    rows["vec"] = descriptors.vectors.astype(np.float32)
    with open(path, "wb") as f:
        f.write(DESCRIPTOR_MAGIC)
        write_u32(f, len(descriptors))
        write_u32(f, descriptors.dim)
        write_u32(f, descriptors.pooling_kind.code)
        write_u32(f, descriptors.direction.code)
        f.write(rows.tobytes())


def read_descriptors(path):
    with open(path, "rb") as f:
        expect_magic(f, DESCRIPTOR_MAGIC, "descriptor")
        count = read_u32(f, "descriptor count")
        dim = read_u32(f, "descriptor dimension")
        if dim < 1:
            raise FormatError(f"descriptor dimension must be >= 1, got {dim}", offset=f.tell() - 4)
        kind = PoolingKind.from_code(read_u32(f, "pooling code"))
        direction = Direction.from_code(read_u32(f, "direction code"))
        dtype = _row_dtype(dim)
        expected = count * dtype.itemsize
        raw = f.read(expected)
        if len(raw) != expected:
            raise SizeMismatchError(
                f"descriptor payload size mismatch: header declares {count} rows "
                f"({expected} bytes), got {len(raw)} bytes",
                offset=22,
            )
        rows = np.frombuffer(raw, dtype=dtype)
        return DescriptorSet(
            dim=dim,
            vectors=rows["vec"].astype(np.float64),
            assigned_frames=rows["frame"].astype(np.int64),
            trajectory_ids=rows["id"].astype(np.int64),
            pooling_kind=kind,
            direction=direction,
        )
