"""Descriptor encoding: PCA projection, diagonal-covariance GMM, Fisher Vectors.

Fisher Vectors are deliberately left unnormalized by descriptor count so
that per-frame vectors add linearly; power and L2 normalization are applied
at the video level by the pooling stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import expect_magic, read_array, read_u32, write_array, write_u32
from .core import DescriptorSet
from .errors import (
    DegeneracyError,
    FormatError,
    InsufficientDataError,
    SizeMismatchError,
    ValidationError,
)

MODEL_MAGIC = b"EPTM1\x00"

_RESPONSIBILITY_FLOOR = 1e-12
_EMPTY_COMPONENT_EPS = 1e-10
_VARIANCE_FLOOR_FACTOR = 1e-4
_VARIANCE_FLOOR_ABS = 1e-12


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Affine projection onto the top principal directions.

    `basis` has orthonormal rows, one per output dimension, ordered by
    decreasing variance; the sign convention makes each row's
    largest-magnitude entry positive.
    """

    mean: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        basis = np.array(self.basis, dtype=np.float64)
        if mean.ndim != 1 or basis.ndim != 2 or basis.shape[1] != mean.shape[0]:
            raise ValidationError("PCA mean and basis shapes are inconsistent")
        if basis.shape[0] > basis.shape[1]:
            raise ValidationError("PCA output dimension exceeds input dimension")
        gram = basis @ basis.T
        if np.abs(gram - np.eye(basis.shape[0])).max() > 1e-6:
            raise ValidationError("PCA basis rows are not orthonormal within 1e-6")
        for name, arr in (("mean", mean), ("basis", basis)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def input_dim(self):
        return self.mean.shape[0]

    @property
    def output_dim(self):
        return self.basis.shape[0]


def fit_pca(samples, n_components, max_samples=1_000_000, seed=0):
    """Fit a PCA basis on at most max_samples rows (seeded shuffle subsample)."""
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2:
        raise ValidationError(f"samples must be a 2-D array, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValidationError("samples contain non-finite values")
    n, dim = data.shape
    if n_components < 1 or n_components > dim:
        raise ValidationError(f"n_components must be in [1, {dim}], got {n_components}")
    if n < n_components:
        raise InsufficientDataError(
            f"need at least {n_components} samples to fit {n_components} components, got {n}"
        )
    if max_samples < n_components:
        raise ValidationError("max_samples must be >= n_components")
    if n > max_samples:
        keep = np.random.default_rng(seed).permutation(n)[:max_samples]
        data = data[keep]

    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / max(len(data) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    basis = eigvecs[:, order].T.copy()
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=mean, basis=basis)


def pca_transform(model, x):
    """Project one vector or a batch of row vectors: basis @ (x - mean)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != model.input_dim:
        raise ValidationError(
            f"input dimension {arr.shape[-1]} does not match model dimension {model.input_dim}"
        )
    if not np.isfinite(arr).all():
        raise ValidationError("input contains non-finite values")
    return (arr - model.mean) @ model.basis.T


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Diagonal-covariance Gaussian mixture.

    `fit_trace` holds the per-iteration total log-likelihoods recorded
    while fitting (None for models loaded from disk); `fit_reinits` counts
    emptied components that were reseeded during fitting.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: np.ndarray
    fit_trace: tuple | None = field(default=None, compare=False)
    fit_converged: bool | None = field(default=None, compare=False)
    fit_reinits: int = field(default=0, compare=False)

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        means = np.array(self.means, dtype=np.float64)
        variances = np.array(self.variances, dtype=np.float64)
        floor = np.array(self.variance_floor, dtype=np.float64)
        if weights.ndim != 1 or means.ndim != 2 or variances.shape != means.shape:
            raise ValidationError("GMM parameter shapes are inconsistent")
        if means.shape[0] != weights.shape[0] or floor.shape != (means.shape[1],):
            raise ValidationError("GMM parameter shapes are inconsistent")
        if not (np.isfinite(weights).all() and np.isfinite(means).all()
                and np.isfinite(variances).all()):
            raise ValidationError("GMM parameters contain non-finite values")
        if (weights <= 0).any() or abs(weights.sum() - 1.0) > 1e-9:
            raise ValidationError("mixture weights must be positive and sum to 1 within 1e-9")
        if (variances < floor - 1e-15).any():
            raise ValidationError("variances fall below the variance floor")
        for name, arr in (("weights", weights), ("means", means),
                          ("variances", variances), ("variance_floor", floor)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


def _component_log_densities(weights, means, variances, data):
    """log(w_k) + log N(x_i; mu_k, diag sigma2_k) as an (N, K) matrix."""
    inv_var = 1.0 / variances
    const = -0.5 * (
        means.shape[1] * np.log(2.0 * np.pi) + np.log(variances).sum(axis=1)
    )
    quad = (
        0.5 * (data**2) @ inv_var.T
        - data @ (means * inv_var).T
        + 0.5 * ((means**2) * inv_var).sum(axis=1)
    )
    return np.log(weights)[None, :] + const[None, :] - quad


def _log_norm_rows(matrix):
    peak = matrix.max(axis=1, keepdims=True)
    return peak + np.log(np.exp(matrix - peak).sum(axis=1, keepdims=True))


def _kmeans_plus_plus(data, k, rng):
    n = len(data)
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    dist2 = ((data - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = dist2.sum()
        if total > 0:
            pick = rng.choice(n, p=dist2 / total)
        else:
            pick = rng.integers(n)
        centers[i] = data[pick]
        dist2 = np.minimum(dist2, ((data - centers[i]) ** 2).sum(axis=1))
    return centers


def fit_gmm(samples, n_components, seed=0, max_iters=200, tol=1e-6):
    """Fit by EM with seeded k-means++ initialization.

    Variances are floored at 1e-4 times the per-dimension data variance.
    A component whose responsibility mass vanishes is reseeded at the
    sample the current model likes least; after n_components reseeds the
    fit aborts with a degeneracy error. Runs are bit-reproducible for a
    fixed seed.
    """
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2:
        raise ValidationError(f"samples must be a 2-D array, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValidationError("samples contain non-finite values")
    if n_components < 1:
        raise ValidationError("n_components must be >= 1")
    n = len(data)
    if n < n_components:
        raise InsufficientDataError(
            f"need at least {n_components} samples to fit {n_components} components, got {n}"
        )
    if max_iters < 1 or tol <= 0:
        raise ValidationError("max_iters must be >= 1 and tol > 0")

    rng = np.random.default_rng(seed)
    data_var = data.var(axis=0)
    floor = _VARIANCE_FLOOR_FACTOR * data_var + _VARIANCE_FLOOR_ABS

    means = _kmeans_plus_plus(data, n_components, rng)
    variances = np.tile(np.maximum(data_var, floor), (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    trace = []
    reinits = 0
    converged = False
    prev_ll = None
    for _ in range(max_iters):
        joint = _component_log_densities(weights, means, variances, data)
        point_ll = _log_norm_rows(joint)
        resp = np.exp(joint - point_ll)
        mass = resp.sum(axis=0)

        empty = np.flatnonzero(mass < _EMPTY_COMPONENT_EPS)
        if empty.size:
            means = means.copy()
            variances = variances.copy()
            weights = weights.copy()
            worst_first = np.argsort(point_ll[:, 0])
            for slot, k in enumerate(empty):
                if reinits >= n_components:
                    raise DegeneracyError(
                        f"{reinits} component reseeds exhausted; mixture is degenerate"
                    )
                reinits += 1
                means[k] = data[worst_first[slot % n]]
                variances[k] = np.maximum(data_var, floor)
                weights[k] = 1.0 / n_components
            weights /= weights.sum()
            continue

        ll = float(point_ll.sum())
        trace.append(ll)
        if prev_ll is not None and ll - prev_ll < tol * max(abs(prev_ll), 1e-12):
            converged = True
            break
        prev_ll = ll

        weights = mass / n
        means = resp.T @ data / mass[:, None]
        second = resp.T @ (data**2) / mass[:, None]
        variances = np.maximum(second - means**2, floor)

    return GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        variance_floor=floor,
        fit_trace=tuple(trace),
        fit_converged=converged,
        fit_reinits=reinits,
    )


@dataclass(frozen=True, eq=False)
class FisherVector:
    """Gradient statistics of descriptors against a GMM; length 2*K*D."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValidationError("Fisher vector values must be 1-D")
        if not np.isfinite(values).all():
            raise ValidationError("Fisher vector contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]


def _responsibilities(model, data):
    joint = _component_log_densities(model.weights, model.means, model.variances, data)
    resp = np.exp(joint - _log_norm_rows(joint))
    resp[resp < _RESPONSIBILITY_FLOOR] = 0.0
    return resp


def fisher_vector(model, descriptors):
    """Unnormalized Fisher Vector of a descriptor set against a GMM.

    Layout: K first-order D-blocks, then K second-order D-blocks. No
    division by the descriptor count, so vectors over disjoint descriptor
    sets add elementwise; an empty input yields the zero vector.
    """
    k, dim = model.n_components, model.dim
    data = np.asarray(descriptors, dtype=np.float64).reshape(-1, dim)
    if data.size and not np.isfinite(data).all():
        raise ValidationError("descriptors contain non-finite values")
    if len(data) == 0:
        return FisherVector(values=np.zeros(2 * k * dim))

    resp = _responsibilities(model, data)
    s0 = resp.sum(axis=0)
    s1 = resp.T @ data
    s2 = resp.T @ (data**2)

    sigma = np.sqrt(model.variances)
    first = (s1 - model.means * s0[:, None]) / (sigma * np.sqrt(model.weights)[:, None])
    second = (
        (s2 - 2.0 * model.means * s1 + model.means**2 * s0[:, None]) / model.variances
        - s0[:, None]
    ) / np.sqrt(2.0 * model.weights)[:, None]
    return FisherVector(values=np.concatenate([first.ravel(), second.ravel()]))


def power_l2_normalize(vector, alpha=0.5):
    """Signed power then L2 normalization; the zero vector maps to itself."""
    arr = np.asarray(vector, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValidationError("vector contains non-finite values")
    powered = np.sign(arr) * np.abs(arr) ** alpha
    norm = np.linalg.norm(powered)
    return powered / norm if norm > 0 else powered


@dataclass(frozen=True, eq=False)
class EncodingModel:
    """PCA projection plus (optionally) the GMM fitted on projected data."""

    pca: PcaModel
    gmm: GmmModel | None = None

    def __post_init__(self):
        if self.gmm is not None and self.gmm.dim != self.pca.output_dim:
            raise ValidationError(
                f"GMM dimension {self.gmm.dim} does not match PCA output "
                f"dimension {self.pca.output_dim}"
            )

    @property
    def fisher_dim(self):
        if self.gmm is None:
            raise ValidationError("encoding model has no mixture fitted yet")
        return 2 * self.gmm.n_components * self.gmm.dim


def frame_fisher_vectors(model, descriptors, frames):
    """Per-frame unnormalized Fisher Vectors as a (frames, 2KD) array.

    Descriptor rows are grouped by assigned frame; frames with no
    trajectories get zero rows.
    """
    if not isinstance(descriptors, DescriptorSet):
        raise ValidationError("descriptors must be a DescriptorSet")
    if model.gmm is None:
        raise ValidationError("encoding model has no mixture fitted yet")
    if len(descriptors) and descriptors.assigned_frames.max() >= frames:
        raise ValidationError(
            f"assigned frame {int(descriptors.assigned_frames.max())} outside "
            f"frame count {frames}"
        )
    out = np.zeros((frames, model.fisher_dim))
    if len(descriptors) == 0:
        return out
    projected = pca_transform(model.pca, descriptors.vectors)
    for frame in np.unique(descriptors.assigned_frames):
        rows = projected[descriptors.assigned_frames == frame]
        out[frame] = fisher_vector(model.gmm, rows).values
    return out


# ---------------------------------------------------------------------------
# Model file: magic, u32 (d, D), float64 mean and basis, u32 gmm-present
# flag, then u32 (K, D) and float64 weights, means, variances, floor.
# Parameters are stored as float64 so fitted models round-trip exactly.
# ---------------------------------------------------------------------------


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        write_u32(f, model.pca.input_dim)
        write_u32(f, model.pca.output_dim)
        write_array(f, model.pca.mean, "<f8")
        write_array(f, model.pca.basis, "<f8")
        write_u32(f, 0 if model.gmm is None else 1)
        if model.gmm is not None:
            write_u32(f, model.gmm.n_components)
            write_u32(f, model.gmm.dim)
            write_array(f, model.gmm.weights, "<f8")
            write_array(f, model.gmm.means, "<f8")
            write_array(f, model.gmm.variances, "<f8")
            write_array(f, model.gmm.variance_floor, "<f8")


def load_model(path):
    with open(path, "rb") as f:
        expect_magic(f, MODEL_MAGIC, "encoding model")
        d = read_u32(f, "input dimension")
        out_d = read_u32(f, "output dimension")
        if d < 1 or out_d < 1 or out_d > d:
            raise FormatError(f"inconsistent PCA dimensions ({d}, {out_d})", offset=6)
        mean = read_array(f, "<f8", d, "PCA mean")
        basis = read_array(f, "<f8", out_d * d, "PCA basis").reshape(out_d, d)
        pca = PcaModel(mean=mean, basis=basis)
        gmm = None
        if read_u32(f, "gmm flag"):
            k = read_u32(f, "component count")
            gmm_d = read_u32(f, "gmm dimension")
            if k < 1 or gmm_d != out_d:
                raise FormatError(
                    f"inconsistent GMM dimensions (K={k}, D={gmm_d}, PCA D={out_d})",
                    offset=f.tell() - 8,
                )
            gmm = GmmModel(
                weights=read_array(f, "<f8", k, "weights"),
                means=read_array(f, "<f8", k * gmm_d, "means").reshape(k, gmm_d),
                variances=read_array(f, "<f8", k * gmm_d, "variances").reshape(k, gmm_d),
                variance_floor=read_array(f, "<f8", gmm_d, "variance floor"),
            )
        return EncodingModel(pca=pca, gmm=gmm)


# ---------------------------------------------------------------------------
# Per-frame Fisher Vector file: header (T, dim) as u32, then T rows of
# float64. Rows for frames with no trajectories are all-zero.
# ---------------------------------------------------------------------------


def save_frame_fvs(values, path):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"per-frame Fisher Vectors must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as f:
        write_u32(f, arr.shape[0])
        write_u32(f, arr.shape[1])
        write_array(f, arr, "<f8")


def load_frame_fvs(path):
    with open(path, "rb") as f:
        frames = read_u32(f, "frame count")
        dim = read_u32(f, "fisher dimension")
        expected = frames * dim * 8
        raw = f.read(expected)
        if len(raw) != expected:
            raise SizeMismatchError(
                f"per-frame payload size mismatch: header declares {frames}x{dim} float64 "
                f"({expected} bytes), got {len(raw)} bytes",
                offset=8,
            )
        return np.frombuffer(raw, dtype="<f8").reshape(frames, dim).copy()
