"""One-vs-all linear SVM training, softmax scores, and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_BIAS_SCALE = 4.0
_CHECK_INTERVAL = 50


@dataclass(frozen=True, eq=False)
class LinearSvmModel:
    """Per-class hyperplanes (weights, biases) from one-vs-all training."""

    weights: np.ndarray
    biases: np.ndarray
    C: float
    objectives: tuple = ()
    objective_traces: tuple = field(default=(), repr=False)
    converged: tuple = ()

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        biases = np.array(self.biases, dtype=np.float64)
        if weights.ndim != 2 or biases.shape != (weights.shape[0],):
            raise ValidationError("SVM weights and biases have inconsistent shapes")
        if not (np.isfinite(weights).all() and np.isfinite(biases).all()):
            raise ValidationError("SVM parameters contain non-finite values")
        weights.flags.writeable = False
        biases.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def n_classes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]


def hinge_objective(features, targets, w, b, C):
    """0.5 ||w||^2 + C * sum of hinge losses for +-1 targets."""
    margins = targets * (features @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - margins).sum())


def _optimal_bias(features, targets, w, C):
    """Exact 1-D minimizer of the hinge sum given fixed weights.

    The loss is convex piecewise-linear in the bias, so a minimum sits at
    one of the breakpoints where a margin crosses 1.
    """
    breakpoints = (1.0 - targets * (features @ w)) / targets
    losses = [
        float(np.maximum(0.0, 1.0 - targets * (features @ w + b)).sum()) for b in breakpoints
    ]
    return float(breakpoints[int(np.argmin(losses))])


def _solve_binary_hinge(features, targets, C, tol, max_iters):
    """Deterministic dual coordinate descent on the hinge-loss primal.

    Features are centered internally and the bias rides along as a scaled
    constant feature, so every dual box update has a closed form and the
    augmented bias stays near zero; sweeps visit examples in a fixed
    order, so runs are reproducible. The bias is re-fit exactly at the end
    against the stated objective (which does not regularize it), and the
    recorded trace is the best objective seen so far, hence non-increasing.
    """
    n, dim = features.shape
    center = features.mean(axis=0)
    shifted = features - center
    augmented = np.hstack([shifted, np.full((n, 1), _BIAS_SCALE)])
    row_norms = (augmented**2).sum(axis=1)
    alpha = np.zeros(n)
    wa = np.zeros(dim + 1)

    def true_objective(vec):
        bias = vec[dim] * _BIAS_SCALE - vec[:dim] @ center
        return hinge_objective(features, targets, vec[:dim], bias, C)

    best = wa.copy()
    best_obj = true_objective(wa)
    trace = [best_obj]
    window_start = best_obj
    converged = False

    for sweep in range(1, max_iters + 1):
        max_step = 0.0
        for i in range(n):
            gradient = targets[i] * (augmented[i] @ wa) - 1.0
            updated = min(max(alpha[i] - gradient / row_norms[i], 0.0), C)
            step = updated - alpha[i]
            if step != 0.0:
                wa += step * targets[i] * augmented[i]
                alpha[i] = updated
                max_step = max(max_step, abs(step))

        obj = true_objective(wa)
        if obj < best_obj:
            best_obj, best = obj, wa.copy()
        trace.append(best_obj)
        if max_step == 0.0:
            converged = True
            break
        if sweep % _CHECK_INTERVAL == 0:
            if window_start - best_obj <= tol * max(abs(window_start), 1e-12):
                converged = True
                break
            window_start = best_obj

    w = best[:dim]
    b = best[dim] * _BIAS_SCALE - w @ center
    refit_b = _optimal_bias(features, targets, w, C)
    if hinge_objective(features, targets, w, refit_b, C) < hinge_objective(
        features, targets, w, b, C
    ):
        b = refit_b
    final = hinge_objective(features, targets, w, b, C)
    trace.append(min(trace[-1], final))
    return w, b, final, tuple(trace), converged


def train_ovr(features, labels, C=100.0, tol=1e-5, max_iters=20000, seed=0):
    """Train one-vs-all hinge-loss classifiers.

    labels is either an (n,) integer vector or an (n, k) boolean matrix for
    multi-label data. The solver is full-batch and deterministic; seed is
    accepted for interface stability but unused.
    """
    del seed
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValidationError("features contain non-finite values")
    if C <= 0 or tol <= 0 or max_iters < 1:
        raise ValidationError("C and tol must be > 0 and max_iters >= 1")

    label_arr = np.asarray(labels)
    if label_arr.ndim == 1:
        classes = np.unique(label_arr)
        if classes.size < 2:
            raise ValidationError("training needs at least 2 classes")
        n_classes = int(label_arr.max()) + 1
        positives = np.zeros((x.shape[0], n_classes), dtype=bool)
        positives[np.arange(x.shape[0]), label_arr.astype(np.int64)] = True
    elif label_arr.ndim == 2:
        positives = label_arr.astype(bool)
        n_classes = positives.shape[1]
        if n_classes < 2:
            raise ValidationError("training needs at least 2 classes")
    else:
        raise ValidationError("labels must be an (n,) vector or an (n, k) matrix")
    if positives.shape[0] != x.shape[0]:
        raise ValidationError("feature and label counts differ")

    weights = np.zeros((n_classes, x.shape[1]))
    biases = np.zeros(n_classes)
    objectives = []
    traces = []
    converged = []
    for k in range(n_classes):
        targets = np.where(positives[:, k], 1.0, -1.0)
        if (targets > 0).all() or (targets < 0).all():
            raise ValidationError(
                f"class {k} has no {'negative' if (targets > 0).all() else 'positive'} "
                f"training examples"
            )
        w, b, obj, trace, ok = _solve_binary_hinge(x, targets, C, tol, max_iters)
        weights[k] = w
        biases[k] = b
        objectives.append(obj)
        traces.append(trace)
        converged.append(ok)

    return LinearSvmModel(
        weights=weights,
        biases=biases,
        C=C,
        objectives=tuple(objectives),
        objective_traces=tuple(traces),
        converged=tuple(converged),
    )


def decision_scores(model, features):
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValidationError(
            f"feature dimension {x.shape[-1]} does not match model dimension {model.dim}"
        )
    return x @ model.weights.T + model.biases


def predict_probs(model, features):
    """Softmax over the per-class SVM scores."""
    scores = decision_scores(model, features)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Per-class and mean metric values plus optional confusion counts."""

    metric: str
    per_class: dict
    mean_value: float
    confusion: np.ndarray | None = None
    warnings: tuple = ()
    details: dict = field(default_factory=dict)

    def to_text(self):
        lines = [f"metric: {self.metric}", f"mean: {self.mean_value:.6f}"]
        for cls in sorted(self.per_class):
            lines.append(f"class {cls}: {self.per_class[cls]:.6f}")
        for warning in self.warnings:
            lines.append(f"warning: {warning}")
        return "\n".join(lines)

    def to_key_values(self):
        lines = [f"metric={self.metric}", f"mean={self.mean_value!r}"]
        for cls in sorted(self.per_class):
            lines.append(f"class_{cls}={self.per_class[cls]!r}")
        for key in sorted(self.details):
            lines.append(f"{key}={self.details[key]}")
        if self.warnings:
            lines.append(f"warnings={'; '.join(self.warnings)}")
        return "\n".join(lines)


def average_precision(scores, positives):
    """AP of one ranking: mean precision at each positive, stable tie order."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValidationError("scores and positives must be matching 1-D arrays")
    if not positives.any():
        raise ValidationError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    ranked = positives[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return float((hits[ranked] / ranks[ranked]).mean())


def mean_average_precision(scores, positives):
    """mAP over classes; classes with no positives are excluded with a warning."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(positives, dtype=bool)
    if scores.shape != mask.shape or scores.ndim != 2:
        raise ValidationError("scores and positives must be matching (n, k) matrices")
    per_class = {}
    warnings = []
    for k in range(scores.shape[1]):
        if not mask[:, k].any():
            warnings.append(f"class {k} has no positives and was excluded")
            continue
        per_class[k] = average_precision(scores[:, k], mask[:, k])
    if not per_class:
        raise ValidationError("no class with positives to evaluate")
    return EvalReport(
        metric="map",
        per_class=per_class,
        mean_value=float(np.mean(list(per_class.values()))),
        warnings=tuple(warnings),
    )


def top1_accuracy(scores, labels):
    """Fraction of rows whose argmax matches the label; ties pick the lowest class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValidationError("scores must be (n, k) and labels (n,)")
    n_classes = scores.shape[1]
    if labels.size and not ((labels >= 0).all() and (labels < n_classes).all()):
        raise ValidationError("labels outside the score matrix's class range")
    predicted = scores.argmax(axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    per_class = {}
    for k in range(n_classes):
        total = int((labels == k).sum())
        if total:
            per_class[k] = float(confusion[k, k] / total)
    return EvalReport(
        metric="top1",
        per_class=per_class,
        mean_value=float((predicted == labels).mean()) if labels.size else 0.0,
        confusion=confusion,
    )


def save_svm_model(model, path):
    np.savez(
        path,
        weights=model.weights,
        biases=model.biases,
        C=np.float64(model.C),
        objectives=np.asarray(model.objectives, dtype=np.float64),
    )


def load_svm_model(path):
    with np.load(path) as data:
        return LinearSvmModel(
            weights=data["weights"],
            biases=data["biases"],
            C=float(data["C"]),
            objectives=tuple(float(v) for v in data["objectives"]),
        )
