"""Adam, stratified k-fold cross-validation and classification metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .models import CLASS_NAMES, N_CLASSES, NetworkSpec, forward, init_weights
from .ops import categorical_cross_entropy
from .persistence import save_weights
from .tensor import Tensor, derive_seed, no_grad, seeded_rng

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 75


# --- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient of {name}", params[name].shape, g.shape)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float32)
            state.v[name] = np.zeros(p.shape, dtype=np.float32)
        m, v = state.m[name], state.v[name]
        g = g.astype(np.float32, copy=False)
        m *= np.float32(state.beta1)
        m += np.float32(1.0 - state.beta1) * g
        v *= np.float32(state.beta2)
        v += np.float32(1.0 - state.beta2) * (g * g)
        step = (state.lr / bc1) * m / (np.sqrt(v / np.float32(bc2)) + np.float32(state.eps))
        p -= step.astype(np.float32, copy=False)
    return params, state


# --- folds -------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    assignment: np.ndarray
    labels: np.ndarray

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def class_counts(self, n_classes: int | None = None) -> np.ndarray:
        """``[k, C]`` matrix of per-fold per-class sample counts."""
        c = n_classes or int(self.labels.max()) + 1
        out = np.zeros((self.k, c), dtype=np.int64)
        np.add.at(out, (self.assignment, self.labels), 1)
        return out

    def audit(self, groups: Sequence | None = None) -> list[str]:
        """Invariant violations (empty list when the plan is sound)."""
        problems = []
        n = len(self.labels)
        if len(self.assignment) != n:
            problems.append("assignment length differs from label count")
        if np.any((self.assignment < 0) | (self.assignment >= self.k)):
            problems.append("fold index out of range")
        folds = [set(self.val_indices(f).tolist()) for f in range(self.k)]
        if set().union(*folds) != set(range(n)):
            problems.append("folds do not cover every sample")
        if sum(len(f) for f in folds) != n:
            problems.append("folds overlap")
        if any(not f for f in folds):
            problems.append("empty fold")
        if groups is None:
            counts = self.class_counts()
            spread = counts.max(axis=0) - counts.min(axis=0)
            if np.any(spread > 1):
                problems.append(f"per-class fold counts differ by more than 1: {spread.tolist()}")
        else:
            seen: dict = {}
            for g, f in zip(groups, self.assignment):
                if seen.setdefault(g, f) != f:
                    problems.append(f"group {g!r} split across folds")
                    break
        return problems


def make_stratified_folds(labels: Sequence[int], k: int = 10, seed: int = 0,
                          groups: Sequence | None = None) -> FoldPlan:
    """Seeded within-class shuffle, then round-robin fold assignment.

    With ``groups`` (e.g. the source id of each augmented image), whole groups
    are assigned so derivatives always share their source's fold; the
    stratification then holds at group level.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValidationError(f"k must be >= 2 for a validation fold, got {k}")
    if groups is None:
        unit_ids = np.arange(len(labels))
        unit_labels = labels
        unit_of = unit_ids
    else:
        keys = list(dict.fromkeys(groups))
        index = {g: i for i, g in enumerate(keys)}
        unit_of = np.array([index[g] for g in groups])
        unit_labels = np.full(len(keys), -1)
        for u, lab in zip(unit_of, labels):
            if unit_labels[u] not in (-1, lab):
                raise ValidationError(f"group {keys[u]!r} mixes classes")
            unit_labels[u] = lab
        unit_ids = np.arange(len(keys))

    rng = seeded_rng(seed, "folds")
    unit_fold = np.empty(len(unit_ids), dtype=np.int64)
    offset = 0
    for c in np.unique(unit_labels):
        members = unit_ids[unit_labels == c]
        if len(members) < k:
            raise ValidationError(f"class {int(c)} has {len(members)} samples, fewer than k={k}")
        members = members[rng.permutation(len(members))]
        unit_fold[members] = (np.arange(len(members)) + offset) % k
        offset = (offset + len(members)) % k
    return FoldPlan(k, unit_fold[unit_of], labels)


def stratified_split(labels: Sequence[int], train_fraction: float = 0.9, seed: int = 0,
                     groups: Sequence | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Seeded holdout split, stratified by class and keeping groups whole.

    Each class sends ``max(1, round((1 - train_fraction) * n_groups))`` of its
    groups to validation (none when the class has a single group).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    keys = list(dict.fromkeys(groups)) if groups is not None else list(range(len(labels)))
    index = {g: i for i, g in enumerate(keys)}
    unit_of = np.array([index[g] for g in groups]) if groups is not None else np.arange(len(labels))
    unit_labels = np.zeros(len(keys), dtype=np.int64)
    unit_labels[unit_of] = labels
    rng = seeded_rng(seed, "holdout")
    is_val = np.zeros(len(keys), dtype=bool)
    for c in np.unique(unit_labels):
        members = np.flatnonzero(unit_labels == c)
        if len(members) < 2:
            continue
        n_val = max(1, int(round((1.0 - train_fraction) * len(members))))
        is_val[members[rng.permutation(len(members))[:n_val]]] = True
    val = is_val[unit_of]
    return np.flatnonzero(~val), np.flatnonzero(val)


# --- metrics -----------------------------------------------------------------


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _check_confusion(conf) -> np.ndarray:
    c = np.asarray(conf)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError("confusion matrix", "square", c.shape)
    if np.any(c < 0):
        raise ValidationError("confusion counts must be non-negative")
    if c.sum() == 0:
        raise ValidationError("confusion matrix holds no samples")
    return c


def accuracy(conf) -> float:
    """Correct predictions over all predictions (trace / total)."""
    c = _check_confusion(conf)
    return float(np.trace(c) / c.sum())


def mean_sensitivity(conf) -> float:
    """Unweighted mean per-class recall; classes without samples are skipped."""
    c = _check_confusion(conf)
    support = c.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(c)[present] / support[present]))


# --- training loops ----------------------------------------------------------


def _gather(inputs, idx: np.ndarray):
    return [np.asarray(x[idx], dtype=np.float32) for x in inputs]


def _as_inputs(inputs) -> list:
    return list(inputs) if isinstance(inputs, (list, tuple)) else [inputs]


def train_step(spec: NetworkSpec, weights: dict[str, np.ndarray], state: AdamState, xb, yb,
               loss_fn: Callable = categorical_cross_entropy) -> float:
    params = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
    out = forward(spec, params, xb if len(xb) > 1 else xb[0])
    loss = loss_fn(out, yb)
    loss.backward()
    adam_step(weights, {k: p.grad for k, p in params.items()}, state)
    return float(loss.data.item())


def train_epoch(spec: NetworkSpec, weights: dict[str, np.ndarray], state: AdamState, inputs, targets,
                batch_size: int = DEFAULT_BATCH_SIZE, rng: np.random.Generator | None = None,
                loss_fn: Callable = categorical_cross_entropy) -> list[float]:
    """One pass over the data; returns the loss of every batch.

    Each batch loss (and so its gradient) is the mean over the batch's own
    rows, including a short final batch.
    """
    xs = _as_inputs(inputs)
    n = len(targets)
    if n == 0:
        raise ValidationError("no training samples")
    if any(len(x) != n for x in xs):
        raise ShapeError("inputs vs targets length", n, [len(x) for x in xs])
    order = rng.permutation(n) if rng is not None else np.arange(n)
    targets = np.asarray(targets, dtype=np.float32)
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        losses.append(train_step(spec, weights, state, _gather(xs, idx), targets[idx], loss_fn))
    return losses


def predict_proba(spec: NetworkSpec, weights, inputs, batch_size: int = DEFAULT_BATCH_SIZE) -> np.ndarray:
    xs = _as_inputs(inputs)
    n = len(xs[0])
    out = []
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            xb = _gather(xs, idx)
            out.append(forward(spec, weights, xb if len(xb) > 1 else xb[0]).data)
    return np.concatenate(out, axis=0)


def evaluate(spec: NetworkSpec, weights, inputs, labels, batch_size: int = DEFAULT_BATCH_SIZE,
             n_classes: int = N_CLASSES) -> np.ndarray:
    """Confusion matrix of ``weights`` on the given samples."""
    probs = predict_proba(spec, weights, inputs, batch_size)
    return confusion_matrix(labels, probs.argmax(axis=1), n_classes)


def one_hot(labels: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    return np.eye(n_classes, dtype=np.float32)[np.asarray(labels, dtype=np.int64)]


@dataclass
class FitResult:
    weights: dict[str, np.ndarray]
    best_epoch: int
    epoch_accuracies: list[float]
    epoch_losses: list[float]
    confusion: np.ndarray


def fit(spec: NetworkSpec, train_inputs, train_labels, val_inputs, val_labels, epochs: int, seed: int,
        batch_size: int = DEFAULT_BATCH_SIZE, adam: AdamState | None = None,
        n_classes: int = N_CLASSES) -> FitResult:
    """Train from a fresh Xavier init, keeping the epoch with best validation accuracy."""
    weights = init_weights(spec, seeded_rng(seed, "init"))
    state = adam or AdamState()
    order_rng = seeded_rng(seed, "order")
    targets = one_hot(train_labels, n_classes)
    best_acc, best_epoch, best_weights, best_conf = -1.0, 0, weights, None
    accs, losses = [], []
    for epoch in range(1, epochs + 1):
        batch_losses = train_epoch(spec, weights, state, train_inputs, targets, batch_size, order_rng)
        losses.append(float(np.mean(batch_losses)))
        conf = evaluate(spec, weights, val_inputs, val_labels, batch_size, n_classes)
        acc = accuracy(conf)
        accs.append(acc)
        log.info("epoch %d/%d loss=%.5f val_acc=%.4f", epoch, epochs, losses[-1], acc)
        if acc > best_acc:
            best_acc, best_epoch, best_conf = acc, epoch, conf
            best_weights = {k: v.copy() for k, v in weights.items()}
    if best_conf is None:
        best_conf = evaluate(spec, weights, val_inputs, val_labels, batch_size, n_classes)
    return FitResult(best_weights, best_epoch, accs, losses, best_conf)


def exact_mean(values: Sequence[Fraction]) -> float:
    """Mean computed in rationals, rounded once; equal-size folds then match pooled accuracy exactly."""
    return float(sum(values, Fraction(0)) / len(values))


# --- cross-validation --------------------------------------------------------


@dataclass
class FoldMetrics:
    fold: int
    n_train: int
    n_val: int
    best_epoch: int
    accuracy: float
    mean_sensitivity: float
    confusion: list[list[int]]
    epoch_accuracies: list[float]
    epoch_losses: list[float]


@dataclass
class MetricsReport:
    model: str
    k: int
    class_names: list[str]
    folds: list[FoldMetrics]
    mean_accuracy: float
    mean_sensitivity: float
    pooled_accuracy: float
    confusion: list[list[int]]

    @classmethod
    def from_folds(cls, model: str, folds: list[FoldMetrics], class_names=CLASS_NAMES) -> "MetricsReport":
        pooled = np.sum([np.asarray(f.confusion) for f in folds], axis=0)
        return cls(
            model=model,
            k=len(folds),
            class_names=list(class_names),
            folds=folds,
            mean_accuracy=exact_mean([Fraction(int(np.trace(c)), int(np.sum(c)))
                                      for c in (np.asarray(f.confusion) for f in folds)]),
            mean_sensitivity=float(np.mean([f.mean_sensitivity for f in folds])),
            pooled_accuracy=accuracy(pooled),
            confusion=pooled.tolist(),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["folds"] = [FoldMetrics(**f) for f in d["folds"]]
        return cls(**d)

    def to_text(self) -> str:
        lines = [f"Model: {self.model}    folds: {self.k}",
                 f"{'fold':>6} {'n_val':>7} {'epoch':>6} {'accuracy':>10} {'mean_sens':>10}"]
        for f in self.folds:
            lines.append(f"{f.fold:>6} {f.n_val:>7} {f.best_epoch:>6} {f.accuracy:>10.4f} {f.mean_sensitivity:>10.4f}")
        lines.append(f"{'mean':>6} {'':>7} {'':>6} {self.mean_accuracy:>10.4f} {self.mean_sensitivity:>10.4f}")
        lines.append(f"Acc = (sum of fold accuracies) / K = {self.mean_accuracy:.4f}")
        lines.append(f"pooled accuracy (total correct / total) = {self.pooled_accuracy:.4f}")
        return "\n".join(lines) + "\n"


def cross_validate(builder: Callable[[], NetworkSpec], inputs, labels, plan: FoldPlan, epochs: int = 2,
                   seed: int = 0, batch_size: int = DEFAULT_BATCH_SIZE, lr: float = 1e-3,
                   checkpoint_dir=None, class_names=CLASS_NAMES, betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> MetricsReport:
    """Train ``plan.k`` independent models, each validated on one held-out fold.

    Every fold starts from a fresh initialisation with its own derived seed.
    The reported accuracy is the plain mean of the per-fold best-epoch
    accuracies. If ``checkpoint_dir`` is given, each fold's best weights are
    saved there as ``fold<i>.slcw``.
    """
    xs = _as_inputs(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = len(class_names)
    folds = []
    spec = builder()
    for f in range(plan.k):
        tr, va = plan.train_indices(f), plan.val_indices(f)
        log.info("fold %d/%d: %d train, %d val", f + 1, plan.k, len(tr), len(va))
        adam = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        res = fit(spec, [Subset(x, tr) for x in xs], labels[tr], [Subset(x, va) for x in xs], labels[va],
                  epochs, seed=derive_seed(seed, "fold", f), batch_size=batch_size, adam=adam, n_classes=n_classes)
        if checkpoint_dir is not None:
            save_weights(res.weights, Path(checkpoint_dir) / f"fold{f}.slcw")
        folds.append(FoldMetrics(
            fold=f, n_train=len(tr), n_val=len(va), best_epoch=res.best_epoch,
            accuracy=accuracy(res.confusion), mean_sensitivity=mean_sensitivity(res.confusion),
            confusion=res.confusion.tolist(), epoch_accuracies=res.epoch_accuracies,
            epoch_losses=res.epoch_losses,
        ))
    return MetricsReport.from_folds(spec.name, folds, class_names)


class Subset:
    """Index view over an array-like, resolved lazily per batch."""

    def __init__(self, base, idx: np.ndarray):
        self.base = base
        self.idx = np.asarray(idx)

    def __len__(self) -> int:
        return len(self.idx)

    def __getitem__(self, i):
        return self.base[self.idx[i]]
