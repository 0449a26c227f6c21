"""Representation-space metrics on the unit hypersphere.

Pretext-side: alignment, uniformity, instance-discrimination accuracy.
Label-side: intra-class alignment (and tolerance), k-NN / best-NN, linear probe.
All expectations are exact means over every available pair.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from repspace.embio import EmbeddingMatrix, LabelVector, PairSet
from repspace.numerics import l2_normalize

_PAIR_CHUNK = 256


def _vectors(emb) -> np.ndarray:
    return emb.vectors if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)


def _labels(lab) -> np.ndarray:
    return lab.labels if isinstance(lab, LabelVector) else np.asarray(lab, dtype=np.int64)


def alignment(pairs: PairSet, emb: EmbeddingMatrix) -> float:
    x = _vectors(emb)
    if len(pairs) == 0:
        raise ValueError("alignment needs at least one pair")
    pairs.check(len(x))
    diff = x[pairs.a] - x[pairs.b]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def _pair_sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared distances of all unordered distinct pairs, in (i, j>i) row-major order."""
    n = len(x)
    out = []
    for start in range(0, n - 1, _PAIR_CHUNK):
        for i in range(start, min(start + _PAIR_CHUNK, n - 1)):
            diff = x[i + 1:] - x[i]
            out.append(np.sum(diff * diff, axis=1))
    return np.concatenate(out)


def uniformity(emb: EmbeddingMatrix, t: float = 2.0) -> float:
    """log of the mean Gaussian potential ``exp(-t * ||x - y||^2)`` over distinct pairs."""
    x = _vectors(emb)
    if len(x) < 2:
        raise ValueError("uniformity needs at least two rows")
    return float(np.log(np.mean(np.exp(-t * _pair_sq_dists(x)))))


def intra_class_alignment(emb: EmbeddingMatrix, labels: LabelVector) -> float:
    """Class-balanced mean squared distance between distinct same-class rows."""
    x, y = _vectors(emb), _labels(labels)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} embeddings but {len(y)} labels")
    per_class = []
    for c in np.unique(y):
        members = x[y == c]
        if len(members) < 2:
            raise ValueError(f"class {c} has a single member; intra-class alignment needs >= 2")
        per_class.append(np.mean(_pair_sq_dists(members)))
    return float(np.mean(per_class))


def tolerance(intra: float) -> float:
    if not 0.0 <= intra <= 4.0:
        raise ValueError(f"intra-class alignment {intra} outside [0, 4]")
    return 1.0 - intra / 2.0


def inst_disc_accuracy(anchors: EmbeddingMatrix, queries: EmbeddingMatrix) -> float:
    """Fraction of queries whose most cosine-similar anchor is their own row.

    ``np.argmax`` returns the first maximum, so ties go to the lower index.
    """
    a, q = _vectors(anchors), _vectors(queries)
    if len(a) != len(q):
        raise ValueError(f"{len(q)} queries for {len(a)} anchors")
    nearest = np.argmax(q @ a.T, axis=1)
    return float(np.mean(nearest == np.arange(len(a))))


def _neighbor_order(train: np.ndarray, test: np.ndarray, k_max: int) -> np.ndarray:
    """Indices of the ``k_max`` most similar train rows per test row, ties to lower index."""
    sim = test @ train.T
    return np.argsort(-sim, axis=1, kind="stable")[:, :k_max]


def _knn_predictions(order: np.ndarray, train_labels: np.ndarray, n_classes: int,
                     ks: list[int]) -> dict[int, np.ndarray]:
    """Majority-vote predictions for each ``k`` in ``ks``.

    Vote ties go to the tied class whose best-ranked neighbor is closest.
    """
    n_test, k_max = order.shape
    neigh = train_labels[order]  # (n_test, k_max)
    onehot = np.zeros((n_test, k_max, n_classes), dtype=np.int64)
    onehot[np.arange(n_test)[:, None], np.arange(k_max)[None, :], neigh] = 1
    counts = np.cumsum(onehot, axis=1)
    # rank of the first neighbor of each class; k_max where absent
    first = np.where(onehot.any(axis=1), onehot.argmax(axis=1), k_max)
    out = {}
    for k in ks:
        score = counts[:, k - 1, :] * (k_max + 1) - first
        out[k] = np.argmax(score, axis=1)
    return out


def _check_knn_inputs(train_emb, train_labels, test_emb, test_labels):
    xtr, ytr, xte, yte = _vectors(train_emb), _labels(train_labels), _vectors(test_emb), _labels(test_labels)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise ValueError("embedding and label counts differ")
    if xtr.shape[1] != xte.shape[1]:
        raise ValueError("train and test embeddings differ in dimension")
    return xtr, ytr, xte, yte


def knn_accuracy(train_emb, train_labels, test_emb, test_labels, k: int) -> float:
    xtr, ytr, xte, yte = _check_knn_inputs(train_emb, train_labels, test_emb, test_labels)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"k must be a positive odd number, got {k}")
    if k > len(xtr):
        raise ValueError(f"k={k} exceeds the {len(xtr)} training rows")
    order = _neighbor_order(xtr, xte, k)
    pred = _knn_predictions(order, ytr, int(max(ytr.max(), yte.max())) + 1, [k])[k]
    return float(np.mean(pred == yte))


def best_nn(train_emb, train_labels, test_emb, test_labels, k_max: int = 101) -> tuple[float, int]:
    """Best k-NN accuracy over odd ``k <= k_max`` and the smallest ``k`` achieving it."""
    xtr, ytr, xte, yte = _check_knn_inputs(train_emb, train_labels, test_emb, test_labels)
    if k_max < 1 or k_max % 2 == 0:
        raise ValueError(f"k_max must be a positive odd number, got {k_max}")
    if k_max > len(xtr):
        raise ValueError(f"k_max={k_max} exceeds the {len(xtr)} training rows")
    ks = list(range(1, k_max + 1, 2))
    order = _neighbor_order(xtr, xte, k_max)
    preds = _knn_predictions(order, ytr, int(max(ytr.max(), yte.max())) + 1, ks)
    best_acc, best_k = -1.0, 1
    for k in ks:
        acc = float(np.mean(preds[k] == yte))
        if acc > best_acc:
            best_acc, best_k = acc, k
    return best_acc, best_k


def linear_probe(train_emb, train_labels, test_emb, test_labels, epochs: int = 100, lr: float = 0.5,
                 batch: int = 64, momentum: float = 0.9, seed: int = 0) -> float:
    """Top-1 test accuracy of softmax regression trained by SGD on frozen features.

    Rows are unit-normalized first.  The learning rate follows a cosine decay
    over the epochs; weights start at small Gaussian values drawn from ``seed``.
    """
    xtr = l2_normalize(_vectors(train_emb))
    xte = l2_normalize(_vectors(test_emb))
    ytr, yte = _labels(train_labels), _labels(test_labels)
    if len(np.unique(ytr)) < 2:
        raise ValueError("linear probe needs at least two classes in the training labels")
    n_classes = int(max(ytr.max(), yte.max())) + 1
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=(xtr.shape[1], n_classes))
    b = np.zeros(n_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(n_classes)[ytr]
    n = len(xtr)
    for epoch in range(epochs):
        step_lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            logits = xtr[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            vw = momentum * vw + xtr[idx].T @ g
            vb = momentum * vb + g.sum(axis=0)
            w -= step_lr * vw
            b -= step_lr * vb
    pred = np.argmax(xte @ w + b, axis=1)
    return float(np.mean(pred == yte))


def pca_2d(emb, return_components: bool = False):
    """Project centered rows onto the top two principal axes.

    Each axis is signed so its largest-magnitude loading is positive.  With
    ``return_components`` also returns ``(components (2, d), mean (d,))``.
    """
    x = _vectors(emb)
    if len(x) < 3:
        raise ValueError("pca_2d needs at least three rows")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    if len(s) < 2 or s[1] <= 1e-12 * max(s[0], 1.0):
        raise ValueError("embeddings have rank < 2 after centering")
    comps = vt[:2].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    coords = xc @ comps.T
    if return_components:
        return coords, comps, mean
    return coords


REPORT_COLUMNS = (
    "key", "inst_disc_top1", "alignment", "intra_class_alignment", "tolerance", "uniformity",
    "best_nn_top1", "best_nn_k", "linear_probe_top1",
)


@dataclass(frozen=True)
class MetricsReport:
    key: str
    inst_disc_top1: float
    alignment: float
    intra_class_alignment: float
    tolerance: float
    uniformity: float
    best_nn_top1: float
    best_nn_k: int
    linear_probe_top1: float

    def __post_init__(self):
        if abs(self.tolerance - (1.0 - self.intra_class_alignment / 2.0)) > 1e-9:
            raise ValueError("tolerance must equal 1 - intra_class_alignment / 2")
        for name in ("inst_disc_top1", "best_nn_top1", "linear_probe_top1"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.best_nn_k < 1 or self.best_nn_k % 2 == 0:
            raise ValueError("best_nn_k must be a positive odd number")

    def csv_row(self) -> list[str]:
        out = []
        for name in REPORT_COLUMNS:
            value = getattr(self, name)
            out.append(repr(float(value)) if isinstance(value, float) else str(value))
        return out

    @classmethod
    def from_csv_row(cls, row: list[str]) -> MetricsReport:
        kwargs = {}
        for f, value in zip(fields(cls), row):
            kwargs[f.name] = {"key": str, "best_nn_k": int}.get(f.name, float)(value)
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


def render_table(reports: list[MetricsReport], columns=REPORT_COLUMNS) -> str:
    """Aligned plain-text table, also valid markdown."""
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    rows = [[fmt(getattr(r, c)) for c in columns] for r in reports]
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c) for i, c in enumerate(columns)]
    lines = ["| " + " | ".join(c.ljust(w) for c, w in zip(columns, widths)) + " |",
             "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |")
    return "\n".join(lines)
