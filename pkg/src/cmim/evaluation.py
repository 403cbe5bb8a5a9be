"""Downstream evaluation: probes, score aggregation, slopes, toy geometry.

Probes run on frozen embedding sets. Accuracies are aggregated two ways:
per-cell z-scores (a cell is one dataset x probe x embedding-kind combination,
standardized with the population stddev across all runs in the cell) and
per-cell rankings with shared ranks on ties. Batch-size sensitivity is the
ordinary-least-squares slope of a model's mean z-score against batch size.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, fields

import numpy as np

from .data import Dataset, binarize
from .distributions import bernoulli_log_prob
from .errors import ContractError
from .models import ModelBundle, decode, informative_embedding, mean_embedding
from .numcore import (
    Tensor,
    adam_init,
    adam_step,
    log_softmax,
    no_grad,
    normal_init,
    zero_grads,
)

EMBEDDING_KINDS = ("mean", "informative")
PROBES = ("knn5_euclidean", "knn5_cosine", "mlp")


@dataclass
class EmbeddingSet:
    """Frozen per-sample embeddings with labels and run provenance."""

    X: np.ndarray        # [N, d]
    labels: np.ndarray   # [N]
    kind: str            # "mean" | "informative"
    objective: str = ""
    batch_size: int = 0
    dataset: str = ""
    seed: int = 0

    def __post_init__(self):
        if len(self.X) != len(self.labels):
            raise ContractError("embedding/label count mismatch")
        if not np.all(np.isfinite(self.X)):
            raise ContractError("embeddings must be finite")


@dataclass
class MetricsRecord:
    """One probe outcome; ``accuracy`` holds a log-likelihood for the
    reconstruction pseudo-probe, a [0, 1] accuracy for everything else."""

    objective: str
    dataset: str
    batch_size: int
    seed: int
    probe: str
    kind: str
    accuracy: float

    def __post_init__(self):
        if self.probe != "reconstruction" and not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy {self.accuracy} outside [0, 1]")


RECORD_COLUMNS = [f.name for f in fields(MetricsRecord)]


def save_records(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([getattr(r, c) for c in RECORD_COLUMNS])


def load_records(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricsRecord(
                objective=row["objective"], dataset=row["dataset"],
                batch_size=int(row["batch_size"]), seed=int(row["seed"]),
                probe=row["probe"], kind=row["kind"],
                accuracy=float(row["accuracy"]),
            ))
    return out


# -- probes -------------------------------------------------------------------


def _pairwise_distances(test: np.ndarray, train: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        def _norm(a):
            n = np.sqrt((a * a).sum(axis=1, keepdims=True))
            if np.any(n <= 1e-12):
                warnings.warn("zero-norm embedding row(s); cosine regularized",
                              RuntimeWarning, stacklevel=3)
            return a / np.maximum(n, 1e-12)
        return 1.0 - _norm(test) @ _norm(train).T
    if metric == "euclidean":
        sq = ((test * test).sum(axis=1)[:, None]
              + (train * train).sum(axis=1)[None, :]
              - 2.0 * test @ train.T)
        return np.sqrt(np.maximum(sq, 0.0))
    raise ContractError(f"unknown metric {metric!r}")


def knn_probe(train: EmbeddingSet, test: EmbeddingSet, k: int = 5,
              metric: str = "euclidean") -> float:
    """Majority vote of the k nearest; ties break by smaller summed distance,
    then by smaller label."""
    if train.X.shape[1] != test.X.shape[1]:
        raise ContractError(
            f"embedding dims differ: {train.X.shape[1]} vs {test.X.shape[1]}"
        )
    if k > len(train.X):
        raise ContractError(f"k={k} exceeds train size {len(train.X)}")
    predictions = np.empty(len(test.X), dtype=train.labels.dtype)
    chunk = 256
    for lo in range(0, len(test.X), chunk):
        dist = _pairwise_distances(test.X[lo:lo + chunk], train.X, metric)
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for row, neighbors in enumerate(nearest):
            labels = train.labels[neighbors]
            dists = dist[row, neighbors]
            votes: dict[int, int] = defaultdict(int)
            sums: dict[int, float] = defaultdict(float)
            for lab, d in zip(labels, dists):
                votes[int(lab)] += 1
                sums[int(lab)] += float(d)
            best = max(votes.values())
            tied = [lab for lab, v in votes.items() if v == best]
            tied.sort(key=lambda lab: (sums[lab], lab))
            predictions[lo + row] = tied[0]
    return float(np.mean(predictions == test.labels))


def mlp_probe(train: EmbeddingSet, test: EmbeddingSet, hidden: int = 400,
              steps: int = 1000, lr: float = 1e-3, seed: int = 0,
              batch_size: int = 256) -> float:
    """One-hidden-layer softmax classifier trained with Adam on frozen inputs."""
    if train.X.shape[1] != test.X.shape[1]:
        raise ContractError(
            f"embedding dims differ: {train.X.shape[1]} vs {test.X.shape[1]}"
        )
    classes = np.unique(train.labels)
    class_index = {int(c): i for i, c in enumerate(classes)}
    y = np.array([class_index[int(v)] for v in train.labels])

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0BE]))
    d = train.X.shape[1]
    scale1 = math.sqrt(2.0 / d)
    scale2 = math.sqrt(2.0 / hidden)
    W1 = Tensor(normal_init(rng, (d, hidden), std=scale1), requires_grad=True, name="probe.W1")
    b1 = Tensor(np.zeros(hidden), requires_grad=True, name="probe.b1")
    W2 = Tensor(normal_init(rng, (hidden, len(classes)), std=scale2), requires_grad=True, name="probe.W2")
    b2 = Tensor(np.zeros(len(classes)), requires_grad=True, name="probe.b2")
    params = [W1, b1, W2, b2]
    state = adam_init(params, lr=lr)

    def forward(x: Tensor) -> Tensor:
        return (x.matmul(W1) + b1).relu().matmul(W2) + b2

    n = len(train.X)
    eye = np.eye(len(classes))
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        logits = forward(Tensor(train.X[idx]))
        onehot = Tensor(eye[y[idx]])
        loss = -((log_softmax(logits, axis=1) * onehot).sum(axis=1).mean())
        zero_grads(params)
        loss.backward()
        adam_step(params, [p.grad for p in params], state)

    with no_grad():
        logits = forward(Tensor(test.X)).data
    predicted = classes[np.argmax(logits, axis=1)]
    return float(np.mean(predicted == test.labels))


# -- aggregation ----------------------------------------------------------------


def _cell_key(r: MetricsRecord) -> tuple:
    return (r.dataset, r.probe, r.kind)


def _classification_records(records: list[MetricsRecord]) -> list[MetricsRecord]:
    return [r for r in records if r.probe != "reconstruction"]


def zscore_per_record(records: list[MetricsRecord]) -> list[float]:
    """Per-record z-scores, standardized within each (dataset, probe, kind) cell
    using the population stddev; degenerate cells contribute zeros."""
    records = list(records)
    cells: dict[tuple, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        cells[_cell_key(r)].append(i)
    zs = [0.0] * len(records)
    for idx in cells.values():
        acc = np.array([records[i].accuracy for i in idx])
        std = acc.std()  # population
        if std > 0:
            for i, z in zip(idx, (acc - acc.mean()) / std):
                zs[i] = float(z)
    return zs


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return mean, stderr


def zscore_aggregate(records: list[MetricsRecord]) -> dict[str, tuple[float, float]]:
    """Average normalized accuracy per objective: mean z-score with stderr
    across that objective's records."""
    records = _classification_records(records)
    zs = zscore_per_record(records)
    per_model: dict[str, list[float]] = defaultdict(list)
    for r, z in zip(records, zs):
        per_model[r.objective].append(z)
    return {m: _mean_stderr(v) for m, v in per_model.items()}


def _ranks_desc(values: np.ndarray) -> np.ndarray:
    """Rank 1 = largest value; ties share the mean of their rank span."""
    order = np.argsort(-values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_aggregate(records: list[MetricsRecord]) -> dict[str, tuple[float, float]]:
    """Average per-cell ranking per objective (rank 1 = best accuracy)."""
    records = _classification_records(records)
    cells: dict[tuple, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        cells[_cell_key(r)].append(i)
    per_model: dict[str, list[float]] = defaultdict(list)
    for idx in cells.values():
        acc = np.array([records[i].accuracy for i in idx])
        for i, rank in zip(idx, _ranks_desc(acc)):
            per_model[records[i].objective].append(float(rank))
    return {m: _mean_stderr(v) for m, v in per_model.items()}


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and its residual standard error."""
    x_c = x - x.mean()
    sxx = float((x_c * x_c).sum())
    if sxx == 0.0:
        raise ContractError("slope regression needs at least two distinct x values")
    slope = float((x_c * (y - y.mean())).sum() / sxx)
    if len(x) > 2:
        resid = y - (y.mean() + slope * x_c)
        stderr = math.sqrt(float((resid * resid).sum()) / (len(x) - 2) / sxx)
    else:
        stderr = 0.0
    return slope, stderr


def batch_slope(records: list[MetricsRecord]) -> dict[str, tuple[float, float]]:
    """OLS slope of mean z-score against training batch size, per objective."""
    records = _classification_records(records)
    zs = zscore_per_record(records)
    acc: dict[tuple[str, int], list[float]] = defaultdict(list)
    for r, z in zip(records, zs):
        acc[(r.objective, r.batch_size)].append(z)
    per_model: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for (model, bs), values in acc.items():
        per_model[model].append((bs, float(np.mean(values))))
    out = {}
    for model, points in per_model.items():
        points.sort()
        x = np.array([p[0] for p in points], dtype=np.float64)
        y = np.array([p[1] for p in points], dtype=np.float64)
        out[model] = _ols(x, y)
    return out


# -- toy geometry and reconstruction ---------------------------------------------


@dataclass
class AngleRadiusStats:
    angle_hist: np.ndarray
    angle_edges: np.ndarray
    radius_hist: np.ndarray
    radius_edges: np.ndarray
    ks_angle: float
    radius_variance: float
    angles: np.ndarray = field(repr=False, default=None)
    radii: np.ndarray = field(repr=False, default=None)


def angle_radius_stats(points: np.ndarray, bins: int = 36) -> AngleRadiusStats:
    """Angular and radial histograms plus a Kolmogorov-Smirnov statistic of the
    angles against the uniform distribution on [0, 2*pi)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ContractError(f"points must be [N, 2], got {points.shape}")
    angles = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * math.pi)
    radii = np.sqrt((points * points).sum(axis=1))

    u = np.sort(angles) / (2.0 * math.pi)
    n = len(u)
    steps = np.arange(1, n + 1) / n
    ks = float(np.max(np.maximum(steps - u, u - (steps - 1.0 / n))))

    angle_hist, angle_edges = np.histogram(angles, bins=bins, range=(0.0, 2.0 * math.pi))
    r_lo, r_hi = float(radii.min()), float(radii.max())
    if r_hi - r_lo < 1e-9 * max(1.0, abs(r_hi)):  # (near-)identical radii
        pad = 0.5e-6 * max(1.0, abs(r_hi))
        r_lo, r_hi = r_lo - pad, r_hi + pad
    radius_hist, radius_edges = np.histogram(radii, bins=bins, range=(r_lo, r_hi))
    return AngleRadiusStats(
        angle_hist=angle_hist, angle_edges=angle_edges,
        radius_hist=radius_hist, radius_edges=radius_edges,
        ks_angle=ks, radius_variance=float(radii.var(ddof=1)),
        angles=angles, radii=radii,
    )


def embed_dataset(bundle: ModelBundle, ds: Dataset, kind: str,
                  chunk: int = 2048, binarize_inputs: bool = True) -> EmbeddingSet:
    """Embed a whole dataset in chunks with the requested embedding kind."""
    if kind not in EMBEDDING_KINDS:
        raise ContractError(f"kind must be one of {EMBEDDING_KINDS}, got {kind!r}")
    extract = mean_embedding if kind == "mean" else informative_embedding
    images = binarize(ds.images) if binarize_inputs else ds.images
    pieces = []
    for lo in range(0, len(images), chunk):
        pieces.append(extract(bundle, images[lo:lo + chunk]).data.astype(np.float64))
    return EmbeddingSet(
        X=np.concatenate(pieces, axis=0), labels=ds.labels, kind=kind,
        objective=bundle.objective, dataset=ds.name, seed=bundle.seed,
        batch_size=int(bundle.extra.get("batch_size", 0)),
    )


def reconstruction_score(bundle: ModelBundle, ds: Dataset, chunk: int = 2048) -> float:
    """Mean per-sample Bernoulli log-likelihood at the deterministic mean latent."""
    totals = []
    with no_grad():
        for lo in range(0, len(ds), chunk):
            x = binarize(ds.images[lo:lo + chunk]).astype(bundle.dtype)
            mean = mean_embedding(bundle, x)
            logits, _ = decode(bundle, mean)
            totals.append(bernoulli_log_prob(logits, Tensor(x)).data)
    return float(np.concatenate(totals).mean())
