"""Desk-scale learning problems: synthetic data, partitioning and models."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InfeasibleSpec, InvalidParams


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DimensionMismatch("features must be n x f and labels length n")
        if x.shape[0] < 1:
            raise InvalidParams("dataset must have n >= 1")
        if not np.all(np.isfinite(x)):
            raise InvalidParams("features must be finite")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise InvalidParams("labels out of range")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    def subset(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


def _class_means(f: int, c: int, separation: float, rng) -> np.ndarray:
    g = rng.standard_normal((f, c))
    if c <= f:
        q, _ = np.linalg.qr(g)
        dirs = q[:, :c].T
    else:
        dirs = (g / np.linalg.norm(g, axis=0)).T
    return separation * dirs


def gen_synthetic(n: int, f: int, n_classes: int, separation: float, rng) -> Dataset:
    """Gaussian blobs with unit covariance; class means sit ``separation`` from the origin.

    When ``n_classes <= f`` the mean directions are orthonormal.
    """
    if n < 1 or f < 1 or n_classes < 1 or separation < 0:
        raise InvalidParams("need n, f, n_classes >= 1 and separation >= 0")
    means = _class_means(f, n_classes, separation, rng)
    labels = rng.permutation(np.arange(n) % n_classes)
    x = means[labels] + rng.standard_normal((n, f))
    return Dataset(x, labels, n_classes)


def train_test_split(ds: Dataset, n_test: int, rng) -> tuple[Dataset, Dataset]:
    perm = rng.permutation(len(ds))
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read a table with a ``label`` column; every other column is a feature."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise InvalidParams(f"{path}: no 'label' column")
        li = header.index("label")
        rows = [r for r in reader if r]
    table = np.array([[float(v) for v in r] for r in rows])
    labels = table[:, li].astype(np.int64)
    x = np.delete(table, li, axis=1)
    return Dataset(x, labels, n_classes or int(labels.max()) + 1)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    samples_per_client: tuple[int, int] | None = None
    classes_per_client: int | None = None


def partition(ds: Dataset, spec: PartitionSpec, n_clients: int, rng) -> list[np.ndarray]:
    """Split sample indices among ``n_clients``.

    iid: one shuffle, then disjoint equal shards (size n // N, or the upper
    end of ``samples_per_client`` when given).  noniid: every client draws
    ``classes_per_client`` labels, a size uniformly from
    ``samples_per_client``, and samples without replacement from those
    labels only; shards of different clients may overlap.
    """
    n = len(ds)
    if n_clients < 1:
        raise InvalidParams("n_clients must be >= 1")
    rng_range = spec.samples_per_client
    if rng_range is not None and not 1 <= rng_range[0] <= rng_range[1]:
        raise InfeasibleSpec(f"bad samples_per_client {rng_range}")

    if spec.mode == "iid":
        size = n // n_clients if rng_range is None else rng_range[1]
        if size < 1 or size * n_clients > n:
            raise InfeasibleSpec(f"cannot give {n_clients} clients {size} samples from {n}")
        perm = rng.permutation(n)
        return [np.sort(perm[i * size:(i + 1) * size]) for i in range(n_clients)]

    if spec.mode != "noniid":
        raise InvalidParams(f"unknown partition mode {spec.mode!r}")
    cpc = spec.classes_per_client or ds.n_classes
    if not 1 <= cpc <= ds.n_classes:
        raise InfeasibleSpec(f"classes_per_client={cpc} with {ds.n_classes} classes")
    lo, hi = rng_range if rng_range is not None else (n // n_clients, n // n_clients)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    shards = []
    for _ in range(n_clients):
        classes = rng.choice(ds.n_classes, size=cpc, replace=False)
        size = int(rng.integers(lo, hi + 1))
        pool = np.concatenate([by_class[c] for c in classes])
        if pool.size < max(size, 1):
            raise InfeasibleSpec(f"classes {sorted(classes.tolist())} hold {pool.size} < {size} samples")
        shards.append(np.sort(rng.choice(pool, size=size, replace=False)))
    return shards


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.size
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


@dataclass(frozen=True)
class Model:
    """Architecture of a softmax classifier; parameters live in a flat vector.

    ``kind="logistic"``: W (f x C) then b (C).
    ``kind="mlp"``: one tanh hidden layer, W1 (f x H), b1, W2 (H x C), b2.
    The objective is mean cross-entropy plus ``l2/2 * ||w||^2``.
    """

    kind: str
    n_features: int
    n_classes: int
    hidden: int = 32
    l2: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise InvalidParams(f"unknown model kind {self.kind!r}")

    @property
    def d(self) -> int:
        f, c, h = self.n_features, self.n_classes, self.hidden
        if self.kind == "logistic":
            return (f + 1) * c
        return (f + 1) * h + (h + 1) * c

    def init(self, rng) -> np.ndarray:
        if self.kind == "logistic":
            return np.zeros(self.d)
        f, c, h = self.n_features, self.n_classes, self.hidden
        w1 = rng.standard_normal((f, h)) / np.sqrt(f)
        w2 = rng.standard_normal((h, c)) / np.sqrt(h)
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])

    def _split(self, w):
        f, c, h = self.n_features, self.n_classes, self.hidden
        if self.kind == "logistic":
            return w[: f * c].reshape(f, c), w[f * c:]
        i = 0
        parts = []
        for size, shape in ((f * h, (f, h)), (h, (h,)), (h * c, (h, c)), (c, (c,))):
            parts.append(w[i:i + size].reshape(shape))
            i += size
        return parts

    def _check(self, w, x, y):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.d,):
            raise DimensionMismatch(f"parameter vector has {w.size} entries, model needs {self.d}")
        if x.ndim != 2 or x.shape[1] != self.n_features or x.shape[0] != y.size:
            raise DimensionMismatch("batch shape does not match the model")
        if y.size == 0:
            raise InvalidParams("empty batch")
        return w

    def scores(self, w, x) -> np.ndarray:
        if self.kind == "logistic":
            weight, bias = self._split(w)
            return x @ weight + bias
        w1, b1, w2, b2 = self._split(w)
        return np.tanh(x @ w1 + b1) @ w2 + b2

    def loss_and_grad(self, w, x, y) -> tuple[float, np.ndarray]:
        w = self._check(w, x, y)
        reg = 0.5 * self.l2 * float(w @ w)
        if self.kind == "logistic":
            weight, bias = self._split(w)
            loss, dz = _softmax_xent(x @ weight + bias, y)
            grad = np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0)])
        else:
            w1, b1, w2, b2 = self._split(w)
            hid = np.tanh(x @ w1 + b1)
            loss, dz = _softmax_xent(hid @ w2 + b2, y)
            dh = (dz @ w2.T) * (1.0 - hid**2)
            grad = np.concatenate(
                [(x.T @ dh).ravel(), dh.sum(axis=0), (hid.T @ dz).ravel(), dz.sum(axis=0)]
            )
        return loss + reg, grad + self.l2 * w

    def evaluate(self, w, ds: Dataset) -> tuple[float, float]:
        """Objective value and argmax accuracy (ties resolve to the lowest class)."""
        loss, _ = self.loss_and_grad(w, ds.features, ds.labels)
        pred = np.argmax(self.scores(w, ds.features), axis=1)
        return loss, float(np.mean(pred == ds.labels))


def loss_and_grad(model: Model, w, batch: Dataset):
    return model.loss_and_grad(w, batch.features, batch.labels)


def evaluate(model: Model, w, test: Dataset):
    return model.evaluate(w, test)
