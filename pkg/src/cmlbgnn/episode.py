"""Datasets, N-way K-shot episode sampling and correlated episode sequences."""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError, SamplingError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # [num_items, d]
    labels: np.ndarray  # [num_items], dense in [0, num_classes)
    name: str = "dataset"
    class_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ConfigError("features must be [n, d] with one label per row")
        if labels.size and (labels.min() < 0 or set(np.unique(labels)) != set(range(labels.max() + 1))):
            raise ConfigError("labels must be dense in [0, num_classes)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        index = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
        object.__setattr__(self, "class_index", index)

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def num_classes(self):
        return len(self.class_index)

    def __len__(self):
        return self.features.shape[0]


def make_synthetic_dataset(num_classes, d, spread, items_per_class, rng, name="synthetic"):
    """Gaussian blobs around random unit-norm class centres."""
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if spread <= 0:
        raise ConfigError("spread must be positive")
    g = rng.generator()
    centers = g.standard_normal((num_classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = spread * g.standard_normal((num_classes, items_per_class, d))
    feats = (centers[:, None, :] + noise).reshape(-1, d)
    labels = np.repeat(np.arange(num_classes), items_per_class)
    return Dataset(feats, labels, name=name)


def split_classes(ds, classes, name=None):
    """Subset to ``classes`` and relabel them 0..len(classes)-1 in the given order."""
    classes = [int(c) for c in classes]
    rows = np.concatenate([ds.class_index[c] for c in classes])
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(y)] for y in ds.labels[rows]])
    return Dataset(ds.features[rows], labels, name=name or ds.name)


def save_dataset(ds, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(ds.d)])
        for y, row in zip(ds.labels, ds.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def load_dataset(path):
    """Read the ``label,f0,...,f{d-1}`` CSV format."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header != ["label"] + [f"f{i}" for i in range(d)]:
        raise ParseError(f"unknown header {','.join(header)!r}", line=1)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(row)}", line=lineno)
        try:
            labels.append(int(row[0]))
        except ValueError:
            raise ParseError(f"label {row[0]!r} is not an integer", line=lineno) from None
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise ParseError("non-numeric feature value", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite feature value", line=lineno)
        feats.append(vals)
    if not feats:
        raise ParseError("no data rows", line=1)
    try:
        return Dataset(np.array(feats), np.array(labels), name=str(path))
    except ConfigError as exc:
        raise ParseError(str(exc)) from None


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.

    Support items are ordered slot-major (all shots of slot 0 first); queries
    are in random order. ``classes[s]`` is the dataset class behind slot ``s``.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    support_labeled: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    N: int
    K: int
    classes: tuple

    @property
    def Q(self):
        return len(self.query_y)

    @property
    def num_nodes(self):
        return len(self.support_y) + len(self.query_y)


@dataclass(frozen=True)
class EpisodeSequence:
    episodes: list
    rho: float

    def __len__(self):
        return len(self.episodes)


def queries_per_class(N, Q):
    """Q split over N slots; the first Q mod N slots get one extra."""
    base, extra = divmod(Q, N)
    return [base + (1 if s < extra else 0) for s in range(N)]


def sample_episode(ds, N, K, Q, rng, class_pool=None, classes=None):
    """Draw an episode; pass ``classes`` to fix the slot -> class assignment."""
    g = rng.generator()
    per_query = queries_per_class(N, Q)
    if classes is None:
        pool = sorted(ds.class_index) if class_pool is None else sorted(class_pool)
        if len(pool) < N:
            raise SamplingError(f"need {N} classes, pool has {len(pool)}")
        classes = tuple(int(c) for c in g.choice(pool, size=N, replace=False))
    sx, sy, qx, qy = [], [], [], []
    for slot, c in enumerate(classes):
        items = ds.class_index.get(c)
        need = K + per_query[slot]
        if items is None or len(items) < need:
            have = 0 if items is None else len(items)
            raise SamplingError(f"class {c} has {have} items, need {need}")
        picked = g.choice(items, size=need, replace=False)
        sx.append(ds.features[picked[:K]])
        sy += [slot] * K
        qx.append(ds.features[picked[K:]])
        qy += [slot] * per_query[slot]
    order = g.permutation(Q)
    qx = np.concatenate(qx)[order] if Q else np.zeros((0, ds.d))
    return Episode(
        support_x=np.concatenate(sx),
        support_y=np.array(sy),
        support_labeled=np.ones(N * K, dtype=bool),
        query_x=qx,
        query_y=np.array(qy, dtype=np.int64)[order],
        N=N,
        K=K,
        classes=tuple(classes),
    )


def build_sequence(ds, T, N, K, Q, rho, rng, class_pool=None):
    """T episodes; each reuses its predecessor's class slots with probability rho."""
    if T < 1:
        raise ConfigError("sequence length must be at least 1")
    if not 0.0 <= rho <= 1.0:
        raise ConfigError("rho must lie in [0, 1]")
    coins = rng.sub(0).uniform(T)
    episodes = []
    for t in range(T):
        keep = t > 0 and coins[t] < rho
        classes = episodes[-1].classes if keep else None
        episodes.append(sample_episode(ds, N, K, Q, rng.sub(1, t), class_pool, classes))
    return EpisodeSequence(episodes, rho)


def apply_label_budget(ep, labeled_fraction, rng):
    """Keep exactly labeled_fraction * K labels per class; hide the rest."""
    n_lab = labeled_fraction * ep.K
    if not (1 <= round(n_lab) <= ep.K and abs(n_lab - round(n_lab)) < 1e-9):
        raise ConfigError(
            f"labeled fraction {labeled_fraction} is not i/K for K={ep.K}"
        )
    n_lab = round(n_lab)
    if n_lab == ep.K:
        return ep
    g = rng.generator()
    labeled = np.zeros(len(ep.support_y), dtype=bool)
    for slot in range(ep.N):
        idx = np.flatnonzero(ep.support_y == slot)
        labeled[g.choice(idx, size=n_lab, replace=False)] = True
    return replace(ep, support_labeled=labeled)


def drop_unlabeled(ep):
    """Remove unlabeled support items (the labeled-only strategy)."""
    keep = ep.support_labeled
    return replace(
        ep,
        support_x=ep.support_x[keep],
        support_y=ep.support_y[keep],
        support_labeled=keep[keep],
        K=int(keep.sum()) // ep.N,
    )


def random_rotation(d, rng):
    """Haar-distributed orthogonal d x d matrix."""
    q, r = np.linalg.qr(rng.generator().standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def rotate_sequence(seq, R):
    """Apply the same orthogonal map to every feature vector of a sequence."""
    eps = [replace(ep, support_x=ep.support_x @ R, query_x=ep.query_x @ R) for ep in seq.episodes]
    return EpisodeSequence(eps, seq.rho)
