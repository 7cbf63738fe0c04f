"""Triplet-constrained linear embedding learned with mini-batch SGD.

Loss for a triplet (a, p, n) with projections e = W^T x::

    max(0, margin + |f(e_a) - f(e_p)|^2 - |f(e_a) - f(e_n)|^2)

where f is L2 normalization when ``TrainConfig.normalize`` is set and the
identity otherwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, InsufficientClasses
from .store import Role, load_matrix, save_matrix

log = logging.getLogger(__name__)

_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    triplets_per_epoch: int = 10_000
    embed_dim: int = 128
    normalize: bool = True

    def __post_init__(self):
        if not self.margin > 0 or not self.learning_rate > 0:
            raise ValueError("margin and learning_rate must be positive")
        if self.epochs < 0 or self.batch_size <= 0 or self.triplets_per_epoch <= 0 or self.embed_dim <= 0:
            raise ValueError("epochs must be >= 0; batch_size, triplets_per_epoch, embed_dim > 0")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def _class_index(labels):
    labels = list(labels)
    by_class: dict = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    return labels, by_class


def count_triplets(labels) -> int:
    """Number of distinct valid (anchor, positive, negative) index triples."""
    labels, by_class = _class_index(labels)
    n = len(labels)
    return sum(len(m) * (len(m) - 1) * (n - len(m)) for m in by_class.values())


def generate_triplets(labels, budget: int, seed: int = 0) -> list:
    """Sample ``min(budget, available)`` distinct valid triplets, reproducibly.

    Small pools are enumerated and subsampled without replacement; large
    pools are rejection-sampled (anchor uniform over members of classes
    with at least two samples).
    """
    labels, by_class = _class_index(labels)
    available = count_triplets(labels)
    if len(by_class) < 2 or available == 0:
        raise InsufficientClasses("need at least two classes and one class with two samples")
    rng = np.random.default_rng(seed)
    want = min(int(budget), available)
    if available <= max(4 * want, 50_000):
        pool = [
            (a, p, n)
            for a, lab in enumerate(labels)
            for p in by_class[lab]
            if p != a
            for n in range(len(labels))
            if labels[n] != lab
        ]
        pick = rng.choice(len(pool), size=want, replace=False)
        return [Triplet(*pool[i]) for i in sorted(pick)]
    return _sample_triplets(labels, by_class, want, rng, distinct=True)


def _sample_triplets(labels, by_class, count, rng, distinct=False, as_array=False):
    keys = {lab: k for k, lab in enumerate(by_class)}
    labels_arr = np.asarray([keys[lab] for lab in labels])
    anchors = np.array([i for i, lab in enumerate(labels) if len(by_class[lab]) >= 2])
    class_members = [np.asarray(m) for m in by_class.values()]
    n = len(labels)
    if not distinct:
        tri = _sample_triplets_fast(labels_arr, anchors, class_members, count, rng)
        return tri if as_array else [Triplet(int(a), int(p), int(q)) for a, p, q in tri]
    out = []
    seen = set()
    while len(out) < count:
        a = int(anchors[rng.integers(len(anchors))])
        members = class_members[labels_arr[a]]
        p = int(members[rng.integers(len(members))])
        if p == a:
            continue
        neg = int(rng.integers(n))
        if labels_arr[neg] == labels_arr[a]:
            continue
        t = (a, p, neg)
        if t in seen:
            continue
        seen.add(t)
        out.append(Triplet(*t))
    return out


def _sample_triplets_fast(labels_arr, anchors, class_members, count, rng) -> np.ndarray:
    # Vectorized rejection sampling with replacement; draws happen in fixed
    # chunks so the stream depends only on the seed.
    sizes = np.array([len(m) for m in class_members])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat_members = np.concatenate(class_members)
    n = labels_arr.shape[0]
    chunks = []
    got = 0
    while got < count:
        size = max(2 * (count - got), 64)
        a = anchors[rng.integers(len(anchors), size=size)]
        cls = labels_arr[a]
        pick = np.minimum((rng.random(size) * sizes[cls]).astype(np.int64), sizes[cls] - 1)
        p = flat_members[offsets[cls] + pick]
        neg = rng.integers(n, size=size)
        ok = (p != a) & (labels_arr[neg] != cls)
        chunk = np.stack([a[ok], p[ok], neg[ok]], axis=1)
        chunks.append(chunk)
        got += chunk.shape[0]
    return np.concatenate(chunks)[:count]


def check_triplet(t: Triplet, labels) -> bool:
    return labels[t.anchor] == labels[t.positive] != labels[t.negative] and t.anchor != t.positive


def embed(W, d) -> np.ndarray:
    W = np.asarray(W)
    d = np.asarray(getattr(d, "values", d), dtype=np.float64)
    if d.shape[-1] != W.shape[0]:
        raise DimMismatch(f"descriptor dim {d.shape[-1]} != embedding rows {W.shape[0]}")
    return d @ W


def init_embedding(M: int, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(M)
    return rng.uniform(-bound, bound, size=(M, n))


def _normalize(E):
    norms = np.maximum(np.linalg.norm(E, axis=1, keepdims=True), _EPS)
    return E / norms, norms


def _batch_arrays(X, triplets):
    if isinstance(triplets, np.ndarray):
        idx = triplets.reshape(-1, 3)
    else:
        idx = np.asarray([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.int64).reshape(-1, 3)
    return X[idx[:, 0]], X[idx[:, 1]], X[idx[:, 2]]


def triplet_losses(W, A, P, N, margin: float, normalize: bool = True) -> np.ndarray:
    """Per-triplet hinge values for stacked anchor/positive/negative rows."""
    ea, ep, en = A @ W, P @ W, N @ W
    if normalize:
        ea, ep, en = _normalize(ea)[0], _normalize(ep)[0], _normalize(en)[0]
    dp = np.sum((ea - ep) ** 2, axis=1)
    dn = np.sum((ea - en) ** 2, axis=1)
    return np.maximum(0.0, margin + dp - dn)


def batch_loss_and_grad(W, A, P, N, margin: float, normalize: bool = True):
    """Mean hinge loss over the batch and its gradient w.r.t. W."""
    m = A.shape[0]
    if m == 0:
        return 0.0, np.zeros_like(W)
    ea, ep, en = A @ W, P @ W, N @ W
    if normalize:
        (ua, na), (up, np_), (un, nn) = _normalize(ea), _normalize(ep), _normalize(en)
    else:
        ua, up, un = ea, ep, en
    dp = np.sum((ua - up) ** 2, axis=1)
    dn = np.sum((ua - un) ** 2, axis=1)
    hinge = margin + dp - dn
    active = (hinge > 0).astype(np.float64)[:, None]
    loss = float(np.sum(np.maximum(hinge, 0.0))) / m
    # d/du of dp - dn, masked to active triplets
    ga = 2.0 * (un - up) * active
    gp = -2.0 * (ua - up) * active
    gn = 2.0 * (ua - un) * active
    if normalize:
        ga = (ga - np.sum(ga * ua, axis=1, keepdims=True) * ua) / na
        gp = (gp - np.sum(gp * up, axis=1, keepdims=True) * up) / np_
        gn = (gn - np.sum(gn * un, axis=1, keepdims=True) * un) / nn
    grad = (A.T @ ga + P.T @ gp + N.T @ gn) / m
    return loss, grad


def sgd_step(W, X, triplets, lr: float, margin: float, normalize: bool = True):
    """One update ``W - lr * grad``; returns (new_W, batch_loss)."""
    A, P, N = _batch_arrays(np.asarray(X, dtype=np.float64), triplets)
    loss, grad = batch_loss_and_grad(W, A, P, N, margin, normalize)
    return W - lr * grad, loss


def train_embedding(descriptors, labels, cfg: TrainConfig = TrainConfig(), init=None, loss_trace=None):
    """Learn W (M x n) by SGD over uniformly resampled triplets.

    ``loss_trace`` (a list) receives (epoch, mean batch loss) per epoch.
    Epoch e (1-based) uses learning rate ``lr / sqrt(e)``.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise DimMismatch(f"descriptors must be a 2-D array, got shape {X.shape}")
    labels = list(labels)
    if len(labels) != X.shape[0]:
        raise DimMismatch(f"{X.shape[0]} descriptors but {len(labels)} labels")
    M = X.shape[1]
    W = init_embedding(M, cfg.embed_dim, cfg.seed) if init is None else np.array(init, dtype=np.float64)
    if W.shape[0] != M:
        raise DimMismatch(f"initial W has {W.shape[0]} rows, descriptors have dim {M}")
    labels_, by_class = _class_index(labels)
    if len(by_class) < 2 or count_triplets(labels_) == 0:
        raise InsufficientClasses("need at least two classes and one class with two samples")
    rng = np.random.default_rng(cfg.seed + 1)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate / math.sqrt(epoch)
        triplets = _sample_triplets(labels_, by_class, cfg.triplets_per_epoch, rng, as_array=True)
        A, P, N = _batch_arrays(X, triplets)
        total = 0.0
        for start in range(0, len(triplets), cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            loss, grad = batch_loss_and_grad(W, A[sl], P[sl], N[sl], cfg.margin, cfg.normalize)
            W = W - lr * grad
            total += loss * A[sl].shape[0]
        mean_loss = total / len(triplets)
        if loss_trace is not None:
            loss_trace.append((epoch, mean_loss))
        log.debug("epoch %d lr %.4g loss %.6g", epoch, lr, mean_loss)
    return W


def satisfied_fraction(W, X, labels, margin: float, normalize: bool = True) -> float:
    """Fraction of all valid triplets meeting the margin, enumerated exhaustively."""
    X = np.asarray(X, dtype=np.float64)
    E = X @ W
    if normalize:
        E = _normalize(E)[0]
    sq = np.sum(E * E, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * E @ E.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    ok = 0
    total = 0
    for a in range(len(labels)):
        pos = np.nonzero(same[a])[0]
        pos = pos[pos != a]
        neg = np.nonzero(~same[a])[0]
        if pos.size == 0 or neg.size == 0:
            continue
        ok += int(np.sum(D[a, pos][:, None] + margin <= D[a, neg][None, :]))
        total += pos.size * neg.size
    return ok / total if total else 1.0


def save_embedding(W, path) -> None:
    save_matrix(path, W, Role.EMBEDDING)


def load_embedding(path) -> np.ndarray:
    return load_matrix(path, Role.EMBEDDING)
