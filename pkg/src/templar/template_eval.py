"""Template pooling, pairwise scoring and protocol metrics (ROC / CMC).

Unprocessable templates (no usable media) are handled by one of two
policies: SETUP1 drops the comparison or probe; SETUP2 forces the lowest
possible similarity (-1) or the worst possible rank (gallery size).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProtocol, DimMismatch, EmptyInput, MissingMate

FAR_TARGETS = (1e-2, 1e-1)
RANK_TARGETS = (1, 5, 10)
LOWEST_SIMILARITY = -1.0


class SetupPolicy(enum.Enum):
    SETUP1 = "setup1"
    SETUP2 = "setup2"

    @classmethod
    def parse(cls, text) -> "SetupPolicy":
        if isinstance(text, cls):
            return text
        return cls(str(text).strip().lower().replace(" ", ""))


class _Unprocessable:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "UNPROCESSABLE"

    def __bool__(self):
        return False


UNPROCESSABLE = _Unprocessable()
SKIPPED = None


@dataclass
class Template:
    template_id: str
    subject_id: str
    media: list = field(default_factory=list)  # descriptor vectors

    def __post_init__(self):
        self.media = [np.asarray(getattr(m, "values", m), dtype=np.float64).ravel() for m in self.media]
        if len({m.shape[0] for m in self.media}) > 1:
            raise DimMismatch(f"template {self.template_id}: media descriptors differ in dimension")

    @property
    def unprocessable(self) -> bool:
        return not self.media


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


POOLINGS = ("mean", "max")


def template_descriptor(t: Template, W=None, pooling: str = "mean"):
    """Mean (or elementwise max) of L2-normalized media embeddings, re-normalized."""
    if t.unprocessable:
        return UNPROCESSABLE
    X = np.stack(t.media)
    if W is not None:
        W = np.asarray(W)
        if X.shape[1] != W.shape[0]:
            raise DimMismatch(f"template {t.template_id}: descriptor dim {X.shape[1]} != W rows {W.shape[0]}")
        X = X @ W
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    if pooling == "mean":
        return _unit(X.mean(axis=0))
    if pooling == "max":
        return _unit(X.max(axis=0))
    raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")


def _cosines(rows, v):
    # Row-wise elementwise reduction so a batch of scores is bitwise equal
    # to scoring each row on its own.
    dots = np.sum(rows * v, axis=-1)
    nr = np.sqrt(np.sum(rows * rows, axis=-1))
    nv = math.sqrt(float(np.sum(v * v)))
    denom = nr * nv
    out = np.divide(dots, denom, out=np.zeros_like(dots, dtype=np.float64), where=denom > 0)
    return np.clip(out, -1.0, 1.0)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimMismatch(f"vector dims {u.shape} and {v.shape} differ")
    return float(_cosines(u[None, :], v)[0])


def _score_vectors(u, v, policy: SetupPolicy):
    if u is UNPROCESSABLE or v is UNPROCESSABLE:
        return SKIPPED if policy is SetupPolicy.SETUP1 else LOWEST_SIMILARITY
    return cosine(u, v)


def score_pair(t1: Template, t2: Template, W=None, policy=SetupPolicy.SETUP1, pooling="mean"):
    """Cosine similarity of pooled templates; None (skipped) or -1 when either is unprocessable."""
    policy = SetupPolicy.parse(policy)
    return _score_vectors(template_descriptor(t1, W, pooling), template_descriptor(t2, W, pooling), policy)


# -- verification ------------------------------------------------------------


@dataclass
class VerifReport:
    roc: list  # [(far, tar)] sorted by far
    tar_at: dict
    n_pairs_used: int
    n_pairs_skipped: int
    n_genuine: int = 0
    n_impostor: int = 0
    scores: list = field(default_factory=list, repr=False)  # (score, genuine) for used pairs

    def metrics(self) -> dict:
        return {f"tar@far={far:g}": tar for far, tar in self.tar_at.items()}

    def to_dict(self) -> dict:
        return {
            "kind": "verification",
            "tar_at": {f"{k:g}": v for k, v in self.tar_at.items()},
            "n_pairs_used": self.n_pairs_used,
            "n_pairs_skipped": self.n_pairs_skipped,
            "n_genuine": self.n_genuine,
            "n_impostor": self.n_impostor,
            "roc": [list(p) for p in self.roc],
        }


def roc_curve(genuine, impostor) -> list:
    """(FAR, TAR) for every distinct score used as an accept-if-score>=t threshold,
    plus the (0, 0) point of an infinite threshold."""
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    thresholds = np.unique(np.concatenate([g, i]))[::-1]
    n_g, n_i = len(g), len(i)
    tar = (n_g - np.searchsorted(g, thresholds, side="left")) / n_g
    far = (n_i - np.searchsorted(i, thresholds, side="left")) / n_i
    return [(0.0, 0.0)] + [(float(f), float(t)) for f, t in zip(far, tar)]


def tar_at_far(roc, target: float) -> float:
    """TAR at the operating point with the largest FAR not exceeding ``target``."""
    best = 0.0
    best_far = -1.0
    for far, tar in roc:
        if far <= target and (far > best_far or (far == best_far and tar > best)):
            best_far, best = far, tar
    return best


def rates_at_threshold(genuine, impostor, threshold: float) -> tuple:
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    return float(np.mean(i >= threshold)), float(np.mean(g >= threshold))


def verification_from_scores(scores, n_skipped: int = 0, targets=FAR_TARGETS) -> VerifReport:
    genuine = [s for s, same in scores if same]
    impostor = [s for s, same in scores if not same]
    if not genuine or not impostor:
        raise DegenerateProtocol(
            f"need genuine and impostor pairs after filtering (got {len(genuine)} / {len(impostor)})"
        )
    roc = roc_curve(genuine, impostor)
    return VerifReport(
        roc=roc,
        tar_at={t: tar_at_far(roc, t) for t in targets},
        n_pairs_used=len(scores),
        n_pairs_skipped=n_skipped,
        n_genuine=len(genuine),
        n_impostor=len(impostor),
        scores=list(scores),
    )


def eval_verification(pairs, W=None, policy=SetupPolicy.SETUP1, targets=FAR_TARGETS, pooling="mean") -> VerifReport:
    """``pairs``: iterable of (t1, t2, same_subject)."""
    policy = SetupPolicy.parse(policy)
    cache: dict = {}

    def desc(t):
        key = id(t)
        if key not in cache:
            cache[key] = (t, template_descriptor(t, W, pooling))
        return cache[key][1]

    scores = []
    skipped = 0
    for t1, t2, same in pairs:
        s = _score_vectors(desc(t1), desc(t2), policy)
        if s is SKIPPED:
            skipped += 1
            continue
        scores.append((s, bool(same)))
    return verification_from_scores(scores, skipped, targets)


# -- identification ----------------------------------------------------------


@dataclass
class IdentReport:
    cmc: list  # cmc[k-1] = accuracy at rank k, k = 1..gallery size
    rank_at: dict
    n_probes_used: int
    n_probes_skipped: int
    ranks: dict = field(default_factory=dict, repr=False)  # probe template_id -> rank

    def metrics(self) -> dict:
        return {f"rank{k}": v for k, v in self.rank_at.items()}

    def to_dict(self) -> dict:
        return {
            "kind": "identification",
            "rank_at": {str(k): v for k, v in self.rank_at.items()},
            "n_probes_used": self.n_probes_used,
            "n_probes_skipped": self.n_probes_skipped,
            "cmc": [[k + 1, v] for k, v in enumerate(self.cmc)],
        }


def eval_identification(
    probes, gallery, W=None, policy=SetupPolicy.SETUP1, ranks=RANK_TARGETS, pooling="mean"
) -> IdentReport:
    """Rank each probe's best mated gallery entry.

    Gallery order is descending score, ties broken by ascending template_id.
    Unprocessable gallery entries score -1 against every probe under both
    policies; the policy only governs unprocessable probes.
    """
    policy = SetupPolicy.parse(policy)
    gallery = list(gallery)
    if not gallery:
        raise EmptyInput("gallery is empty")
    G = len(gallery)
    g_desc = [template_descriptor(t, W, pooling) for t in gallery]
    g_ids = [t.template_id for t in gallery]
    g_subj = [t.subject_id for t in gallery]
    tie_rank = np.empty(G, dtype=np.int64)
    tie_rank[sorted(range(G), key=lambda j: g_ids[j])] = np.arange(G)
    dim = next((d.shape[0] for d in g_desc if d is not UNPROCESSABLE), None)
    G_mat = np.zeros((G, dim if dim else 0))
    ok = np.array([d is not UNPROCESSABLE for d in g_desc])
    for j, d in enumerate(g_desc):
        if ok[j]:
            G_mat[j] = d

    rank_of = {}
    skipped = 0
    for probe in probes:
        mates = [j for j in range(G) if g_subj[j] == probe.subject_id]
        if not mates:
            raise MissingMate(f"probe {probe.template_id}: subject {probe.subject_id} absent from gallery")
        p = template_descriptor(probe, W, pooling)
        if p is UNPROCESSABLE:
            if policy is SetupPolicy.SETUP1:
                skipped += 1
                continue
            rank_of[probe.template_id] = G
            continue
        if dim is not None and p.shape[0] != dim:
            raise DimMismatch(f"probe {probe.template_id}: dim {p.shape[0]} != gallery dim {dim}")
        scores = np.full(G, LOWEST_SIMILARITY)
        if dim is not None:
            scores[ok] = _cosines(G_mat[ok], p)
        order = np.lexsort((tie_rank, -scores))
        position = np.empty(G, dtype=np.int64)
        position[order] = np.arange(1, G + 1)
        rank_of[probe.template_id] = int(position[mates].min())
    return identification_from_ranks(rank_of, G, skipped, ranks)


def identification_from_ranks(rank_of: dict, gallery_size: int, n_skipped=0, ranks=RANK_TARGETS) -> IdentReport:
    if not rank_of:
        raise DegenerateProtocol("no probes left after policy filtering")
    r = np.array(list(rank_of.values()))
    cmc = [float(np.mean(r <= k)) for k in range(1, gallery_size + 1)]
    rank_at = {k: cmc[min(k, gallery_size) - 1] for k in ranks}
    return IdentReport(cmc, rank_at, len(r), n_skipped, dict(rank_of))


# -- split aggregation -------------------------------------------------------


@dataclass
class SplitSummary:
    per_split: list  # metric dicts
    mean: dict
    std: dict

    def to_dict(self) -> dict:
        return {"splits": self.per_split, "mean": self.mean, "std": self.std}


def aggregate_splits(reports) -> SplitSummary:
    """Per-metric mean and population standard deviation over splits."""
    dicts = [r.metrics() if hasattr(r, "metrics") else dict(r) for r in reports]
    if not dicts:
        raise EmptyInput("no split reports to aggregate")
    keys = list(dicts[0])
    for d in dicts[1:]:
        if set(d) != set(keys):
            raise DimMismatch(f"split reports disagree on metric keys: {sorted(keys)} vs {sorted(d)}")
    mean, std = {}, {}
    for k in keys:
        vals = np.array([d[k] for d in dicts], dtype=np.float64)
        m = float(math.fsum(vals) / len(vals))
        mean[k] = min(max(m, float(vals.min())), float(vals.max()))
        std[k] = float(math.sqrt(math.fsum((vals - m) ** 2) / len(vals)))
    return SplitSummary(dicts, mean, std)
