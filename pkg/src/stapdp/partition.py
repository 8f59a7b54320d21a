"""Partition summaries of the label draws.

Partitions are compared by the pairwise-disagreement loss: the number of
subject pairs on which two partitions disagree about co-membership.  The
posterior over partitions is summarized by the co-clustering matrix and by
the sampled partition minimizing expected pairwise loss against it.
"""

from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import average, leaves_list
from scipy.spatial.distance import squareform


@dataclass(frozen=True)
class Partition:
    """Cluster labels for a fixed, ordered set of subjects."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 1:
            raise ValueError(f"labels must be one-dimensional, got shape {lab.shape}")
        if lab.size and not np.issubdtype(lab.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {lab.dtype}")
        object.__setattr__(self, "labels", lab)

    @property
    def n_subjects(self):
        return self.labels.size

    def n_clusters(self):
        return int(np.unique(self.labels).size)


def _as_labels(partition) -> np.ndarray:
    if isinstance(partition, Partition):
        return partition.labels
    return Partition(np.asarray(partition)).labels


def _labels_matrix(draws) -> np.ndarray:
    """Accept PosteriorDraws or a plain (M, N) integer matrix."""
    if hasattr(draws, "labels_matrix"):
        mat = draws.labels_matrix()
    else:
        mat = np.asarray(draws)
    if mat.ndim != 2:
        raise ValueError(f"need a (draws, subjects) label matrix, got shape {mat.shape}")
    return mat


def _pairs_within(labels: np.ndarray) -> int:
    _, counts = np.unique(labels, return_counts=True)
    return _pairs_from_counts(counts)


def _pairs_from_counts(counts: np.ndarray) -> int:
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def binder_loss(truth, estimate) -> int:
    """Number of subject pairs whose co-membership the two partitions disagree on.

    Exact integer via the contingency identity: pairs together in truth,
    plus pairs together in the estimate, minus twice the pairs together in
    both.  Invariant to relabeling either side.
    """
    t = _as_labels(truth)
    e = _as_labels(estimate)
    if t.size != e.size:
        raise ValueError(f"partitions cover {t.size} and {e.size} subjects")
    _, t_dense = np.unique(t, return_inverse=True)
    codes, e_dense = np.unique(e, return_inverse=True)
    joint = t_dense.astype(np.int64) * max(codes.size, 1) + e_dense
    both = _pairs_within(joint)
    return _pairs_within(t_dense) + _pairs_within(e_dense) - 2 * both


def binder_losses(truth, draws) -> np.ndarray:
    """Loss of every sampled partition against one reference, shape (M,)."""
    t = _as_labels(truth)
    mat = _labels_matrix(draws)
    if mat.shape[1] != t.size:
        raise ValueError(f"label matrix covers {mat.shape[1]} subjects, truth covers {t.size}")
    if mat.size == 0 or mat.min() < 0:
        return np.array([binder_loss(t, mat[m]) for m in range(mat.shape[0])], dtype=np.int64)
    # fast path for the sampler's nonnegative label codes: pure bincounts
    _, t_dense = np.unique(t, return_inverse=True)
    t_dense = t_dense.astype(np.int64)
    n_t = int(t_dense.max()) + 1 if t.size else 1
    n_e = int(mat.max()) + 1
    T = _pairs_from_counts(np.bincount(t_dense, minlength=n_t))
    out = np.empty(mat.shape[0], dtype=np.int64)
    for m in range(mat.shape[0]):
        e = mat[m].astype(np.int64)
        E = _pairs_from_counts(np.bincount(e, minlength=n_e))
        B = _pairs_from_counts(np.bincount(t_dense * n_e + e, minlength=n_t * n_e))
        out[m] = T + E - 2 * B
    return out


def coclustering(draws) -> np.ndarray:
    """Posterior co-clustering matrix: P[i, j] = share of draws with i, j together.

    Symmetric with unit diagonal by construction.
    """
    mat = _labels_matrix(draws)
    M, N = mat.shape
    if M == 0:
        raise ValueError("need at least one draw")
    P = np.zeros((N, N))
    step = max(1, 2**22 // max(N * N, 1))
    for lo in range(0, M, step):
        chunk = mat[lo:lo + step]
        P += (chunk[:, :, None] == chunk[:, None, :]).sum(axis=0)
    return P / M


def _canonical(labels: np.ndarray) -> tuple:
    """Relabel clusters by order of first appearance, for deduplication."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return tuple(rank[inverse].tolist())


def expected_pairwise_loss(labels: np.ndarray, P: np.ndarray) -> float:
    """Posterior-expected pairwise disagreement of one partition against P."""
    lab = _as_labels(labels)
    iu = np.triu_indices(lab.size, k=1)
    total = float(P[iu].sum())
    score = total
    for c in np.unique(lab):
        idx = np.flatnonzero(lab == c)
        if idx.size > 1:
            sub = P[np.ix_(idx, idx)]
            n_pairs = idx.size * (idx.size - 1) / 2.0
            score += n_pairs - 2.0 * float(np.triu(sub, k=1).sum())
    return score


def assign_mode(draws, P: np.ndarray | None = None) -> Partition:
    """The sampled partition minimizing expected pairwise loss.

    Duplicate partitions (up to relabeling) are scored once; ties go to the
    earliest draw.  The result is always one of the sampled partitions.
    """
    mat = _labels_matrix(draws)
    if mat.shape[0] == 0:
        raise ValueError("need at least one draw")
    if P is None:
        P = coclustering(mat)
    seen = {}
    for m in range(mat.shape[0]):
        key = _canonical(mat[m])
        if key not in seen:
            seen[key] = m
    best_m, best_score = None, np.inf
    for key, m in sorted(seen.items(), key=lambda kv: kv[1]):
        score = expected_pairwise_loss(mat[m], P)
        if score < best_score:
            best_m, best_score = m, score
    return Partition(mat[best_m].copy())


def sort_for_heatmap(P: np.ndarray, mode: Partition) -> np.ndarray:
    """Subject permutation for display: mode clusters as blocks, cohesive rows adjacent.

    Blocks are ordered by decreasing size (input order breaks ties); within
    a block subjects follow the leaf order of average-linkage clustering on
    1 - P, falling back to input order when the block is tiny or P is
    constant there.
    """
    lab = mode.labels
    if P.shape != (lab.size, lab.size):
        raise ValueError(f"matrix shape {P.shape} does not match {lab.size} subjects")
    clusters, first = np.unique(lab, return_index=True)
    sizes = np.array([(lab == c).sum() for c in clusters])
    block_order = np.lexsort((first, -sizes))
    perm = []
    for b in block_order:
        idx = np.flatnonzero(lab == clusters[b])
        if idx.size > 2:
            dist = 1.0 - P[np.ix_(idx, idx)]
            np.fill_diagonal(dist, 0.0)
            dist = np.maximum(dist, 0.0)
            if dist.max() > 0.0:
                tree = average(squareform(dist, checks=False))
                idx = idx[leaves_list(tree)]
        perm.extend(idx.tolist())
    return np.asarray(perm, dtype=np.intp)
