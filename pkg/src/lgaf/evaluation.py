"""1:1 verification (K-fold best threshold) and closed-set rank-k identification."""
from __future__ import annotations

import numpy as np


def unit_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError(f"embedding row {int(np.flatnonzero(n[:, 0] == 0)[0])} has zero norm")
    return x / n


def pair_similarities(pairs, embeddings) -> tuple[np.ndarray, np.ndarray]:
    e = unit_rows(embeddings)
    a = np.array([p[0] for p in pairs], dtype=np.int64)
    b = np.array([p[1] for p in pairs], dtype=np.int64)
    same = np.array([bool(p[2]) for p in pairs])
    return np.einsum("ij,ij->i", e[a], e[b]), same


def best_threshold(sims: np.ndarray, same: np.ndarray) -> float:
    """Threshold maximizing accuracy of the rule ``sim > t`` (midpoints between sorted scores).

    Ties go to the lowest such threshold.
    """
    order = np.argsort(sims, kind="stable")
    s, y = sims[order], same[order]
    n = len(s)
    # candidate k: t sits below s[k]; k = 0 predicts all same, k = n predicts all different
    diff_below = np.concatenate([[0], np.cumsum(~y)])
    same_above = np.concatenate([[0], np.cumsum(y[::-1])])[::-1]
    correct = diff_below + same_above
    # a threshold cannot separate equal scores
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[1:] > s[:-1]
    k = int(np.flatnonzero(valid & (correct == correct[valid].max()))[0])
    if k == 0:
        return float(s[0] - 1.0)
    if k == n:
        return float(s[-1])
    return float((s[k - 1] + s[k]) / 2.0)


def verify(pairs, embeddings, folds: int = 10, return_folds: bool = False):
    """Mean held-out accuracy of the best training-fold threshold on cosine similarity.

    Folds are contiguous blocks of the pair list.
    """
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if len(pairs) < folds:
        raise ValueError(f"need at least {folds} pairs for {folds}-fold verification, got {len(pairs)}")
    sims, same = pair_similarities(pairs, embeddings)
    blocks = np.array_split(np.arange(len(sims)), folds)
    accs, thresholds = [], []
    for i, test in enumerate(blocks):
        trn = np.concatenate([b for j, b in enumerate(blocks) if j != i])
        t = best_threshold(sims[trn], same[trn])
        accs.append(float(np.mean((sims[test] > t) == same[test])))
        thresholds.append(t)
    acc = float(np.mean(accs))
    return (acc, accs, thresholds) if return_folds else acc


def identify(gallery_embeddings, gallery_ids, probe_embeddings, probe_ids, ks=(1, 3, 5)) -> dict[int, float]:
    """Rank-k rates: identities are ranked by their best gallery match for each probe.

    Equal similarities are ordered by gallery index.
    """
    g_ids = np.asarray(gallery_ids)
    p_ids = np.asarray(probe_ids)
    known = set(g_ids.tolist())
    missing = sorted(set(p_ids.tolist()) - known)
    if missing:
        raise ValueError(f"probe identities absent from gallery (open set): {missing[:10]}")
    sims = unit_rows(probe_embeddings) @ unit_rows(gallery_embeddings).T
    ranks = np.empty(len(p_ids), dtype=np.int64)
    for i in range(len(p_ids)):
        order = np.lexsort((np.arange(len(g_ids)), -sims[i]))
        _, first = np.unique(g_ids[order], return_index=True)
        id_order = g_ids[order][np.sort(first)]
        ranks[i] = int(np.flatnonzero(id_order == p_ids[i])[0]) + 1
    return {int(k): float(np.mean(ranks <= k)) for k in ks}
