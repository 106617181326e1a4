"""Adaptive synthetic oversampling (ADASYN) of the blocking class.

Synthetic rows are generated only for training: they carry a synthetic flag,
no treatment provenance, and are discarded after the model is fitted.  The
number of synthetics per minority point is proportional to how surrounded by
majority neighbors that point is, so generation concentrates where the class
boundary is hardest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dataset import TabularDataset

MINORITY_LABEL = 1


@dataclass(frozen=True)
class AdasynConfig:
    target_ratio: float = 0.10
    k_neighbors: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.target_ratio <= 1.0:
            raise ValueError("target_ratio must lie in (0, 1]")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


def _standardize(X: np.ndarray) -> np.ndarray:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0.0] = 1.0
    return (X - mean) / std


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Apportion ``total`` integer counts by weight, remainders break ties by index."""
    quota = weights * total
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = quota - counts
        order = np.lexsort((np.arange(len(frac)), -frac))
        counts[order[:short]] += 1
    return counts


def adasyn(train: TabularDataset, config: AdasynConfig) -> TabularDataset:
    """Append synthetic minority rows until minority/majority hits the target.

    Needs G = round(target_ratio * m_maj) - m_min new rows.  Each minority
    point x_i gets a share of G proportional to the fraction of majority
    points among its K nearest neighbors (Euclidean on standardized
    features); each synthetic interpolates x_i toward one of its K nearest
    minority neighbors at a uniform random fraction.
    """
    y = train.y
    min_mask = y == MINORITY_LABEL
    m_min = int(min_mask.sum())
    m_maj = int(len(y) - m_min)
    if m_min == 0 or m_maj == 0:
        raise ValueError("adasyn requires both classes present in the training set")
    if m_min < 2:
        raise ValueError("adasyn requires at least 2 minority rows")
    if train.synthetic.any():
        raise ValueError("refusing to rebalance a dataset that already contains synthetic rows")

    G = max(0, int(round(config.target_ratio * m_maj)) - m_min)
    if G == 0:
        return train

    Xs = _standardize(train.X)
    X_min = Xs[min_mask]
    rng = np.random.default_rng(config.seed)

    # Hardness r_i: majority share among the K nearest neighbors in the full set.
    k_all = min(config.k_neighbors, len(Xs) - 1)
    all_tree = cKDTree(Xs)
    _, nbr = all_tree.query(X_min, k=k_all + 1)
    nbr = np.atleast_2d(nbr)[:, 1:]  # drop self
    r = (y[nbr] != MINORITY_LABEL).sum(axis=1) / k_all
    r_sum = r.sum()
    if r_sum == 0.0:
        # Minority perfectly separated; spread generation uniformly instead.
        weights = np.full(m_min, 1.0 / m_min)
    else:
        weights = r / r_sum
    g = _largest_remainder(weights, G)

    # Interpolation partners: the K nearest minority neighbors of each point.
    k_min = min(config.k_neighbors, m_min - 1)
    min_tree = cKDTree(X_min)
    _, min_nbr = min_tree.query(X_min, k=k_min + 1)
    min_nbr = np.atleast_2d(min_nbr)[:, 1:]

    X_min_raw = train.X[min_mask]
    new_rows = []
    for i in range(m_min):
        for _ in range(int(g[i])):
            if k_min == 0:
                new_rows.append(X_min_raw[i])
                continue
            z = min_nbr[i, rng.integers(k_min)]
            lam = rng.random()
            new_rows.append(X_min_raw[i] + lam * (X_min_raw[z] - X_min_raw[i]))

    X_new = np.array(new_rows) if new_rows else np.empty((0, train.X.shape[1]))
    n_new = len(X_new)
    return TabularDataset(
        X=np.concatenate([train.X, X_new]),
        y=np.concatenate([train.y, np.full(n_new, MINORITY_LABEL, dtype=np.uint8)]),
        treatment_ids=np.concatenate([train.treatment_ids, np.full(n_new, "", dtype=object)]),
        ts=np.concatenate([train.ts, np.full(n_new, -1, dtype=np.int64)]),
        lag_minutes=train.lag_minutes,
        synthetic=np.concatenate([train.synthetic, np.ones(n_new, dtype=bool)]),
        feature_names=train.feature_names,
    )
