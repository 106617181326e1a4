"""Lag-delta tabular datasets, treatment-level splits, and feature-space transforms.

Each labeled treatment of length T yields T - delta rows: the 12 channel
values at minute ts paired with the blocking label at minute ts + delta.
Splits are performed at treatment granularity so adjacent near-duplicate
minutes never leak across train and test.

Two transforms of the training feature space live here because the
counterfactual costs need them: a per-feature empirical quantile map and a
ridge-regularized covariance model for Mahalanobis distances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .domain import FEATURES, N_FEATURES, feature_index
from .labeling import LabeledTreatment

PAPER_LAG_GRID = (10, 20, 30, 40, 50, 60)


class StratificationError(ValueError):
    """Not enough positive treatments to put one on each side of a split."""


@dataclass(frozen=True)
class TabularRow:
    """One supervised example with its provenance."""

    features: np.ndarray
    label: int
    treatment_id: str
    ts: int
    synthetic: bool = False


@dataclass(frozen=True)
class TabularDataset:
    """Row-major design matrix with labels and treatment provenance.

    ``treatment_ids`` is empty-string for synthetic rows (they have no
    provenance and must never reach a test set).  Immutable after
    construction.
    """

    X: np.ndarray
    y: np.ndarray
    treatment_ids: np.ndarray
    ts: np.ndarray
    lag_minutes: int
    synthetic: np.ndarray = field(default=None)  # type: ignore[assignment]
    feature_names: tuple[str, ...] = FEATURES

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.uint8)
        tids = np.asarray(self.treatment_ids, dtype=object)
        ts = np.ascontiguousarray(self.ts, dtype=np.int64)
        syn = self.synthetic
        syn = np.zeros(len(X), dtype=bool) if syn is None else np.ascontiguousarray(syn, dtype=bool)
        n = len(X)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"X must be (n, {len(self.feature_names)}), got {X.shape}")
        if not (len(y) == len(tids) == len(ts) == len(syn) == n):
            raise ValueError("column length mismatch")
        for arr in (X, y, ts, syn):
            arr.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "treatment_ids", tids)
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "synthetic", syn)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_positive(self) -> int:
        return int(self.y.sum())

    def row(self, i: int) -> TabularRow:
        return TabularRow(
            features=self.X[i].copy(),
            label=int(self.y[i]),
            treatment_id=str(self.treatment_ids[i]),
            ts=int(self.ts[i]),
            synthetic=bool(self.synthetic[i]),
        )

    def select(self, mask_or_idx: np.ndarray) -> "TabularDataset":
        return TabularDataset(
            X=self.X[mask_or_idx],
            y=self.y[mask_or_idx],
            treatment_ids=self.treatment_ids[mask_or_idx],
            ts=self.ts[mask_or_idx],
            lag_minutes=self.lag_minutes,
            synthetic=self.synthetic[mask_or_idx],
            feature_names=self.feature_names,
        )

    def project(self, names: tuple[str, ...]) -> "TabularDataset":
        """Restrict features to a named subset (keeps their given order)."""
        cols = [self.feature_names.index(n) for n in names]
        return TabularDataset(
            X=self.X[:, cols],
            y=self.y,
            treatment_ids=self.treatment_ids,
            ts=self.ts,
            lag_minutes=self.lag_minutes,
            synthetic=self.synthetic,
            feature_names=tuple(names),
        )


def tabularize(labeled: list[LabeledTreatment], lag_minutes: int) -> TabularDataset:
    """Emit one row per minute ts with the label taken at ts + lag.

    A treatment shorter than the lag contributes no rows (warned, not an
    error).  Only the 12 channel values become features; id, weight, filter
    set, and ts itself are provenance, never inputs.
    """
    if lag_minutes < 1:
        raise ValueError("lag_minutes must be >= 1")
    xs: list[np.ndarray] = []
    ys: list[np.ndarray] = []
    tids: list[np.ndarray] = []
    tss: list[np.ndarray] = []
    skipped = []
    for lt in labeled:
        t = lt.treatment
        n_rows = len(t) - lag_minutes
        if n_rows <= 0:
            skipped.append(t.id)
            continue
        xs.append(t.values[:n_rows])
        ys.append(lt.labels[lag_minutes:])
        tids.append(np.full(n_rows, t.id, dtype=object))
        tss.append(t.ts[:n_rows])
    if skipped:
        warnings.warn(
            f"{len(skipped)} treatment(s) shorter than lag {lag_minutes} contributed no rows: "
            + ", ".join(skipped[:5]),
            stacklevel=2,
        )
    if not xs:
        return TabularDataset(
            X=np.empty((0, N_FEATURES)),
            y=np.empty(0, dtype=np.uint8),
            treatment_ids=np.empty(0, dtype=object),
            ts=np.empty(0, dtype=np.int64),
            lag_minutes=lag_minutes,
        )
    return TabularDataset(
        X=np.concatenate(xs),
        y=np.concatenate(ys),
        treatment_ids=np.concatenate(tids),
        ts=np.concatenate(tss),
        lag_minutes=lag_minutes,
    )


def _allocate(ids: list[str], fraction: float, rng: np.random.Generator, force_both: bool) -> set[str]:
    """Pick a test subset of the given ids, keeping both sides non-empty when asked."""
    if not ids:
        return set()
    k = int(round(fraction * len(ids)))
    if force_both or len(ids) >= 2:
        k = min(max(k, 1), len(ids) - 1)
    order = np.array(sorted(ids), dtype=object)
    rng.shuffle(order)
    return set(order[:k])


def split_by_treatment(
    dataset: TabularDataset, test_fraction: float, seed: int
) -> tuple[TabularDataset, TabularDataset]:
    """Partition rows at treatment granularity, stratified on positives.

    Every treatment lands entirely on one side.  Treatments containing at
    least one positive row are allocated separately so both sides see
    positives; with fewer than two such treatments the split is impossible.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    if dataset.synthetic.any():
        raise ValueError("cannot split a dataset containing synthetic rows")
    pos_ids: set[str] = set(np.unique(dataset.treatment_ids[dataset.y == 1]))
    all_ids = set(np.unique(dataset.treatment_ids))
    neg_ids = all_ids - pos_ids
    if len(pos_ids) < 2:
        raise StratificationError(
            f"need >= 2 positive treatments to stratify, found {len(pos_ids)}"
        )
    rng = np.random.default_rng(seed)
    test_ids = _allocate(sorted(pos_ids), test_fraction, rng, force_both=True)
    test_ids |= _allocate(sorted(neg_ids), test_fraction, rng, force_both=len(neg_ids) >= 2)
    in_test = np.array([tid in test_ids for tid in dataset.treatment_ids])
    return dataset.select(~in_test), dataset.select(in_test)


@dataclass(frozen=True)
class QuantileTransform:
    """Per-feature empirical CDF fitted on training data.

    Each feature value maps to its rank/(N-1) with linear interpolation
    between training points; queries outside the training range clamp to 0
    or 1.  Tied training values share their average rank, and a feature that
    is constant in training maps everything to 0.5.
    """

    supports: tuple[np.ndarray, ...]
    ranks: tuple[np.ndarray, ...]
    feature_names: tuple[str, ...] = FEATURES

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map vectors (d,) or matrices (n, d) into [0, 1] per feature."""
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        rows = arr[None, :] if single else arr
        if rows.shape[1] != len(self.supports):
            raise ValueError("feature count mismatch with fitted transform")
        out = np.empty_like(rows)
        for j, (sup, rk) in enumerate(zip(self.supports, self.ranks)):
            if len(sup) == 1:
                out[:, j] = 0.5
            else:
                out[:, j] = np.interp(rows[:, j], sup, rk)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "supports": [s.tolist() for s in self.supports],
            "ranks": [r.tolist() for r in self.ranks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileTransform":
        return cls(
            supports=tuple(np.array(s, dtype=np.float64) for s in d["supports"]),
            ranks=tuple(np.array(r, dtype=np.float64) for r in d["ranks"]),
            feature_names=tuple(d["feature_names"]),
        )


def fit_quantile(train: TabularDataset) -> QuantileTransform:
    """Fit the per-feature empirical CDF on a non-empty training set."""
    if len(train) == 0:
        raise ValueError("cannot fit quantile transform on an empty dataset")
    n = len(train)
    supports = []
    ranks = []
    for j in range(train.X.shape[1]):
        col = np.sort(train.X[:, j])
        uniq, start = np.unique(col, return_index=True)
        if len(uniq) == 1:
            supports.append(uniq)
            ranks.append(np.array([0.5]))
            continue
        # Average rank of each tie block; block i spans [start[i], end[i]).
        end = np.append(start[1:], n)
        mean_idx = (start + end - 1) / 2.0
        supports.append(uniq)
        ranks.append(mean_idx / (n - 1))
    return QuantileTransform(supports=tuple(supports), ranks=tuple(ranks), feature_names=train.feature_names)


@dataclass(frozen=True)
class CovarianceModel:
    """Training mean and ridge-regularized covariance with its Cholesky factor.

    The ridge 1e-6 * trace(cov)/d is always added so near-collinear channels
    (dP versus P_ret - P_filt) cannot make the matrix singular.
    """

    mean: np.ndarray
    covariance: np.ndarray
    ridge: float
    cholesky: np.ndarray = field(repr=False)
    feature_names: tuple[str, ...] = FEATURES

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Coordinates in which the Mahalanobis distance is Euclidean."""
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        rows = arr[None, :] if single else arr
        sol = np.linalg.solve(self.cholesky, rows.T).T
        return sol[0] if single else sol

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceModel":
        cov = np.array(d["covariance"], dtype=np.float64)
        ridge = float(d["ridge"])
        reg = cov + ridge * np.eye(len(cov))
        return cls(
            mean=np.array(d["mean"], dtype=np.float64),
            covariance=cov,
            ridge=ridge,
            cholesky=np.linalg.cholesky(reg),
            feature_names=tuple(d["feature_names"]),
        )


def fit_covariance(train: TabularDataset) -> CovarianceModel:
    """Fit mean and regularized covariance; requires a plausibly full-rank sample."""
    d = train.X.shape[1]
    if len(train) < d + 1:
        raise ValueError(f"need >= {d + 1} rows to fit a covariance model, got {len(train)}")
    mean = train.X.mean(axis=0)
    cov = np.cov(train.X, rowvar=False)
    ridge = 1e-6 * float(np.trace(cov)) / d
    reg = cov + ridge * np.eye(d)
    chol = np.linalg.cholesky(reg)  # raises LinAlgError if not SPD
    return CovarianceModel(mean=mean, covariance=cov, ridge=ridge, cholesky=chol, feature_names=train.feature_names)


def mahalanobis(model: CovarianceModel, x: np.ndarray, x2: np.ndarray) -> float:
    """Distance sqrt((x - x')^T (cov + ridge I)^-1 (x - x'))."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x2, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("mahalanobis requires finite inputs")
    diff = np.linalg.solve(model.cholesky, a - b)
    return float(np.sqrt(diff @ diff))
