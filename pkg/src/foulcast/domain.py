"""Shared domain types: telemetry schema, filter catalog, prescription mask.

Every treatment is a per-minute multivariate time series.  Twelve channels
feed the learning pipeline; treatment-level metadata (id, patient weight,
filter set) is carried separately and never becomes a model feature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Model-facing channels, in canonical column order.  This order is the
# contract for every feature matrix, CSV file and serialized model schema.
FEATURES: tuple[str, ...] = (
    "p_acc",
    "p_filt",
    "p_eff",
    "p_ret",
    "q_bp",
    "q_rep",
    "q_dial",
    "q_pbp",
    "q_pfr",
    "dp",
    "tmp",
    "tmpa",
)
N_FEATURES = len(FEATURES)

# Display/CSV names for the same channels, in the same order.
CSV_FEATURE_NAMES: tuple[str, ...] = (
    "P_acc",
    "P_filt",
    "P_eff",
    "P_ret",
    "Q_bp",
    "Q_rep",
    "Q_dial",
    "Q_pbp",
    "Q_pfr",
    "dP",
    "TMP",
    "TMPa",
)

# Pump settings a clinician can adjust; the only actionable features.
PRESCRIPTION_FEATURES: tuple[str, ...] = ("q_bp", "q_rep", "q_dial", "q_pbp", "q_pfr")
PRESCRIPTION_INDICES: tuple[int, ...] = tuple(FEATURES.index(f) for f in PRESCRIPTION_FEATURES)

P_ACC, P_FILT, P_EFF, P_RET, Q_BP, Q_REP, Q_DIAL, Q_PBP, Q_PFR, DP, TMP, TMPA = range(N_FEATURES)


def feature_index(name: str) -> int:
    """Canonical column index of a feature name."""
    try:
        return FEATURES.index(name)
    except ValueError:
        raise KeyError(f"unknown feature {name!r}") from None


class UnknownFilterError(LookupError):
    """A filter code has no entry in the catalog.  Never silently defaulted."""


@dataclass(frozen=True)
class FilterSpec:
    """One catalog entry: filter code and its transmembrane pressure limit."""

    code: str
    tmp_filter: float

    def __post_init__(self) -> None:
        if self.tmp_filter <= 0:
            raise ValueError(f"tmp_filter must be positive, got {self.tmp_filter}")


# Built-in catalog of the ten supported filter sets.
DEFAULT_FILTER_CATALOG: dict[str, FilterSpec] = {
    spec.code: spec
    for spec in (
        FilterSpec("septeX", 450.0),
        FilterSpec("ST150", 450.0),
        FilterSpec("Xiris", 450.0),
        FilterSpec("TPE2000", 500.0),
        FilterSpec("X-MARS", 600.0),
        FilterSpec("M100", 450.0),
        FilterSpec("ST60", 450.0),
        FilterSpec("HF1000", 500.0),
        FilterSpec("ST100", 450.0),
        FilterSpec("HF1400", 500.0),
    )
}


def lookup_tmp_filter(code: str, catalog: dict[str, FilterSpec] | None = None) -> float:
    """TMP limit (mmHg) for a filter code.

    Raises UnknownFilterError for codes missing from the catalog; there is
    deliberately no fallback value.
    """
    table = DEFAULT_FILTER_CATALOG if catalog is None else catalog
    spec = table.get(code)
    if spec is None:
        raise UnknownFilterError(f"filter code {code!r} not in catalog")
    return spec.tmp_filter


def load_filter_catalog(path: str | Path) -> dict[str, FilterSpec]:
    """Read a catalog override file: CSV with header ``code,tmp_filter``."""
    catalog: dict[str, FilterSpec] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"code", "tmp_filter"}:
            raise ValueError(f"{path}: expected header 'code,tmp_filter'")
        for lineno, row in enumerate(reader, start=2):
            code = row["code"].strip()
            if code in catalog:
                raise ValueError(f"{path}:{lineno}: duplicate filter code {code!r}")
            catalog[code] = FilterSpec(code, float(row["tmp_filter"]))
    return catalog


@dataclass(frozen=True)
class TelemetrySample:
    """One minute of machine telemetry (the 12 model-facing channels)."""

    ts: int
    p_acc: float
    p_filt: float
    p_eff: float
    p_ret: float
    q_bp: float
    q_rep: float
    q_dial: float
    q_pbp: float
    q_pfr: float
    dp: float
    tmp: float
    tmpa: float

    def features(self) -> np.ndarray:
        """The sample as a feature vector in canonical column order."""
        return np.array([getattr(self, name) for name in FEATURES], dtype=np.float64)


@dataclass(frozen=True)
class Treatment:
    """One therapy session: metadata plus a 1-minute-cadence channel matrix.

    ``values`` has one row per minute and one column per FEATURES entry.
    Both arrays are frozen after construction; treatments can be shared
    freely across threads.
    """

    id: str
    weight: float
    filter_code: str
    ts: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        ts = np.ascontiguousarray(self.ts, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != N_FEATURES:
            raise ValueError(f"values must be (T, {N_FEATURES}), got {values.shape}")
        if len(ts) != len(values):
            raise ValueError("ts and values length mismatch")
        if len(ts) < 10:
            raise ValueError(f"treatment {self.id!r} has {len(ts)} samples; need >= 10")
        if not np.all(np.diff(ts) == 1):
            raise ValueError(f"treatment {self.id!r}: timestamps must increase by 1 minute")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"treatment {self.id!r}: non-finite channel values")
        ts.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.ts)

    def sample(self, i: int) -> TelemetrySample:
        """Materialize minute ``i`` as a TelemetrySample."""
        row = self.values[i]
        return TelemetrySample(int(self.ts[i]), *(float(v) for v in row))

    def channel(self, name: str) -> np.ndarray:
        """Full time series of one named channel."""
        return self.values[:, feature_index(name)]


def validate_feature_vector(x: np.ndarray) -> np.ndarray:
    """Coerce to a finite float64 vector of the canonical 12 components."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (N_FEATURES,):
        raise ValueError(f"feature vector must have shape ({N_FEATURES},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature vector has non-finite components")
    return arr
