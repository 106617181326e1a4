"""Rule-based blocking labels for treatments.

A timestamp is positive when the pressure drop across the filter exceeds its
start-of-treatment reference by more than 100 mmHg, or when the coagulation
and excess-TMP alarms are active at the same minute.  The per-treatment label
sequence is latched: once blocking is detected the treatment stays positive.

The printed form of the coagulation alarm is ``p_filt <= 450``; because a
falling-pressure alarm is physically surprising, the comparison direction is
configurable (``alarm_inequality="inverted"`` flips it to ``>=``) but the
default is the rule as written.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DP, P_FILT, TMP, FilterSpec, TelemetrySample, Treatment, lookup_tmp_filter

DP_JUMP_MMHG = 100.0
COAGULATION_PFILT_MMHG = 450.0

ALARM_AS_WRITTEN = "as_written"
ALARM_INVERTED = "inverted"


class InsufficientHistoryError(ValueError):
    """Treatment too short to establish the pressure-drop reference."""


@dataclass(frozen=True)
class LabelContext:
    """Per-treatment constants the rules need: dP reference and TMP limit."""

    dp_ref: float
    tmp_filter: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.dp_ref):
            raise ValueError("dp_ref must be finite")
        if self.tmp_filter <= 0:
            raise ValueError("tmp_filter must be positive")


@dataclass(frozen=True)
class LabeledTreatment:
    """A treatment with its latched per-minute blocking labels.

    ``labels`` is monotone non-decreasing; ``onset`` is the timestamp of the
    first positive minute, or None when the treatment never blocks.
    """

    treatment: Treatment
    labels: np.ndarray
    onset: int | None

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if len(labels) != len(self.treatment):
            raise ValueError("labels length must match treatment length")
        if np.any(np.diff(labels.astype(np.int8)) < 0):
            raise ValueError("labels must be monotone non-decreasing")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def is_positive(self) -> bool:
        return self.onset is not None


def compute_dp_ref(treatment: Treatment) -> float:
    """Reference pressure drop: median of dP over the first ten minutes.

    The first ten samples by index are used (cadence is fixed at one per
    minute).  An even-count median is the midpoint of the two central values.
    """
    if len(treatment.ts) < 10:
        raise InsufficientHistoryError(
            f"treatment {treatment.id!r} has {len(treatment.ts)} samples; need >= 10"
        )
    return float(np.median(treatment.values[:10, DP]))


def label_timestamp(
    sample: TelemetrySample,
    ctx: LabelContext,
    alarm_inequality: str = ALARM_AS_WRITTEN,
) -> bool:
    """Raw (unlatched) rule evaluation for a single minute.

    Positive iff dp > dp_ref + 100, or the coagulation alarm and the
    excess-TMP alarm (tmp > tmp_filter) hold simultaneously.  Inequalities
    are strict exactly where written.
    """
    if sample.dp > ctx.dp_ref + DP_JUMP_MMHG:
        return True
    if alarm_inequality == ALARM_AS_WRITTEN:
        coagulation = sample.p_filt <= COAGULATION_PFILT_MMHG
    elif alarm_inequality == ALARM_INVERTED:
        coagulation = sample.p_filt >= COAGULATION_PFILT_MMHG
    else:
        raise ValueError(f"unknown alarm_inequality {alarm_inequality!r}")
    return coagulation and sample.tmp > ctx.tmp_filter


def _raw_labels(
    treatment: Treatment, ctx: LabelContext, alarm_inequality: str
) -> np.ndarray:
    dp = treatment.values[:, DP]
    p_filt = treatment.values[:, P_FILT]
    tmp = treatment.values[:, TMP]
    rule_dp = dp > ctx.dp_ref + DP_JUMP_MMHG
    if alarm_inequality == ALARM_AS_WRITTEN:
        coagulation = p_filt <= COAGULATION_PFILT_MMHG
    elif alarm_inequality == ALARM_INVERTED:
        coagulation = p_filt >= COAGULATION_PFILT_MMHG
    else:
        raise ValueError(f"unknown alarm_inequality {alarm_inequality!r}")
    return rule_dp | (coagulation & (tmp > ctx.tmp_filter))


def label_treatment(
    treatment: Treatment,
    catalog: dict[str, FilterSpec] | None = None,
    alarm_inequality: str = ALARM_AS_WRITTEN,
) -> LabeledTreatment:
    """Apply the decision flow to a whole treatment and latch the result.

    The dP reference is computed once, every minute is evaluated against the
    raw rules, and the label is held at 1 from the first firing onward.
    """
    ctx = LabelContext(
        dp_ref=compute_dp_ref(treatment),
        tmp_filter=lookup_tmp_filter(treatment.filter_code, catalog),
    )
    raw = _raw_labels(treatment, ctx, alarm_inequality)
    sticky = np.maximum.accumulate(raw.astype(np.uint8))
    fired = np.nonzero(sticky)[0]
    onset = int(treatment.ts[fired[0]]) if len(fired) else None
    return LabeledTreatment(treatment=treatment, labels=sticky, onset=onset)
