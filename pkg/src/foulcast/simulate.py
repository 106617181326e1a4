"""Synthetic CRRT cohorts shaped like the clinical telemetry the pipeline expects.

The generator makes no physiological fidelity claims; it exists so the whole
pipeline is exercisable end to end.  What it does guarantee, by construction:

* non-blocking treatments never satisfy either labeling rule at any minute
  (noise on dP, P_filt and TMP is clipped so the rules stay strictly out of
  reach);
* blocking treatments develop a logistic ramp that drives dP past its
  reference by well over 100 mmHg, or pushes TMP above the filter limit while
  P_filt falls below 450 mmHg, or both, so the label sequence has exactly one
  0-to-1 transition inside a contiguous terminal segment;
* dP stays consistent with P_ret - P_filt up to the (bounded) channel noise;
* the same seed reproduces the same cohort byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .domain import (
    DEFAULT_FILTER_CATALOG,
    DP,
    N_FEATURES,
    P_ACC,
    P_EFF,
    P_FILT,
    P_RET,
    Q_BP,
    Q_DIAL,
    Q_PBP,
    Q_PFR,
    Q_REP,
    TMP,
    TMPA,
    FilterSpec,
    Treatment,
)

# Noise on the channels the labeling rules read is clipped to this band so
# rule margins can be guaranteed analytically regardless of noise_scale.
RULE_NOISE_CLIP = 15.0

# Sum of the per-channel clips: dP may drift from P_ret - P_filt by at most
# its own noise plus the two pressure noises.
DP_CONSISTENCY_BOUND = 3 * RULE_NOISE_CLIP

_MODES = ("clot", "clog", "both")
_MODE_WEIGHTS = (0.40, 0.25, 0.35)


@dataclass(frozen=True)
class SimConfig:
    """Cohort-level knobs for the generator."""

    n_treatments: int = 80
    clot_fraction: float = 91.0 / 796.0
    duration_range: tuple[int, int] = (180, 480)
    noise_scale: float = 2.0
    seed: int = 0
    # Fraction of the duration before which the blocking ramp never starts;
    # pushes onsets late, as blockings cluster at the end of real therapies.
    onset_position: float = 0.55

    def __post_init__(self) -> None:
        if self.n_treatments < 1:
            raise ValueError("n_treatments must be >= 1")
        if not 0.0 <= self.clot_fraction <= 1.0:
            raise ValueError("clot_fraction must lie in [0, 1]")
        lo, hi = self.duration_range
        if lo < 30 or hi < lo:
            raise ValueError("duration_range must satisfy 30 <= min <= max")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if not 0.0 <= self.onset_position < 0.9:
            raise ValueError("onset_position must lie in [0, 0.9)")


def _ar1(rng: np.random.Generator, n: int, scale: float, clip: float | None = None) -> np.ndarray:
    """AR(1) noise (phi = 0.9), optionally clipped to +-clip."""
    eps = rng.standard_normal(n) * scale
    out = lfilter([1.0], [1.0, -0.9], eps)
    if clip is not None:
        np.clip(out, -clip, clip, out=out)
    return out


def _piecewise_constant(rng: np.random.Generator, n: int, base: float, lo: float, hi: float) -> np.ndarray:
    """Prescription channel: setpoint held constant between occasional changes."""
    series = np.full(n, base)
    for _ in range(rng.poisson(1.5)):
        at = int(rng.integers(1, n))
        series[at:] = np.clip(series[at] * rng.uniform(0.8, 1.2), lo, hi)
    return series


def _ramp(ts: np.ndarray, t_mid: float, width: float) -> np.ndarray:
    """Logistic 0-to-1 profile; reaches 0.993 half a ramp length past t_mid."""
    return 1.0 / (1.0 + np.exp(-(ts - t_mid) / width))


def simulate_treatment(index: int, config: SimConfig) -> Treatment:
    """Generate one treatment; deterministic in (config.seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    lo, hi = config.duration_range
    n = int(rng.integers(lo, hi + 1))
    ts = np.arange(n, dtype=np.int64)
    clotting = rng.random() < config.clot_fraction

    codes = sorted(DEFAULT_FILTER_CATALOG)
    code = codes[rng.integers(len(codes))]
    tmp_filter = DEFAULT_FILTER_CATALOG[code].tmp_filter
    weight = round(float(rng.uniform(45.0, 120.0)), 1)

    p_filt_base = rng.uniform(470.0, 530.0)
    dp_base = rng.uniform(30.0, 80.0)
    p_ret_base = p_filt_base + dp_base
    p_acc_base = rng.uniform(-180.0, -80.0)
    p_eff_base = rng.uniform(-30.0, 120.0)
    tmp_base = rng.uniform(250.0, 380.0)

    q_bp_base = rng.uniform(100.0, 250.0)
    q_rep_base = rng.uniform(500.0, 2200.0)
    q_dial_base = rng.uniform(500.0, 2500.0)
    q_pbp_base = rng.uniform(0.0, 1200.0)
    q_pfr_base = rng.uniform(20.0, 300.0)
    if clotting:
        # Mild flow signature so prescription variables carry some signal.
        q_pfr_base += 25.0
        q_bp_base = max(80.0, q_bp_base - 10.0)

    ret_shift = np.zeros(n)
    filt_shift = np.zeros(n)
    tmp_shift = np.zeros(n)
    if clotting:
        mode = rng.choice(_MODES, p=_MODE_WEIGHTS)
        # The ramp must fit after minute 15 (clean dP reference) and plateau
        # five minutes before the end so the alarm segment is terminal.
        ramp_len = float(np.clip(rng.uniform(45.0, 120.0), 8.0, max(8.0, n - 21)))
        mid_lo = max(15.0 + ramp_len / 2.0, config.onset_position * n)
        mid_hi = n - 6.0 - ramp_len / 2.0
        t_mid = rng.uniform(mid_lo, mid_hi) if mid_lo < mid_hi else mid_hi
        rho = _ramp(ts.astype(np.float64), t_mid, ramp_len / 10.0)
        if mode == "clot":
            ret_shift = rng.uniform(200.0, 280.0) * rho
        elif mode == "clog":
            fall = p_filt_base - 320.0
            filt_shift = -fall * rho
            ret_shift = -(fall - rng.uniform(10.0, 35.0)) * rho
            tmp_shift = (tmp_filter - tmp_base + rng.uniform(100.0, 140.0)) * rho
        else:
            ret_shift = rng.uniform(80.0, 150.0) * rho
            filt_shift = -(p_filt_base - 320.0) * rho
            tmp_shift = (tmp_filter - tmp_base + rng.uniform(100.0, 140.0)) * rho

    s = config.noise_scale
    values = np.empty((n, N_FEATURES))
    values[:, P_ACC] = p_acc_base + _ar1(rng, n, s)
    values[:, P_FILT] = p_filt_base + filt_shift + _ar1(rng, n, s, clip=RULE_NOISE_CLIP)
    values[:, P_EFF] = p_eff_base + 0.3 * tmp_shift + _ar1(rng, n, s)
    values[:, P_RET] = p_ret_base + ret_shift + _ar1(rng, n, s, clip=RULE_NOISE_CLIP)
    values[:, Q_BP] = _piecewise_constant(rng, n, q_bp_base, 50.0, 300.0)
    values[:, Q_REP] = _piecewise_constant(rng, n, q_rep_base, 200.0, 3000.0)
    values[:, Q_DIAL] = _piecewise_constant(rng, n, q_dial_base, 200.0, 3500.0)
    values[:, Q_PBP] = _piecewise_constant(rng, n, q_pbp_base, 0.0, 2000.0)
    values[:, Q_PFR] = _piecewise_constant(rng, n, q_pfr_base, 0.0, 500.0)
    values[:, DP] = dp_base + ret_shift - filt_shift + _ar1(rng, n, s, clip=RULE_NOISE_CLIP)
    values[:, TMP] = tmp_base + tmp_shift + _ar1(rng, n, s, clip=RULE_NOISE_CLIP)
    values[:, TMPA] = values[:, TMP] + np.clip(rng.standard_normal(n) * 2.0, -6.0, 6.0)

    return Treatment(
        id=f"T{index:04d}",
        weight=weight,
        filter_code=code,
        ts=ts,
        values=values,
    )


def simulate_cohort(config: SimConfig) -> list[Treatment]:
    """Generate the full cohort in treatment-index order."""
    return [simulate_treatment(i, config) for i in range(config.n_treatments)]
