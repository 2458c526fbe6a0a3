"""Evaluation measures and report writers.

All measures here are plain float64 numpy, independent of the torch loss
implementation, so the two routes can be checked against each other. SI-SNR
improvement is computed as a difference of two identical code paths, which
makes the mixture-as-estimate baseline land on exactly 0.0.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CLAMP_DB = 60.0
EPS = 1e-8


def si_snr_db(
    est: np.ndarray,
    ref: np.ndarray,
    zero_mean: bool = True,
    eps: float = EPS,
    clamp_db: float = CLAMP_DB,
) -> float:
    """Scale-invariant SNR of a single estimate against its reference."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 1:
        raise ValueError("expected two equal-length 1-D arrays")
    if not np.all(np.isfinite(ref)):
        raise ValueError("reference must be finite")
    # A diverged estimate carries no usable signal; the clamp floor is its
    # honest score. (The torch loss path must keep propagating NaN instead,
    # so run divergence stays detectable there.)
    if not np.all(np.isfinite(est)):
        return -clamp_db
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    ref_pow = float(np.dot(ref, ref))
    if ref_pow <= 0:
        raise ValueError("reference has zero power")
    # rescale the estimate to the reference norm: a no-op for the measure,
    # but it keeps the eps floors scale-free for very quiet estimates
    # (peak-prescale first so the norm cannot overflow for very loud ones)
    peak = float(np.max(np.abs(est)))
    if peak > 0.0:
        est = est / peak
    est_norm = math.sqrt(float(np.dot(est, est)))
    est = est * (math.sqrt(ref_pow) / max(est_norm, 1e-12))
    proj = (float(np.dot(est, ref)) / ref_pow) * ref
    err = est - proj
    num = max(float(np.dot(proj, proj)), eps)
    den = max(float(np.dot(err, err)), eps)
    val = 10.0 * math.log10(num / den)
    return min(max(val, -clamp_db), clamp_db)


def si_snri_db(est: np.ndarray, ref: np.ndarray, mixture: np.ndarray) -> float:
    """Improvement over the unprocessed mixture, in dB."""
    return si_snr_db(est, ref) - si_snr_db(mixture, ref)


def sdr_db(
    est: np.ndarray,
    ref: np.ndarray,
    eps: float = EPS,
    clamp_db: float = CLAMP_DB,
) -> float:
    """Plain (scale-sensitive) signal-to-distortion ratio."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 1:
        raise ValueError("expected two equal-length 1-D arrays")
    if not np.all(np.isfinite(ref)):
        raise ValueError("reference must be finite")
    if not np.all(np.isfinite(est)):
        return -clamp_db
    ref_pow = float(np.dot(ref, ref))
    if ref_pow <= 0:
        raise ValueError("reference has zero power")
    err = ref - est
    den = max(float(np.dot(err, err)), eps)
    if not math.isfinite(den):
        return -clamp_db
    val = 10.0 * math.log10(max(ref_pow, eps) / den)
    return min(max(val, -clamp_db), clamp_db)


def score(est: np.ndarray, ref: np.ndarray, mixture: np.ndarray) -> dict[str, float]:
    """The standard per-item metric row."""
    return {
        "si_snr_db": si_snr_db(est, ref),
        "si_snri_db": si_snri_db(est, ref, mixture),
        "sdr_db": sdr_db(est, ref),
    }


def segmental_si_snr(
    est: np.ndarray,
    ref: np.ndarray,
    boundaries_s: list[float],
    rate: int,
) -> list[dict[str, float]]:
    """SI-SNR per interval between consecutive boundaries.

    Degenerate intervals (fewer than two samples, or a reference with no
    energy there) are skipped with a warning rather than scored.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("estimate and reference must share shape")
    if sorted(boundaries_s) != list(boundaries_s):
        raise ValueError("boundaries must be non-decreasing")
    out = []
    for lo_s, hi_s in zip(boundaries_s[:-1], boundaries_s[1:]):
        lo = int(round(lo_s * rate))
        hi = min(int(round(hi_s * rate)), len(ref))
        seg_ref = ref[lo:hi]
        if hi - lo < 2:
            log.warning("skipping degenerate segment [%s, %s) s", lo_s, hi_s)
            continue
        centered = seg_ref - seg_ref.mean()
        if float(np.dot(centered, centered)) <= 0:
            log.warning("skipping silent reference segment [%s, %s) s", lo_s, hi_s)
            continue
        out.append(
            {
                "start_s": float(lo_s),
                "end_s": float(hi_s),
                "si_snr_db": si_snr_db(est[lo:hi], seg_ref),
            }
        )
    return out


_METRIC_KEYS = ("si_snr_db", "si_snri_db", "sdr_db")


def _summary(rows: list[dict], keys=_METRIC_KEYS) -> dict:
    out: dict = {"count": len(rows)}
    for key in keys:
        values = [float(r[key]) for r in rows if key in r]
        if not values:
            continue
        out[f"mean_{key}"] = float(np.mean(values))
        out[f"median_{key}"] = float(np.median(values))
        out[f"std_{key}"] = float(np.std(values))
    return out


def aggregate(rows: list[dict], group_key: str = "impairment_type") -> dict:
    """Overall summary plus a per-group breakdown (impairment type by default)."""
    result = _summary(rows)
    groups: dict[str, list[dict]] = {}
    for row in rows:
        if group_key in row:
            groups.setdefault(str(row[group_key]), []).append(row)
    if groups:
        result["by_" + group_key] = {
            name: _summary(members) for name, members in sorted(groups.items())
        }
    return result


def write_report_csv(path: str | Path, rows: list[dict]) -> None:
    """One row per scored item; column order is first-row key order."""
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0].keys())
    for row in rows[1:]:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_aggregate_json(path: str | Path, agg: dict) -> None:
    with open(path, "w") as f:
        json.dump(agg, f, indent=2, sort_keys=True)
        f.write("\n")
