"""Accuracy and fairness metrics for age prediction.

Rank correlation is Spearman: average ranks for ties, then the
product-moment formula applied to the ranks. Degenerate inputs raise
``UndefinedCorrelationError`` instead of returning 0 so broken evaluations
cannot hide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from trivit.errors import ContractError, UndefinedCorrelationError


def _check_pair(preds, ages):
    preds = np.asarray(preds, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    if preds.ndim != 1 or ages.ndim != 1 or preds.shape != ages.shape:
        raise ContractError(
            f"metric inputs must be equal-length vectors, got {preds.shape} and {ages.shape}"
        )
    return preds, ages


def mae(preds, ages) -> float:
    preds, ages = _check_pair(preds, ages)
    if preds.size == 0:
        raise ContractError("mae of an empty prediction set")
    return float(np.abs(preds - ages).mean())


def bag(preds, ages) -> np.ndarray:
    """Per-sample absolute gap |prediction - age|, in years."""
    preds, ages = _check_pair(preds, ages)
    return np.abs(preds - ages)


def ranks(values) -> np.ndarray:
    """1-based ranks, ties averaged."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    is_start = np.r_[True, sorted_vals[1:] != sorted_vals[:-1]]
    group_start = np.flatnonzero(is_start)
    group_of = np.cumsum(is_start) - 1
    counts = np.diff(np.r_[group_start, values.size])
    avg_rank = group_start + (counts - 1) / 2.0 + 1.0
    out = np.empty(values.size, dtype=np.float64)
    out[order] = avg_rank[group_of]
    return out


def spearman(preds, ages) -> float:
    preds, ages = _check_pair(preds, ages)
    if preds.size < 2:
        raise UndefinedCorrelationError(f"correlation needs n >= 2, got n={preds.size}")
    rp_ = ranks(preds)
    ra = ranks(ages)
    dp = rp_ - rp_.mean()
    da = ra - ra.mean()
    denom_p = float(dp @ dp)
    denom_a = float(da @ da)
    if denom_p == 0.0 or denom_a == 0.0:
        raise UndefinedCorrelationError("correlation undefined: a vector has zero rank variance")
    return float((dp @ da) / np.sqrt(denom_p * denom_a))


def rp(preds, ages) -> float:
    """Age-bias coefficient: Spearman correlation of the absolute gap with
    chronological age. Magnitude near 0 means the estimator treats ages
    evenly."""
    return spearman(bag(preds, ages), ages)


@dataclass
class MetricsReport:
    n: int
    mae: float
    r: float | None
    rp: float | None
    per_sample_bag: np.ndarray
    note: str | None = None  # reason when r/rp are undefined

    def to_dict(self) -> dict:
        out = {"n": self.n, "mae": self.mae, "r": self.r, "rp": self.rp}
        if self.note is not None:
            out["note"] = self.note
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def compute_report(preds, ages) -> MetricsReport:
    preds, ages = _check_pair(preds, ages)
    if preds.size == 0:
        raise ContractError("empty evaluation set")
    gaps = bag(preds, ages)
    notes = []
    try:
        r_val = spearman(preds, ages)
    except UndefinedCorrelationError as exc:
        r_val = None
        notes.append(f"r undefined: {exc}")
    try:
        rp_val = spearman(gaps, ages)
    except UndefinedCorrelationError as exc:
        rp_val = None
        notes.append(f"rp undefined: {exc}")
    note = "; ".join(notes) or None
    return MetricsReport(
        n=int(preds.size),
        mae=mae(preds, ages),
        r=r_val,
        rp=rp_val,
        per_sample_bag=gaps,
        note=note,
    )
