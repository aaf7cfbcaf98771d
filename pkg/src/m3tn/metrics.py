"""Uplift ranking metrics: Qini curve/coefficient, Kendall uplift rank correlation, arm aggregates.

Both metrics only look at the ranking induced by the scores. Samples are
sorted by score descending with ties kept in original index order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MetricError


@dataclass
class ArmSlice:
    """Samples of one treatment arm and the control group, scored by that arm's uplift."""

    scores: np.ndarray
    treated: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.treated = np.asarray(self.treated).astype(bool)
        self.responses = np.asarray(self.responses, dtype=np.float64)
        if not (len(self.scores) == len(self.treated) == len(self.responses)):
            raise MetricError("scores, treated flags and responses differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")
        if not self.treated.any() or self.treated.all():
            raise MetricError("an arm slice needs at least one treated and one control sample")

    def __len__(self) -> int:
        return len(self.scores)

    def ranking(self) -> np.ndarray:
        return np.argsort(-self.scores, kind="stable")


@dataclass
class QiniCurve:
    fractions: np.ndarray
    values: np.ndarray
    coefficient: float
    raw: float
    total_gain: float


def _prefix_gains(arm: ArmSlice) -> np.ndarray:
    """Incremental gain after each prefix of the ranking, index 0 being the empty prefix."""
    order = arm.ranking()
    treated = arm.treated[order]
    y = arm.responses[order]
    n_t = np.concatenate([[0], np.cumsum(treated)])
    n_c = np.concatenate([[0], np.cumsum(~treated)])
    s_t = np.concatenate([[0.0], np.cumsum(np.where(treated, y, 0.0))])
    s_c = np.concatenate([[0.0], np.cumsum(np.where(treated, 0.0, y))])
    q = np.zeros(len(n_t))
    has_c = n_c > 0
    q[has_c] = s_t[has_c] - s_c[has_c] * n_t[has_c] / n_c[has_c]
    return q


def qini_curve(arm: ArmSlice, grid_size: int = 100) -> QiniCurve:
    """Qini curve sampled on ``grid_size`` fractions in [0, 1] plus the Qini coefficient.

    The coefficient integrates the exact per-sample curve (trapezoid over
    prefix fractions m/n) minus the chord from (0, 0) to (1, Q(1)), divided by
    |Q(1)| when that is non-zero.
    """
    if grid_size < 2:
        raise MetricError(f"grid_size must be >= 2, got {grid_size}")
    q = _prefix_gains(arm)
    n = len(arm)
    step = 1.0 / n
    area = step * (q.sum() - 0.5 * (q[0] + q[-1]))
    raw = area - 0.5 * q[-1]
    coefficient = raw / abs(q[-1]) if q[-1] != 0 else raw
    m = (np.arange(grid_size) * n) // (grid_size - 1)
    return QiniCurve(m / n, q[m], float(coefficient), float(raw), float(q[-1]))


def qini_coefficient(arm: ArmSlice) -> float:
    return qini_curve(arm, 2).coefficient


def _bin_groups(arm: ArmSlice, num_bins: int) -> list[np.ndarray]:
    """Quantile bins by descending score; a bin missing either group is merged into the next one down."""
    chunks = np.array_split(arm.ranking(), num_bins)
    groups: list[np.ndarray] = []
    pending = np.zeros(0, dtype=np.int64)
    for chunk in chunks:
        pending = np.concatenate([pending, chunk])
        flags = arm.treated[pending]
        if flags.any() and not flags.all():
            groups.append(pending)
            pending = np.zeros(0, dtype=np.int64)
    if len(pending) and groups:
        groups[-1] = np.concatenate([groups[-1], pending])
    return groups


def bin_uplifts(arm: ArmSlice, num_bins: int = 10) -> np.ndarray:
    """Observed uplift (treated mean minus control mean) per score bin, highest scores first."""
    out = []
    for g in _bin_groups(arm, num_bins):
        flags = arm.treated[g]
        y = arm.responses[g]
        out.append(y[flags].mean() - y[~flags].mean())
    return np.array(out)


def kendall_uplift(arm: ArmSlice, num_bins: int = 10) -> float:
    """Kendall's tau between predicted bin order and observed per-bin uplift.

    A pair of bins (i above j in predicted order) is concordant when the
    observed uplift of i exceeds that of j; tied uplifts count as neither.
    """
    if num_bins < 2:
        raise MetricError(f"num_bins must be >= 2, got {num_bins}")
    u = bin_uplifts(arm, num_bins)
    b = len(u)
    if b < 2:
        raise MetricError(f"only {b} usable bin(s) after merging; need at least 2")
    diff = np.sign(u[:, None] - u[None, :])
    upper = np.triu_indices(b, k=1)
    return float(diff[upper].sum() / (b * (b - 1) / 2))


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


@dataclass
class EvaluationReport:
    """Per-arm Qini and Kendall values and their across-arm mean / sample std / std error."""

    qini: list[float]
    qini_raw: list[float]
    kendall: list[float]
    curves: dict[int, QiniCurve] = field(default_factory=dict, repr=False)

    @property
    def num_treatments(self) -> int:
        return len(self.qini)

    @property
    def mQini(self) -> float:
        return _mean_sd(self.qini)[0]

    @property
    def sdQini(self) -> float:
        return _mean_sd(self.qini)[1]

    @property
    def mKendall(self) -> float:
        return _mean_sd(self.kendall)[0]

    @property
    def sdKendall(self) -> float:
        return _mean_sd(self.kendall)[1]

    def aggregates(self) -> dict[str, float]:
        k = self.num_treatments
        return {
            "mQini": self.mQini,
            "sdQini": self.sdQini,
            "seQini": self.sdQini / math.sqrt(k),
            "mKendall": self.mKendall,
            "sdKendall": self.sdKendall,
            "seKendall": self.sdKendall / math.sqrt(k),
        }

    def to_dict(self, include_curves: bool = False) -> dict:
        d: dict = {}
        for k in range(1, self.num_treatments + 1):
            d[f"qini_{k}"] = self.qini[k - 1]
            d[f"qini_raw_{k}"] = self.qini_raw[k - 1]
            d[f"kendall_{k}"] = self.kendall[k - 1]
        d.update(self.aggregates())
        if include_curves:
            d["curves"] = {
                str(k): {"fraction": c.fractions.tolist(), "qini_value": c.values.tolist()}
                for k, c in self.curves.items()
            }
        return d


def arm_slice(scores: np.ndarray, t: np.ndarray, y: np.ndarray, k: int) -> ArmSlice:
    t = np.asarray(t)
    mask = (t == 0) | (t == k)
    if not (t == k).any():
        raise MetricError(f"no samples for treatment arm {k}")
    if not (t == 0).any():
        raise MetricError("no control samples")
    return ArmSlice(np.asarray(scores)[mask], t[mask] == k, np.asarray(y)[mask])


def evaluate(
    tau: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    grid_size: int = 100,
    num_bins: int = 10,
) -> EvaluationReport:
    """Score each arm k on samples with t in {0, k}, ranked by ``tau[:, k-1]``.

    ``tau`` may be an ``UpliftPrediction`` or an (n, K) array.
    """
    tau = getattr(tau, "tau", tau)
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 2 or len(tau) != len(t):
        raise MetricError(f"uplift scores of shape {tau.shape} do not match {len(t)} samples")
    qini, raw, kendall, curves = [], [], [], {}
    for k in range(1, tau.shape[1] + 1):
        arm = arm_slice(tau[:, k - 1], t, y, k)
        curve = qini_curve(arm, grid_size)
        curves[k] = curve
        qini.append(curve.coefficient)
        raw.append(curve.raw)
        kendall.append(kendall_uplift(arm, num_bins))
    return EvaluationReport(qini, raw, kendall, curves)


def write_curve_csv(curve: QiniCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "qini_value"])
        for f, v in zip(curve.fractions, curve.values):
            w.writerow([repr(float(f)), repr(float(v))])
