#!/usr/bin/env python3
"""
clinical_metrics.py - Error statistics, BHS grading, AAMI compliance and evaluation reports

Errors follow the clinical convention Error = BP_target - BP_estimated, in mmHg.

    MAE  = mean |e|
    SD   = population standard deviation of e (denominator n)
    bias = mean e
    R^2  = 1 - sum((t - p)^2) / sum((t - mean(t))^2)

BHS grade: the best of A (60/85/95 %), B (50/75/90 %), C (40/65/85 %) whose three
cumulative percentages of |e| <= 5 / 10 / 15 mmHg are all met (inclusive); otherwise D.
AAMI: pass when |bias| <= 5 mmHg and SD < 8 mmHg.

Reports serialize to JSON (schema in docs/REPORT_SCHEMA.md) and to a markdown table
with the columns Dataset, Method, Frozen?, Epochs, Size, DBP SD/MAE/R^2,
SBP SD/MAE/R^2, BHS, AAMI.
"""

import json
import statistics
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from common import MetricError, UndefinedR2Error
from encoder_model import TargetNorm, predict
import numpy as np
from signal_data import SegmentDataset
from training import denormalize

TARGETS = ("sbp", "dbp")
THRESHOLDS_MMHG = (5, 10, 15)

# grade -> minimum cumulative percentages at 5 / 10 / 15 mmHg
BHS_TABLE = {
    "A": (60, 85, 95),
    "B": (50, 75, 90),
    "C": (40, 65, 85),
}
GRADE_ORDER = ("A", "B", "C", "D")

AAMI_MAX_ABS_BIAS = 5.0
AAMI_MAX_SD = 8.0


# ---------------------------------------------------------------------------
# Error statistics
# ---------------------------------------------------------------------------


def _errors(e) -> np.ndarray:
    arr = np.asarray(e, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise MetricError("Error vector is empty")
    if not np.all(np.isfinite(arr)):
        raise MetricError("Error vector contains non-finite values")
    return arr


def mae(e) -> float:
    return float(np.mean(np.abs(_errors(e))))


def sd(e) -> float:
    """Population standard deviation (denominator n)."""
    return float(np.std(_errors(e)))


def bias(e) -> float:
    return float(np.mean(_errors(e)))


def r2(targets, predictions) -> float:
    """Coefficient of determination.

    Raises:
        MetricError: On empty or mismatched inputs.
        UndefinedR2Error: If the targets have zero variance.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if t.size == 0 or t.size != p.size:
        raise MetricError(f"r2 needs equal non-zero lengths, got {t.size} and {p.size}")
    total = float(np.sum((t - t.mean()) ** 2))
    if total == 0.0:
        raise UndefinedR2Error("R^2 is undefined when all targets are identical")
    return 1.0 - float(np.sum((t - p) ** 2)) / total


def cumulative_fractions(e) -> tuple[float, float, float]:
    """Fractions of |e| <= 5, 10, 15 mmHg."""
    abs_e = np.abs(_errors(e))
    return tuple(float(np.mean(abs_e <= t)) for t in THRESHOLDS_MMHG)


def grade_from_fractions(f5: float, f10: float, f15: float) -> str:
    eps = 1e-12
    for grade, pcts in BHS_TABLE.items():
        if all(f + eps >= p / 100.0 for f, p in zip((f5, f10, f15), pcts)):
            return grade
    return "D"


def bhs_grade(e) -> str:
    """BHS grade A-D; thresholds compared on integer counts, so boundaries are exact."""
    abs_e = np.abs(_errors(e))
    n = abs_e.size
    counts = [int(np.sum(abs_e <= t)) for t in THRESHOLDS_MMHG]
    for grade, pcts in BHS_TABLE.items():
        if all(100 * c >= p * n for c, p in zip(counts, pcts)):
            return grade
    return "D"


def aami_check(e) -> bool:
    """|bias| <= 5 mmHg (inclusive) and SD < 8 mmHg (strict)."""
    return abs(bias(e)) <= AAMI_MAX_ABS_BIAS and sd(e) < AAMI_MAX_SD


def worse_grade(*grades: str) -> str:
    return max(grades, key=GRADE_ORDER.index)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class TargetMetrics:
    mae: float
    sd: float
    bias: float
    r2: float
    within_5: float
    within_10: float
    within_15: float
    bhs_grade: str
    aami_pass: bool


def target_metrics(targets, predictions) -> TargetMetrics:
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    e = t - p
    f5, f10, f15 = cumulative_fractions(e)
    return TargetMetrics(
        mae=mae(e),
        sd=sd(e),
        bias=bias(e),
        r2=r2(t, p),
        within_5=f5,
        within_10=f10,
        within_15=f15,
        bhs_grade=bhs_grade(e),
        aami_pass=aami_check(e),
    )


@dataclass
class EvalReport:
    """Per-target metrics plus the tags that place a row in the results table."""

    sbp: TargetMetrics
    dbp: TargetMetrics
    segments: int
    dataset_tag: str = "synthetic"
    model_tag: str = "model"
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def summary(self) -> dict[str, Any]:
        """Worse BHS grade and the conjunction of AAMI verdicts over both targets."""
        return {
            "bhs_grade": worse_grade(self.sbp.bhs_grade, self.dbp.bhs_grade),
            "aami_pass": self.sbp.aami_pass and self.dbp.aami_pass,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset_tag": self.dataset_tag,
            "model_tag": self.model_tag,
            "segments": self.segments,
            "meta": dict(self.meta),
            "sbp": asdict(self.sbp),
            "dbp": asdict(self.dbp),
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        return format_table([self])

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        return cls(
            sbp=TargetMetrics(**d["sbp"]),
            dbp=TargetMetrics(**d["dbp"]),
            segments=d["segments"],
            dataset_tag=d.get("dataset_tag", "synthetic"),
            model_tag=d.get("model_tag", "model"),
            meta=d.get("meta", {}),
        )


def report_from_predictions(
    labels: np.ndarray,
    predictions: np.ndarray,
    dataset_tag: str = "synthetic",
    model_tag: str = "model",
    meta: Optional[dict[str, Any]] = None,
) -> EvalReport:
    """Build a report from [N, 2] labels and predictions in mmHg (columns SBP, DBP)."""
    labels = np.asarray(labels, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if labels.shape != predictions.shape or labels.ndim != 2 or labels.shape[1] != 2:
        raise MetricError(
            f"Expected matching [N, 2] arrays, got {labels.shape} and {predictions.shape}"
        )
    if labels.shape[0] == 0:
        raise MetricError("Cannot evaluate an empty test set")
    return EvalReport(
        sbp=target_metrics(labels[:, 0], predictions[:, 0]),
        dbp=target_metrics(labels[:, 1], predictions[:, 1]),
        segments=int(labels.shape[0]),
        dataset_tag=dataset_tag,
        model_tag=model_tag,
        meta=dict(meta or {}),
    )


def evaluate(
    model,
    test_ds: SegmentDataset,
    target_norm: Optional[TargetNorm] = None,
    model_tag: str = "model",
    meta: Optional[dict[str, Any]] = None,
) -> EvalReport:
    """Run a float or quantized model over ``test_ds`` and score it in mmHg."""
    norm = target_norm or model.target_norm
    preds = denormalize(predict(model, test_ds.signals), norm)
    return report_from_predictions(test_ds.labels, preds, test_ds.source_tag, model_tag, meta)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

TABLE_COLUMNS = (
    "Dataset",
    "Method",
    "Frozen?",
    "Epochs",
    "Size",
    "DBP SD",
    "DBP MAE",
    "DBP R²",
    "SBP SD",
    "SBP MAE",
    "SBP R²",
    "BHS",
    "AAMI",
)


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "Yes" if value else "No"
    return str(value)


def _row(report: EvalReport) -> list[str]:
    m = report.meta
    s = report.summary
    return [
        report.dataset_tag,
        _cell(m.get("method", report.model_tag)),
        _cell(m.get("frozen")),
        _cell(m.get("epochs")),
        _cell(m.get("size")),
        f"{report.dbp.sd:.2f}",
        f"{report.dbp.mae:.2f}",
        f"{report.dbp.r2:.3f}",
        f"{report.sbp.sd:.2f}",
        f"{report.sbp.mae:.2f}",
        f"{report.sbp.r2:.3f}",
        s["bhs_grade"],
        "Pass" if s["aami_pass"] else "Fail",
    ]


def _markdown(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(r) + " |" for r in rows)
    return "\n".join(lines) + "\n"


def format_table(reports: list[EvalReport]) -> str:
    """One markdown row per report."""
    return _markdown(list(TABLE_COLUMNS), [_row(r) for r in reports])


def format_comparison(reports: list[EvalReport], timings: Optional[dict[str, dict]] = None) -> str:
    """Side-by-side table; the first report is the baseline for the ΔR² columns.

    With ``timings`` (model tag -> latency stats in seconds) p50/p95 latency columns
    are appended.
    """
    base = reports[0]
    header = ["Model"] + list(TABLE_COLUMNS) + ["ΔR² DBP", "ΔR² SBP"]
    if timings:
        header += ["p50 ms", "p95 ms"]
    rows = []
    for r in reports:
        row = [r.model_tag] + _row(r) + [
            f"{r.dbp.r2 - base.dbp.r2:+.4f}",
            f"{r.sbp.r2 - base.sbp.r2:+.4f}",
        ]
        if timings:
            t = timings.get(r.model_tag, {})
            row += [f"{t.get('p50', 0.0) * 1000:.1f}", f"{t.get('p95', 0.0) * 1000:.1f}"]
        rows.append(row)
    return _markdown(header, rows)


# ---------------------------------------------------------------------------
# Latency statistics
# ---------------------------------------------------------------------------


def percentile(data: list[float], pct: float) -> float:
    """Nearest-rank percentile; 0.0 for empty input."""
    if not data:
        return 0.0
    sorted_data = sorted(data)
    k = max(0, min(int(len(sorted_data) * pct / 100.0 + 0.5) - 1, len(sorted_data) - 1))
    return sorted_data[k]


def compute_stats(values: list[float]) -> dict[str, float]:
    """min, max, mean, p50, p95, p99 and count of a list of measurements."""
    if not values:
        return {"min": 0.0, "max": 0.0, "mean": 0.0, "p50": 0.0, "p95": 0.0, "p99": 0.0, "count": 0}
    return {
        "min": min(values),
        "max": max(values),
        "mean": statistics.mean(values),
        "p50": percentile(values, 50),
        "p95": percentile(values, 95),
        "p99": percentile(values, 99),
        "count": len(values),
    }
