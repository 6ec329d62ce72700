"""Overlap measures (DSC, sensitivity, specificity) and their aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

MEASURES = ("dsc", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class CaseMetrics:
    """One case; a measure is ``None`` when its denominator is zero."""

    dsc: float | None
    sensitivity: float | None
    specificity: float | None
    counts: ConfusionCounts | None = None
    id: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "dsc": self.dsc, "sensitivity": self.sensitivity, "specificity": self.specificity}
        if self.counts is not None:
            d["counts"] = asdict(self.counts)
        return d


@dataclass
class Aggregate:
    mean: float | None
    std: float | None
    count: int
    excluded: int

    @property
    def available(self) -> bool:
        return self.mean is not None

    def format(self, digits: int = 3) -> str:
        if not self.available:
            return "n/a"
        return f"{self.mean:.{digits}f}±{self.std:.{digits}f}"


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def compute_metrics(c: ConfusionCounts, case_id: str | None = None) -> CaseMetrics:
    dsc_den = 2 * c.tp + c.fn + c.fp
    dsc = 2 * c.tp / dsc_den if dsc_den else 1.0  # both masks empty
    sens = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    return CaseMetrics(dsc, sens, spec, c, case_id)


def aggregate(cases: list[CaseMetrics]) -> dict[str, Aggregate]:
    """Mean and population standard deviation per measure over defined values."""
    out = {}
    for m in MEASURES:
        values = [getattr(c, m) for c in cases if getattr(c, m) is not None]
        excluded = len(cases) - len(values)
        if not values:
            out[m] = Aggregate(None, None, 0, excluded)
            continue
        arr = np.asarray(values, dtype=np.float64)
        out[m] = Aggregate(float(arr.mean()), float(arr.std()), len(values), excluded)
    return out


def report(tasks: dict[str, list[CaseMetrics]]) -> dict:
    """JSON-compatible report: per-case entries and aggregates for every task."""
    doc = {}
    for task, cases in tasks.items():
        agg = aggregate(cases)
        doc[task] = {
            "cases": [c.to_dict() for c in cases],
            "aggregate": {
                m: {"mean": a.mean, "std": a.std, "count": a.count, "excluded": a.excluded}
                for m, a in agg.items()
            },
        }
    return doc


def summary_table(tasks: dict[str, list[CaseMetrics]], digits: int = 3) -> str:
    """Tab-separated Task/DSC/Sensitivity/Specificity rows in mean±std form."""
    lines = ["Task\tDSC\tSensitivity\tSpecificity"]
    for task, cases in tasks.items():
        agg = aggregate(cases)
        lines.append("\t".join([task.capitalize()] + [agg[m].format(digits) for m in MEASURES]))
    return "\n".join(lines) + "\n"

