"""Multi-label evaluation: label-based mean accuracy plus the four
example-based metrics, with per-attribute reporting and report comparison.

Conventions for degenerate cases:
  - a sample with empty true and predicted sets counts 1 toward accuracy;
  - a sample with no predicted positives counts 1 toward precision iff it
    also has no true positives, else 0 (and symmetrically for recall);
  - an attribute with no positives or no negatives in the labels is excluded
    from mean accuracy and listed in the report's ``excluded`` notes.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

AGGREGATE_METRICS = ("mA", "accuracy", "precision", "recall", "f1")


@dataclass
class AttributeStats:
    name: str
    tpr: float | None
    tnr: float | None
    f1: float
    support: int

    def balanced_accuracy(self):
        if self.tpr is None or self.tnr is None:
            return None
        return (self.tpr + self.tnr) / 2


@dataclass
class MetricsReport:
    mA: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_attribute: list[AttributeStats]
    threshold: float
    sample_count: int
    excluded: list[str] = field(default_factory=list)

    @property
    def names(self):
        return [a.name for a in self.per_attribute]

    def aggregate(self, metric: str) -> float:
        return getattr(self, "mA" if metric == "mA" else metric)

    def to_dict(self):
        return {
            "mA": self.mA,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "threshold": self.threshold,
            "sample_count": self.sample_count,
            "excluded_from_mA": list(self.excluded),
            "per_attribute": [
                {"name": a.name, "tpr": a.tpr, "tnr": a.tnr, "f1": a.f1,
                 "support": a.support}
                for a in self.per_attribute
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(
            mA=d["mA"], accuracy=d["accuracy"], precision=d["precision"],
            recall=d["recall"], f1=d["f1"],
            per_attribute=[AttributeStats(**a) for a in d["per_attribute"]],
            threshold=d["threshold"], sample_count=d["sample_count"],
            excluded=list(d["excluded_from_mA"]),
        )


def evaluate(predictions, labels, names, threshold=0.5) -> MetricsReport:
    """Binarize ``predictions`` (N x A probabilities) at ``threshold`` and
    score them against binary ``labels`` (N x A)."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape or predictions.ndim != 2:
        raise ValueError(
            f"shape mismatch: predictions {predictions.shape} labels {labels.shape}")
    if predictions.shape[1] != len(names):
        raise ValueError(f"{predictions.shape[1]} columns but {len(names)} names")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be strictly 0/1")

    n, _ = labels.shape
    pred = (predictions > threshold).astype(np.float64)
    pos = labels == 1.0
    hit = pred == labels

    # label-based, per attribute
    tp = (hit & pos).sum(axis=0)
    tn = (hit & ~pos).sum(axis=0)
    p_count = pos.sum(axis=0)
    n_count = n - p_count
    per_attribute = []
    included = []
    excluded = []
    for i, name in enumerate(names):
        tpr = tp[i] / p_count[i] if p_count[i] > 0 else None
        tnr = tn[i] / n_count[i] if n_count[i] > 0 else None
        fp = n_count[i] - tn[i] if n_count[i] > 0 else 0.0
        fn = p_count[i] - tp[i] if p_count[i] > 0 else 0.0
        denom = 2 * tp[i] + fp + fn
        attr_f1 = 2 * tp[i] / denom if denom > 0 else 0.0
        per_attribute.append(
            AttributeStats(name, tpr, tnr, float(attr_f1), int(p_count[i])))
        if tpr is None or tnr is None:
            excluded.append(name)
        else:
            included.append((tpr + tnr) / 2)
    ma = float(np.mean(included)) if included else 0.0

    # example-based, per sample
    inter = (pred * labels).sum(axis=1)
    union = np.maximum(pred, labels).sum(axis=1)
    pred_size = pred.sum(axis=1)
    true_size = labels.sum(axis=1)
    acc = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    prec = np.where(pred_size > 0,
                    inter / np.where(pred_size > 0, pred_size, 1.0),
                    (true_size == 0).astype(np.float64))
    rec = np.where(true_size > 0,
                   inter / np.where(true_size > 0, true_size, 1.0),
                   (pred_size == 0).astype(np.float64))
    accuracy = float(acc.mean())
    precision = float(prec.mean())
    recall = float(rec.mean())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    return MetricsReport(
        mA=ma, accuracy=accuracy, precision=precision, recall=recall, f1=f1,
        per_attribute=per_attribute, threshold=threshold, sample_count=n,
        excluded=excluded,
    )


def psnr(image, reference) -> float:
    """Peak signal-to-noise ratio in dB for images scaled to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class DeltaRow:
    name: str
    a: float | None
    b: float | None
    delta: float | None


def compare(report_a: MetricsReport, report_b: MetricsReport) -> list[DeltaRow]:
    """Signed per-metric and per-attribute deltas (b - a). Attribute rows use
    the per-attribute balanced accuracy, the attribute's contribution to mA."""
    if report_a.names != report_b.names:
        raise ValueError("reports cover different attribute schemas")
    if report_a.threshold != report_b.threshold:
        raise ValueError("reports use different thresholds")
    rows = []
    for metric in AGGREGATE_METRICS:
        va, vb = report_a.aggregate(metric), report_b.aggregate(metric)
        rows.append(DeltaRow(metric, va, vb, vb - va))
    for sa, sb in zip(report_a.per_attribute, report_b.per_attribute):
        ba, bb = sa.balanced_accuracy(), sb.balanced_accuracy()
        delta = bb - ba if ba is not None and bb is not None else None
        rows.append(DeltaRow(sa.name, ba, bb, delta))
    return rows


def delta_table_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["name", "a", "b", "delta"])
    for r in rows:
        writer.writerow([r.name,
                         "" if r.a is None else repr(r.a),
                         "" if r.b is None else repr(r.b),
                         "" if r.delta is None else repr(r.delta)])
    return out.getvalue()
