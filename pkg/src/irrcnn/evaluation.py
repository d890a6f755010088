"""Recognition-rate metrics, ROC/AUC, Winner-Take-All aggregation of patch
predictions, and full evaluation reports.

Two rates anchor everything: the image-level rate (correct / total over
all samples, ignoring patients) and the patient-level rate (mean over
patients of each patient's own correct / total). AUC is the Mann-Whitney
rank statistic with half credit for ties, which equals the pairwise
probability P(score+ > score-) + 0.5 * P(equal) exactly.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, restore_model
from .data import (Manifest, atomic_write_bytes, load_image, normalize_images,
                   parent_image_id, resize)
from .errors import ConfigError, DataError
from .tensor import Tensor, no_grad

PREDICTIONS_HEADER_PREFIX = ("sample", "parent", "patient", "true", "pred")
ROC_HEADER = ("threshold", "fpr", "tpr")
PATIENT_HEADER = ("patient", "total", "correct", "score")
PROB_SUM_TOLERANCE = 1e-6

AGGREGATIONS = ("none", "wta", "mean")
LEVELS = ("image", "patient")


@dataclass
class PredictionRecord:
    """One classified sample: a raw model output or an aggregated image
    decision. For raw outputs the predicted label must be the argmax of
    the probability vector; aggregated records set `aggregated=True`
    because a vote can legitimately disagree with the mean-probability
    argmax."""

    sample: str
    parent: str
    patient: str
    true_label: int
    predicted_label: int
    probabilities: np.ndarray
    aggregated: bool = False

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.probabilities.ndim != 1:
            raise DataError(f"{self.sample}: probability vector must be 1-D")
        total = float(self.probabilities.sum())
        if abs(total - 1.0) > PROB_SUM_TOLERANCE:
            raise DataError(f"{self.sample}: probabilities sum to {total}, expected 1")
        k = len(self.probabilities)
        if not 0 <= self.true_label < k:
            raise DataError(f"{self.sample}: true label {self.true_label} out of range for {k} classes")
        if not 0 <= self.predicted_label < k:
            raise DataError(f"{self.sample}: predicted label {self.predicted_label} out of range")
        if not self.aggregated and self.predicted_label != int(np.argmax(self.probabilities)):
            raise DataError(
                f"{self.sample}: predicted label {self.predicted_label} is not the "
                f"argmax of the probability vector"
            )

    @property
    def correct(self) -> bool:
        return self.true_label == self.predicted_label


@dataclass
class PatientRow:
    patient_id: str
    total: int
    correct: int
    score: float


@dataclass
class EvalReport:
    confusion: np.ndarray
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    roc_points: List[Tuple[float, float, float]]  # (threshold, fpr, tpr)
    patient_table: List[PatientRow]
    patient_rate: float
    image_rate: float
    metadata: Dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------


def patient_score(correct: int, total: int) -> float:
    """Fraction of a patient's images classified correctly."""
    if total < 1:
        raise DataError(f"patient has no images (total={total})")
    if not 0 <= correct <= total:
        raise DataError(f"correct={correct} outside [0, {total}]")
    return correct / total


def global_patient_rate(scores: Sequence[float]) -> float:
    """Mean of per-patient scores."""
    if not len(scores):
        raise DataError("no patient scores to average")
    return float(np.mean(scores))


def image_level_rate(records: Sequence[PredictionRecord]) -> float:
    """Fraction of records classified correctly, ignoring patient structure."""
    if not len(records):
        raise DataError("no records")
    return sum(r.correct for r in records) / len(records)


def patient_table(records: Sequence[PredictionRecord]) -> List[PatientRow]:
    """Group records by patient and score each group.

    Records with an empty patient id are grouped by their parent image
    instead, so anonymous datasets still get a well-defined table (one
    pseudo-patient per source image).
    """
    groups: Dict[str, List[PredictionRecord]] = {}
    for rec in records:
        key = rec.patient if rec.patient else f"\x00{rec.parent}"
        groups.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        correct = sum(r.correct for r in recs)
        label = key[1:] if key.startswith("\x00") else key
        rows.append(PatientRow(label, len(recs), correct, patient_score(correct, len(recs))))
    return rows


# ---------------------------------------------------------------------------
# confusion matrix and derived rates
# ---------------------------------------------------------------------------


def confusion_matrix(records: Sequence[PredictionRecord], num_classes: int) -> np.ndarray:
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for rec in records:
        conf[rec.true_label, rec.predicted_label] += 1
    return conf


def _binary_rates(conf: np.ndarray, positive: int) -> Tuple[float, float]:
    tp = conf[positive, positive]
    fn = conf[positive].sum() - tp
    col = conf[:, positive].sum()
    fp = col - tp
    tn = conf.sum() - tp - fn - fp
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return float(sens), float(spec)


def confusion_and_rates(records: Sequence[PredictionRecord], num_classes: int,
                        positive_class: Optional[int] = None):
    """Confusion matrix plus accuracy / sensitivity / specificity.

    With `positive_class` set (or two classes, where it defaults to 1),
    sensitivity and specificity are the usual binary rates. Otherwise
    they are macro averages of the one-vs-rest rates; classes absent from
    the truth are excluded from the mean with a warning.
    """
    if not len(records):
        raise DataError("no records")
    conf = confusion_matrix(records, num_classes)
    accuracy = float(np.trace(conf) / conf.sum())

    if positive_class is None and num_classes == 2:
        positive_class = 1
    if positive_class is not None:
        if not 0 <= positive_class < num_classes:
            raise ConfigError(f"positive_class {positive_class} out of range")
        sens, spec = _binary_rates(conf, positive_class)
        return conf, accuracy, sens, spec

    sens_parts, spec_parts = [], []
    for c in range(num_classes):
        if conf[c].sum() == 0:
            warnings.warn(f"class {c} absent from truth; excluded from macro rates")
            continue
        s, p = _binary_rates(conf, c)
        sens_parts.append(s)
        spec_parts.append(p)
    if not sens_parts:
        raise DataError("every class is absent from the truth labels")
    return conf, accuracy, float(np.mean(sens_parts)), float(np.mean(spec_parts))


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


def roc_auc(scores, labels) -> Tuple[float, List[Tuple[float, float, float]]]:
    """Binary AUC and ROC points from positive-class scores.

    AUC is the Mann-Whitney statistic: ranks over the pooled scores with
    average ranks on ties, so tied positive/negative pairs contribute half
    credit. ROC points sweep every distinct score as a threshold
    (predict positive when score >= threshold), descending, bracketed by
    (0,0) at +inf and (1,1) at -inf; each point is (threshold, fpr, tpr).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    pos = labels == 1
    neg = labels == 0
    if not (pos | neg).all():
        raise DataError("labels must be 0 or 1")
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative label")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1, dtype=np.float64)
    # average ranks across ties
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    auc = u / (n_pos * n_neg)

    points = [(float("inf"), 0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        flagged = scores >= t
        points.append((float(t),
                       float((flagged & neg).sum() / n_neg),
                       float((flagged & pos).sum() / n_pos)))
    points.append((float("-inf"), 1.0, 1.0))
    return float(auc), points


def macro_auc(probabilities: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[int, float]]:
    """One-vs-rest AUC per class, macro-averaged. Classes without both a
    positive and a negative example are excluded with a warning."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    per_class: Dict[int, float] = {}
    for c in range(probabilities.shape[1]):
        binary = (labels == c).astype(np.int64)
        if binary.all() or not binary.any():
            warnings.warn(f"class {c} lacks positives or negatives; excluded from macro AUC")
            continue
        per_class[c], _ = roc_auc(probabilities[:, c], binary)
    if not per_class:
        raise DataError("no class has both positive and negative examples")
    return float(np.mean(list(per_class.values()))), per_class


# ---------------------------------------------------------------------------
# patch -> image aggregation
# ---------------------------------------------------------------------------


def _group_by_parent(records: Sequence[PredictionRecord]) -> Dict[str, List[PredictionRecord]]:
    if not len(records):
        raise DataError("no records to aggregate")
    groups: Dict[str, List[PredictionRecord]] = {}
    for rec in records:
        if not rec.parent:
            raise DataError(f"{rec.sample}: record has no parent image id")
        groups.setdefault(rec.parent, []).append(rec)
    return groups


def _merged_record(parent: str, recs: List[PredictionRecord], label: int) -> PredictionRecord:
    truths = {r.true_label for r in recs}
    if len(truths) > 1:
        raise DataError(f"{parent}: patches disagree on the true label {sorted(truths)}")
    return PredictionRecord(
        sample=parent,
        parent=parent,
        patient=recs[0].patient,
        true_label=recs[0].true_label,
        predicted_label=label,
        probabilities=np.mean([r.probabilities for r in recs], axis=0),
        aggregated=True,
    )


def wta_aggregate(records: Sequence[PredictionRecord]) -> List[PredictionRecord]:
    """Winner-take-all: each image's label is the plurality vote over its
    patches' predicted labels; its probability vector is the mean of the
    patch vectors. Vote ties go to the class with the higher summed
    probability, then to the lower class index."""
    out = []
    groups = _group_by_parent(records)
    for parent in sorted(groups):
        recs = groups[parent]
        votes = Counter(r.predicted_label for r in recs)
        top = max(votes.values())
        tied = sorted(c for c, n in votes.items() if n == top)
        if len(tied) > 1:
            summed = np.sum([r.probabilities for r in recs], axis=0)
            best = max(summed[c] for c in tied)
            tied = [c for c in tied if summed[c] == best]
        out.append(_merged_record(parent, recs, tied[0]))
    return out


def mean_aggregate(records: Sequence[PredictionRecord]) -> List[PredictionRecord]:
    """Average the patch probability vectors per image and take the argmax."""
    out = []
    groups = _group_by_parent(records)
    for parent in sorted(groups):
        recs = groups[parent]
        mean = np.mean([r.probabilities for r in recs], axis=0)
        out.append(_merged_record(parent, recs, int(np.argmax(mean))))
    return out


# ---------------------------------------------------------------------------
# end-to-end evaluation
# ---------------------------------------------------------------------------


def predict_records(model, manifest: Manifest, stats: Dict,
                    split: str = "test", magnification: Optional[str] = None,
                    batch_size: int = 32) -> List[PredictionRecord]:
    """Run eval-mode inference over a manifest subset and wrap each sample
    in a PredictionRecord, sorted by sample path."""
    records = manifest.subset(split=split, magnification=magnification)
    if not records:
        raise DataError(
            f"manifest has no records in split {split!r}"
            + (f" at magnification {magnification}" if magnification else "")
        )
    size = int(stats["input_size"])
    vocab = list(stats.get("vocabulary", manifest.vocabulary))
    if list(manifest.vocabulary) != vocab:
        raise ConfigError(
            f"manifest vocabulary {tuple(manifest.vocabulary)} does not match "
            f"the checkpoint's {tuple(vocab)}"
        )
    label_index = {c: i for i, c in enumerate(vocab)}
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)

    out: List[PredictionRecord] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = [resize(load_image(rec.path), size) for rec in chunk]
        x = normalize_images(images, mean, std)
        with no_grad():
            probs = model.forward(Tensor(x), mode="eval").data
        for rec, p in zip(chunk, probs):
            out.append(PredictionRecord(
                sample=rec.path,
                parent=parent_image_id(rec.path),
                patient=rec.patient_id,
                true_label=label_index[rec.class_label],
                predicted_label=int(np.argmax(p)),
                probabilities=p,
            ))
    out.sort(key=lambda r: r.sample)
    return out


def metrics_from_records(records: Sequence[PredictionRecord], num_classes: int,
                         metadata: Optional[Dict] = None) -> EvalReport:
    """Compute the full report from prediction records."""
    records = sorted(records, key=lambda r: r.sample)
    conf, accuracy, sens, spec = confusion_and_rates(records, num_classes)
    probs = np.stack([r.probabilities for r in records])
    labels = np.asarray([r.true_label for r in records])
    meta = dict(metadata or {})
    try:
        if num_classes == 2:
            auc, roc_points = roc_auc(probs[:, 1], (labels == 1).astype(np.int64))
        else:
            auc, per_class = macro_auc(probs, labels)
            roc_points = []
            meta["per_class_auc"] = {str(c): v for c, v in per_class.items()}
    except DataError as exc:
        # e.g. a single-class subset: AUC is undefined but the rest of the
        # report still stands
        warnings.warn(f"AUC unavailable: {exc}")
        auc, roc_points = float("nan"), []
    table = patient_table(records)
    report = EvalReport(
        confusion=conf,
        accuracy=accuracy,
        sensitivity=sens,
        specificity=spec,
        auc=auc,
        roc_points=roc_points,
        patient_table=table,
        patient_rate=global_patient_rate([row.score for row in table]),
        image_rate=image_level_rate(records),
        metadata=meta,
    )
    return report


def evaluate(checkpoint: Checkpoint, manifest: Manifest, level: str = "image",
             aggregation: str = "none", magnification: Optional[str] = None,
             split: str = "test", stats: Optional[Dict] = None,
             batch_size: int = 32) -> Tuple[EvalReport, List[PredictionRecord]]:
    """Restore the checkpointed model, classify the manifest subset, apply
    the requested patch aggregation, and compute every metric.

    `level` selects the headline rate recorded in the metadata (the
    patient-level mean-of-patient-scores or the flat image-level rate);
    the report always carries both. `stats` (normalization mean/std,
    input size, vocabulary) defaults to the pipeline block echoed in the
    checkpoint and must be supplied when the checkpoint was trained from
    raw arrays.
    """
    if level not in LEVELS:
        raise ConfigError(f"level must be one of {LEVELS}, got {level!r}")
    if aggregation not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    if stats is None:
        stats = checkpoint.config.get("pipeline")
    if not stats:
        raise ConfigError(
            "checkpoint carries no pipeline statistics (mean/std/input size); "
            "pass stats= explicitly"
        )
    model, _ = restore_model(checkpoint)
    num_classes = model.config.num_classes
    vocab = stats.get("vocabulary")
    if vocab is not None and len(vocab) != num_classes:
        raise ConfigError(
            f"checkpoint vocabulary has {len(vocab)} classes but the model emits {num_classes}"
        )

    records = predict_records(model, manifest, stats, split=split,
                              magnification=magnification, batch_size=batch_size)
    sample_count = len(records)
    if aggregation == "wta":
        records = wta_aggregate(records)
    elif aggregation == "mean":
        records = mean_aggregate(records)

    meta = {
        "level": level,
        "aggregation": aggregation,
        "split": split,
        "magnification": magnification,
        "sample_count": sample_count,
        "record_count": len(records),
        "vocabulary": list(vocab) if vocab is not None else list(manifest.vocabulary),
        "checkpoint_epoch": checkpoint.epoch,
    }
    report = metrics_from_records(records, num_classes, meta)
    report.metadata["headline_rate"] = (
        report.patient_rate if level == "patient" else report.image_rate
    )
    return report, records


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode("utf-8")


def write_predictions_csv(path, records: Sequence[PredictionRecord]) -> None:
    """Columns: sample,parent,patient,true,pred,p_0..p_{K-1}."""
    if not len(records):
        raise DataError("no records to write")
    k = len(records[0].probabilities)
    header = list(PREDICTIONS_HEADER_PREFIX) + [f"p_{i}" for i in range(k)]
    rows = [
        [r.sample, r.parent, r.patient, r.true_label, r.predicted_label,
         *[repr(float(p)) for p in r.probabilities]]
        for r in records
    ]
    atomic_write_bytes(path, _csv_bytes(header, rows))


def write_roc_csv(path, points: Sequence[Tuple[float, float, float]]) -> None:
    atomic_write_bytes(path, _csv_bytes(ROC_HEADER, points))


def write_patient_csv(path, table: Sequence[PatientRow]) -> None:
    rows = [[row.patient_id, row.total, row.correct, row.score] for row in table]
    atomic_write_bytes(path, _csv_bytes(PATIENT_HEADER, rows))


def report_to_dict(report: EvalReport) -> Dict:
    return {
        "confusion": report.confusion.tolist(),
        "accuracy": report.accuracy,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "auc": report.auc,
        "patient_rate": report.patient_rate,
        "image_rate": report.image_rate,
        "roc_points": [list(p) for p in report.roc_points],
        "patients": [
            {"patient": row.patient_id, "total": row.total,
             "correct": row.correct, "score": row.score}
            for row in report.patient_table
        ],
        "metadata": report.metadata,
    }


def write_report(out_dir, report: EvalReport,
                 records: Optional[Sequence[PredictionRecord]] = None) -> None:
    """Write report.json plus the CSV side tables (summary row, patient
    scores, ROC points when present, and per-sample predictions)."""
    out_dir = Path(out_dir)
    payload = json.dumps(report_to_dict(report), indent=2, sort_keys=True)
    atomic_write_bytes(out_dir / "report.json", payload.encode("utf-8"))
    summary_header = ("magnification", "level", "aggregation", "sensitivity",
                      "specificity", "accuracy", "auc", "patient_rate", "image_rate")
    meta = report.metadata
    summary_row = [meta.get("magnification") or "all", meta.get("level", ""),
                   meta.get("aggregation", ""), report.sensitivity, report.specificity,
                   report.accuracy, report.auc, report.patient_rate, report.image_rate]
    atomic_write_bytes(out_dir / "summary.csv", _csv_bytes(summary_header, [summary_row]))
    write_patient_csv(out_dir / "patients.csv", report.patient_table)
    if report.roc_points:
        write_roc_csv(out_dir / "roc.csv", report.roc_points)
    if records is not None:
        write_predictions_csv(out_dir / "predictions.csv", records)
