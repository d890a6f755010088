"""Scoring a screening model the way the clinic reads it: per-patient
rates, image rates, ROC/AUC, and patch-vote aggregation — on a small
hand-built set of predictions where every number can be checked mentally.

Run from the repository root:  python3 demos/05_evaluation_metrics.py
"""

import numpy as np

from irrcnn import evaluation as ev


def record(sample, true, p_malignant, patient="", parent=None):
    return ev.PredictionRecord(
        sample=sample, parent=parent or sample, patient=patient,
        true_label=true, predicted_label=int(p_malignant >= 0.5),
        probabilities=np.array([1.0 - p_malignant, p_malignant]),
    )


def main():
    # three patients: 2/2 correct, 3/5 correct, 0/1 correct
    records = [record(f"a{i}.png", 1, 0.9, "patient-A") for i in range(2)]
    records += [record(f"b{i}.png", 1, p, "patient-B")
                for i, p in enumerate([0.8, 0.7, 0.6, 0.2, 0.1])]
    records += [record("c0.png", 0, 0.9, "patient-C")]

    print("patient table:")
    for row in ev.patient_table(records):
        print(f"  {row.patient_id:10s} {row.correct}/{row.total}  score {row.score:.2f}")
    scores = [r.score for r in ev.patient_table(records)]
    print(f"patient-level rate: {ev.global_patient_rate(scores):.4f} "
          f"(mean of the three scores)")
    print(f"image-level rate:   {ev.image_level_rate(records):.4f} "
          f"(5 of 8 images)")
    print()

    # a balanced set for the threshold metrics: one miss on each side
    balanced = [record(f"m{i}", 1, p) for i, p in enumerate([0.9, 0.8, 0.7, 0.4])]
    balanced += [record(f"b{i}", 0, p) for i, p in enumerate([0.6, 0.3, 0.2, 0.1])]
    conf, acc, sens, spec = ev.confusion_and_rates(balanced, 2)
    print("balanced 4+4 set, one false negative (0.4) and one false positive (0.6):")
    print(f"confusion (rows true, cols predicted):\n{conf}")
    print(f"accuracy {acc:.3f}, sensitivity {sens:.3f}, specificity {spec:.3f}")
    print()

    auc, points = ev.roc_auc([r.probabilities[1] for r in balanced],
                             [r.true_label for r in balanced])
    print(f"AUC {auc:.4f} (15 of 16 positive/negative pairs ranked correctly);")
    print(f"ROC sweep ({len(points)} thresholds):")
    for threshold, fpr, tpr in points:
        print(f"  t >= {threshold:>6}: fpr {fpr:.2f} tpr {tpr:.2f}")
    print()

    # ------------------------------------------------------------------
    # patch votes: plurality can disagree with mean confidence
    # ------------------------------------------------------------------
    # three timid benign votes ...
    patches = []
    for j in range(3):
        patches.append(ev.PredictionRecord(
            f"slide__p{j:03d}", "slide", "", 0, 0,
            np.array([0.5625, 0.4375])))
    # ... against two confident malignant votes
    for j in (3, 4):
        patches.append(ev.PredictionRecord(
            f"slide__p{j:03d}", "slide", "", 0, 1,
            np.array([0.125, 0.875])))

    (vote,) = ev.wta_aggregate(patches)
    (mean,) = ev.mean_aggregate(patches)
    print("five patches of one slide, 3 benign votes vs 2 confident malignant:")
    print(f"  winner-take-all label: {vote.predicted_label} (plurality of votes)")
    print(f"  mean-probability label: {mean.predicted_label} "
          f"(mean p_malignant {mean.probabilities[1]:.3f})")
    print("  -> vote-based and confidence-based reads can disagree; pick the")
    print("     aggregation deliberately and report which one was used")


if __name__ == "__main__":
    main()
