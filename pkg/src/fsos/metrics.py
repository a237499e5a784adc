"""Scalar metrics for one-class and open-set evaluation.

Records carry a true label, a final predicted label (after any known/unknown
gating), and a real-valued known-ness score used for ranking. UNKNOWN is a
distinguished marker; class ids are non-negative integers.

Conventions: precision/recall/F1 are 0 whenever their denominator is 0, and
AUROC counts tied pairs as half (rank-based Mann-Whitney form).
"""

import csv
from dataclasses import dataclass

import numpy as np

UNKNOWN = -1


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    true_label: int
    predicted_label: int
    score: float


def records_from_arrays(true_labels, predicted_labels, scores):
    return [
        PredictionRecord(int(t), int(p), float(s))
        for t, p, s in zip(true_labels, predicted_labels, scores)
    ]


def _arrays(records):
    """Records -> (true, pred, score) arrays; a pre-built triple passes through."""
    if isinstance(records, tuple) and len(records) == 3:
        t, p, s = records
        return (
            np.asarray(t, dtype=np.int64),
            np.asarray(p, dtype=np.int64),
            np.asarray(s, dtype=np.float64),
        )
    t = np.array([r.true_label for r in records], dtype=np.int64)
    p = np.array([r.predicted_label for r in records], dtype=np.int64)
    s = np.array([r.score for r in records], dtype=np.float64)
    return t, p, s


def accuracy(true_labels, predicted_labels):
    """Fraction of correct labels over known-truth closed-set predictions."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.size == 0:
        raise MetricError("accuracy of an empty record set is undefined")
    if t.shape != p.shape:
        raise MetricError(f"{t.size} truths vs {p.size} predictions")
    return float(np.mean(t == p))


def binary_f1(records):
    """F1 of the known/unknown decision with known as the positive class."""
    t, p, _ = _arrays(records)
    if t.size == 0:
        raise MetricError("binary_f1 of an empty record set is undefined")
    pred_known = p != UNKNOWN
    true_known = t != UNKNOWN
    tp = int(np.sum(pred_known & true_known))
    fp = int(np.sum(pred_known & ~true_known))
    fn = int(np.sum(~pred_known & true_known))
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2.0 * prec * rec / (prec + rec)


def auroc(records):
    """Probability a random known-truth record outscores a random
    unknown-truth record, ties counted half. Computed from average ranks."""
    t, _, s = _arrays(records)
    known = t != UNKNOWN
    ks, us = s[known], s[~known]
    if ks.size == 0 or us.size == 0:
        raise MetricError("auroc needs at least one known and one unknown record")
    pooled = np.concatenate([ks, us])
    _, inverse, counts = np.unique(pooled, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = (upper - counts + 1 + upper) / 2.0
    rank_sum_known = float(avg_rank[inverse[: ks.size]].sum())
    nk, nu = ks.size, us.size
    return (rank_sum_known - nk * (nk + 1) / 2.0) / (nk * nu)


def aks(records):
    """Accuracy on known samples: gated-UNKNOWN predictions count as wrong."""
    t, p, _ = _arrays(records)
    known = t != UNKNOWN
    if not known.any():
        raise MetricError("aks needs at least one known-truth record")
    return float(np.mean(t[known] == p[known]))


def aks_one_vs_rest(records):
    """One-vs-rest (TP+TN) / (TP+TN+FP+FN) summed over known classes.

    The per-class true negatives dominate for larger class counts, which is
    why this variant is reported for comparison only.
    """
    t, p, _ = _arrays(records)
    known = t != UNKNOWN
    if not known.any():
        raise MetricError("aks_one_vs_rest needs at least one known-truth record")
    tk, pk = t[known], p[known]
    classes = sorted(set(tk.tolist()) | (set(pk.tolist()) - {UNKNOWN}))
    total = 0
    for c in classes:
        tp = int(np.sum((tk == c) & (pk == c)))
        tn = int(np.sum((tk != c) & (pk != c)))
        total += tp + tn
    return total / (len(classes) * tk.size)


def aus(records):
    """Accuracy on unknown samples: fraction of unknown-truth records
    predicted UNKNOWN."""
    t, p, _ = _arrays(records)
    unknown = t == UNKNOWN
    if not unknown.any():
        raise MetricError("aus needs at least one unknown-truth record")
    return float(np.mean(p[unknown] == UNKNOWN))


def normalized_accuracy(aks_value, aus_value, weight=0.5):
    """weight * AKS + (1 - weight) * AUS."""
    if not 0.0 <= weight <= 1.0:
        raise MetricError(f"weight must be in [0, 1], got {weight}")
    return weight * aks_value + (1.0 - weight) * aus_value


def f1_open(records):
    """Micro-averaged open-set F1 over the known classes.

    Per class c: TP = known-truth c labeled c; FP = anything else labeled c
    (unknown-truth records included); FN = known-truth c labeled anything
    else, UNKNOWN included. Unknown-truth records therefore only ever count
    as false positives of the class they were labeled with.
    """
    t, p, _ = _arrays(records)
    if t.size == 0:
        raise MetricError("f1_open of an empty record set is undefined")
    known = t != UNKNOWN
    tp = int(np.sum(known & (t == p)))
    fp = int(np.sum((p != UNKNOWN) & (p != t)))
    fn = int(np.sum(known & (p != t)))
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2.0 * prec * rec / (prec + rec)


# ---------------------------------------------------------------------------
# record CSV round trip

RECORD_HEADER = ["true_label", "predicted_label", "score"]


def write_records_csv(path, records, episode_ids=None):
    """Write records; with episode_ids an extra leading column tags each row."""
    recs = list(records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if episode_ids is None:
            writer.writerow(RECORD_HEADER)
            for r in recs:
                writer.writerow([r.true_label, r.predicted_label, repr(r.score)])
        else:
            writer.writerow(["episode_id"] + RECORD_HEADER)
            for e, r in zip(episode_ids, recs):
                writer.writerow([e, r.true_label, r.predicted_label, repr(r.score)])


def read_records_csv(path):
    """Read a record CSV (with or without the episode_id column)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MetricError(f"{path}: empty record file")
        if header == RECORD_HEADER:
            offset = 0
        elif header == ["episode_id"] + RECORD_HEADER:
            offset = 1
        else:
            raise MetricError(f"{path}: unexpected header {header}")
        records = []
        for row in reader:
            records.append(
                PredictionRecord(int(row[offset]), int(row[offset + 1]), float(row[offset + 2]))
            )
    return records
