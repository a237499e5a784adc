import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsos.metrics import (
    UNKNOWN,
    MetricError,
    PredictionRecord,
    accuracy,
    aks,
    aks_one_vs_rest,
    auroc,
    aus,
    binary_f1,
    f1_open,
    normalized_accuracy,
    read_records_csv,
    records_from_arrays,
    write_records_csv,
)

# ---------------------------------------------------------------------------
# brute-force oracle twins


def auroc_oracle(records):
    """O(n^2) pair count: wins + half-ties over known x unknown pairs."""
    known = [r.score for r in records if r.true_label != UNKNOWN]
    unknown = [r.score for r in records if r.true_label == UNKNOWN]
    total = 0.0
    for ks in known:
        for us in unknown:
            if ks > us:
                total += 1.0
            elif ks == us:
                total += 0.5
    return total / (len(known) * len(unknown))


def f1_open_oracle(records):
    """Per-class confusion dictionaries, micro-averaged."""
    classes = sorted(
        {r.true_label for r in records if r.true_label != UNKNOWN}
        | {r.predicted_label for r in records if r.predicted_label != UNKNOWN}
    )
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    for r in records:
        for c in classes:
            if r.true_label == c and r.predicted_label == c:
                tp[c] += 1
            if r.predicted_label == c and r.true_label != c:
                fp[c] += 1
            if r.true_label == c and r.predicted_label != c:
                fn[c] += 1
    stp, sfp, sfn = sum(tp.values()), sum(fp.values()), sum(fn.values())
    if stp == 0:
        return 0.0
    prec = stp / (stp + sfp)
    rec = stp / (stp + sfn)
    return 2 * prec * rec / (prec + rec)


def aks_oracle(records):
    known = [r for r in records if r.true_label != UNKNOWN]
    return sum(1 for r in known if r.predicted_label == r.true_label) / len(known)


def random_records(seed):
    rng = np.random.default_rng((31337, seed))
    n_classes = int(rng.integers(1, 9))
    size = int(rng.integers(2, 201))
    classes = list(range(n_classes))
    true, pred, score = [], [], []
    has_known = has_unknown = False
    for i in range(size):
        t = UNKNOWN if rng.random() < 0.35 else int(rng.choice(classes))
        p = UNKNOWN if rng.random() < 0.3 else int(rng.choice(classes))
        # quantized scores force plenty of ties
        s = float(np.round(rng.normal(), 1))
        true.append(t)
        pred.append(p)
        score.append(s)
        has_known |= t != UNKNOWN
        has_unknown |= t == UNKNOWN
    if not has_known:
        true[0] = 0
    if not has_unknown:
        true[-1] = UNKNOWN
    return records_from_arrays(true, pred, score)


@pytest.mark.parametrize("seed", range(25))
def test_oracle_agreement_sampled(seed):
    records = random_records(seed)
    assert abs(auroc(records) - auroc_oracle(records)) <= 1e-12
    assert abs(f1_open(records) - f1_open_oracle(records)) <= 1e-12
    assert abs(aks(records) - aks_oracle(records)) <= 1e-12


# ---------------------------------------------------------------------------
# spot values


def test_accuracy_spot_values():
    assert accuracy([1, 0, 0], [1, 1, 0]) == pytest.approx(2 / 3)
    assert accuracy([2, 2], [2, 2]) == 1.0
    with pytest.raises(MetricError):
        accuracy([], [])


def test_binary_f1_spot_values():
    perfect = records_from_arrays([0, 0, UNKNOWN, UNKNOWN], [0, 0, UNKNOWN, UNKNOWN], [0] * 4)
    assert binary_f1(perfect) == 1.0
    none_pred = records_from_arrays([0, UNKNOWN], [UNKNOWN, UNKNOWN], [0, 0])
    assert binary_f1(none_pred) == 0.0
    # TP=2, FP=1, FN=1 -> P=R=2/3
    recs = records_from_arrays(
        [0, 0, UNKNOWN, 0], [0, 0, 0, UNKNOWN], [0] * 4
    )
    assert binary_f1(recs) == pytest.approx(2 / 3)


def test_auroc_spot_values():
    recs = records_from_arrays(
        [0, 0, UNKNOWN, UNKNOWN], [0, 0, UNKNOWN, UNKNOWN], [0.9, 0.5, 0.5, 0.1]
    )
    assert auroc(recs) == pytest.approx(0.875)
    separated = records_from_arrays([0, UNKNOWN], [0, UNKNOWN], [1.0, 0.0])
    assert auroc(separated) == 1.0
    ties = records_from_arrays([0, 0, UNKNOWN], [0, 0, UNKNOWN], [0.5] * 3)
    assert auroc(ties) == 0.5
    with pytest.raises(MetricError):
        auroc(records_from_arrays([0, 1], [0, 1], [0.5, 0.5]))


def test_auroc_role_swap_sums_to_one():
    for seed in range(10):
        recs = random_records(seed)
        swapped = [
            PredictionRecord(UNKNOWN if r.true_label != UNKNOWN else 0,
                             r.predicted_label, r.score)
            for r in recs
        ]
        assert abs(auroc(recs) + auroc(swapped) - 1.0) < 1e-12


def test_aks_spot_values():
    recs = records_from_arrays(
        [1, 2, 2, 2, 3], [1, 1, UNKNOWN, 2, 3], np.zeros(5)
    )
    assert aks(recs) == pytest.approx(3 / 5)
    all_unknown = records_from_arrays([1, 2], [UNKNOWN, UNKNOWN], [0, 0])
    assert aks(all_unknown) == 0.0
    perfect = records_from_arrays([1, 2], [1, 2], [0, 0])
    assert aks(perfect) == 1.0


def test_aks_one_vs_rest_values():
    perfect = records_from_arrays([0, 1], [0, 1], [0, 0])
    assert aks_one_vs_rest(perfect) == 1.0
    # 3-class consistent permutation: plain accuracy 0, one-vs-rest form counts TNs
    perm = records_from_arrays([0, 1, 2], [1, 2, 0], [0, 0, 0])
    assert aks(perm) == 0.0
    assert aks_one_vs_rest(perm) == pytest.approx(3 / 9)
    single = records_from_arrays([4, 4, 4], [4, UNKNOWN, 4], [0, 0, 0])
    assert aks_one_vs_rest(single) == pytest.approx(accuracy([4, 4, 4], [4, UNKNOWN, 4]))


def test_aus_spot_values():
    recs = records_from_arrays(
        [UNKNOWN, UNKNOWN, UNKNOWN], [UNKNOWN, 2, UNKNOWN], [0, 0, 0]
    )
    assert aus(recs) == pytest.approx(2 / 3)
    assert aus(records_from_arrays([UNKNOWN], [3], [0])) == 0.0
    assert aus(records_from_arrays([UNKNOWN], [UNKNOWN], [0])) == 1.0
    with pytest.raises(MetricError):
        aus(records_from_arrays([0], [0], [0]))


def test_normalized_accuracy_formula():
    assert abs(normalized_accuracy(0.6, 2 / 3, 0.5) - 0.6333333333333333) < 1e-9
    assert normalized_accuracy(0.7, 0.7) == pytest.approx(0.7)
    with pytest.raises(MetricError):
        normalized_accuracy(0.5, 0.5, 1.5)


def test_f1_open_spot_values():
    # two known classes plus unknowns: TP=3, FP=2, FN=2
    true = [0, 0, 1, 1, 1, UNKNOWN, UNKNOWN]
    pred = [0, 1, 1, 1, UNKNOWN, 0, UNKNOWN]
    recs = records_from_arrays(true, pred, np.zeros(7))
    assert f1_open(recs) == pytest.approx(0.6)
    perfect = records_from_arrays([0, 1, UNKNOWN], [0, 1, UNKNOWN], np.zeros(3))
    assert f1_open(perfect) == 1.0
    rejected = records_from_arrays([0, UNKNOWN], [UNKNOWN, UNKNOWN], np.zeros(2))
    assert f1_open(rejected) == 0.0


@given(st.integers(min_value=0, max_value=10**6))
@settings(max_examples=60, deadline=None)
def test_class_relabeling_invariance(seed):
    records = random_records(seed % 40)
    rng = np.random.default_rng(seed)
    classes = sorted(
        {r.true_label for r in records if r.true_label != UNKNOWN}
        | {r.predicted_label for r in records if r.predicted_label != UNKNOWN}
    )
    perm = {c: int(p) for c, p in zip(classes, rng.permutation(len(classes)))}
    perm[UNKNOWN] = UNKNOWN
    relabeled = [
        PredictionRecord(perm[r.true_label], perm[r.predicted_label], r.score)
        for r in records
    ]
    for fn in (aks, aks_one_vs_rest, aus, f1_open, binary_f1, auroc):
        assert fn(records) == pytest.approx(fn(relabeled), abs=1e-12)


def test_metric_ranges_and_na_betweenness():
    for seed in range(15):
        records = random_records(seed)
        a, u = aks(records), aus(records)
        na = normalized_accuracy(a, u)
        for v in (a, u, na, f1_open(records), auroc(records), binary_f1(records)):
            assert 0.0 <= v <= 1.0
        assert min(a, u) - 1e-12 <= na <= max(a, u) + 1e-12


def test_records_csv_round_trip(tmp_path):
    records = random_records(3)
    path = tmp_path / "records.csv"
    write_records_csv(path, records)
    back = read_records_csv(path)
    assert back == records
    path2 = tmp_path / "records_ep.csv"
    write_records_csv(path2, records, episode_ids=[7] * len(records))
    assert read_records_csv(path2) == records
    with open(path2) as fh:
        header = fh.readline().strip()
    assert header == "episode_id,true_label,predicted_label,score"
