import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oddkit.errors import ConfigurationError, ValidationError
from oddkit.evaluation import (REFERENCE_AUC, EvalDataset, aggregate, build_eval_set, compare_models,
                               format_table, roc_auc, threshold_sweep, write_roc_csv, write_table_csv)
from oddkit.models import ArchitectureDescriptor, build
from oddkit.scoring import report_from_errors
from oddkit.synthetic import ELLIPSE, shape_patches


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def enumerate_sweep(scores, labels):
    best = None
    for g in sorted(set(scores)):
        tp = sum(1 for s, y in zip(scores, labels) if s > g and y)
        tn = sum(1 for s, y in zip(scores, labels) if s <= g and not y)
        bal = 0.5 * (tp / sum(labels) + tn / (len(labels) - sum(labels)))
        if best is None or bal > best[1]:
            best = (g, bal)
    return best


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]).auc == 0.5
    with pytest.raises(ValidationError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 200), st.booleans())
def test_auc_matches_pairwise_oracle(seed, n, coarse):
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, int)
    labels[rng.choice(n, rng.integers(1, n), replace=False)] = 1
    scores = rng.integers(0, 5, n).astype(float) if coarse else rng.random(n)
    roc = roc_auc(scores, labels)
    assert abs(roc.auc - pairwise_auc(scores, labels)) < 1e-12
    assert abs(roc.trapezoid_area() - roc.auc) < 1e-12
    assert abs(roc_auc(-scores, labels).auc - (1 - roc.auc)) < 1e-12
    assert abs(roc_auc(np.exp(scores), labels).auc - roc.auc) < 1e-12
    assert roc.fpr[0] == roc.tpr[0] == 0 and roc.fpr[-1] == roc.tpr[-1] == 1
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)


def test_sweep_examples():
    rep = report_from_errors(list("abcd"), [0.0, 1.0, 9.0, 10.0])
    gamma, rows = threshold_sweep(rep, [0, 0, 1, 1])
    assert gamma == pytest.approx(1 / 10) and max(r.balanced_accuracy for r in rows) == 1.0
    rep = report_from_errors(list("abcd"), [3.0] * 4)
    _, rows = threshold_sweep(rep, {"a": 0, "b": 1, "c": 0, "d": 1})
    assert [r.balanced_accuracy for r in rows] == [0.5]
    with pytest.raises(ValidationError):
        threshold_sweep(rep, [0, 1])
    with pytest.raises(ValidationError):
        threshold_sweep(rep, {"a": 0})


def test_sweep_hand_case_matches_enumeration():
    rng = np.random.default_rng(11)
    raw = rng.integers(0, 8, 20).astype(float)
    labels = [int(v) for v in rng.random(20) < 0.4]
    rep = report_from_errors([f"s{i:02d}" for i in range(20)], raw)
    gamma, rows = threshold_sweep(rep, labels)
    g, bal = enumerate_sweep(list(rep.scores()), labels)
    assert gamma == g
    assert max(r.balanced_accuracy for r in rows) == pytest.approx(bal, abs=1e-15)


def patches_for_eval():
    ps = shape_patches(8, 4, 16, seed=5)
    for p in ps:
        p.label = "unlabeled"
    return ps


def test_build_eval_set():
    ps = patches_for_eval()
    ev = build_eval_set(ps, [ELLIPSE], budget=6, seed=1)
    assert len(ev.samples) == 6 and ev.anomaly_ratio == pytest.approx(2 / 6)
    assert list(ev.labels) == [0, 0, 0, 0, 1, 1]
    assert [p.patch_id for p in build_eval_set(ps, [ELLIPSE], 6, seed=1).samples] == [p.patch_id for p in ev.samples]
    two = [ps[0], ps[-1]]
    assert len(build_eval_set(two, [ELLIPSE], 2).samples) == 2
    with pytest.raises(ValidationError):
        build_eval_set(ps[:8], [ELLIPSE], 4)
    with pytest.raises(ValidationError):
        EvalDataset(frozenset({1}), frozenset({1, 2}), [], 0)


def test_compare_models_and_tables(tmp_path):
    ev = build_eval_set(patches_for_eval(), [ELLIPSE], budget=12, seed=0)
    cae = build(ArchitectureDescriptor("CAE", patch_size=16), 1)
    mem = build(ArchitectureDescriptor("MemCAE", patch_size=16, memory_slots=10), 1)
    rows = compare_models([cae, mem, cae], ev, names=["c", "m", "c2"])
    assert [r.model_id for r in rows] == ["c", "m", "c2"]
    assert rows[0].auc == rows[2].auc and rows[0].report.samples == rows[2].report.samples
    assert rows[0].auc == roc_auc(rows[0].report.raw(), ev.labels).auc
    table = format_table(rows, REFERENCE_AUC)
    assert "60.94" in table and len(table.splitlines()) == 5
    assert write_table_csv(rows, tmp_path / "t.csv").read_text().splitlines()[0].startswith("model_id,kind,auc")
    assert write_roc_csv(rows[1].roc, tmp_path / "r.csv").read_text().startswith("fpr,tpr\n0.0,0.0\n")
    agg = {a.kind: a for a in aggregate([rows, rows])}
    assert agg["CAE"].runs == 4 and agg["MemCAE"].mean_auc == rows[1].auc
    with pytest.raises(ConfigurationError):
        compare_models([build(ArchitectureDescriptor("CAE", patch_size=32), 0)], ev)


def test_reference_values():
    assert REFERENCE_AUC == {"AE": 57.49, "CAE": 58.89, "CVAE": 57.18, "MemCAE": 60.94}
