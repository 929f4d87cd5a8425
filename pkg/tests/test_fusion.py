import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from specfed.fusion import (ConstraintViolation, CostModel, SlotTerm, check_allocation, collision_indicator, costs,
                            ee_objective, fuse, fusion_trace, utility, write_fusion_trace)
from specfed.report import fusion_gain, fusion_table, write_fusion_csv

bits = st.integers(0, 1)


def fuse_oracle(preds, n):
    K, M = preds.shape
    return np.array([0 if sum(preds[k, m] == 0 for k in range(K)) >= n else 1 for m in range(M)])


# ---------------------------------------------------------------------------
# fusion rule
# ---------------------------------------------------------------------------
def test_fuse_examples():
    col = np.array([[0], [0], [1]])
    assert fuse(col, 2).tolist() == [0]
    assert fuse(col, 3).tolist() == [1]
    assert fuse(col, 1).tolist() == [0]


def test_fuse_extremes_are_and_or():
    rng = np.random.default_rng(0)
    p = rng.integers(0, 2, (3, 16))
    assert np.array_equal(fuse(p, 1), np.bitwise_and.reduce(p, axis=0))
    assert np.array_equal(fuse(p, 3), np.bitwise_or.reduce(p, axis=0))


def test_fuse_exhaustive_K3():
    cols = np.array(list(itertools.product([0, 1], repeat=3))).T  # 3 x 8, every column pattern
    for n in (1, 2, 3):
        assert np.array_equal(fuse(cols, n), fuse_oracle(cols, n))


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 16)), elements=bits), st.data())
def test_fuse_matches_oracle_and_monotone(p, data):
    K = p.shape[0]
    n = data.draw(st.integers(1, K))
    z = fuse(p, n)
    assert np.array_equal(z, fuse_oracle(p, n))
    if n < K:
        # the vacant set can only shrink as n grows
        assert np.all(fuse(p, n + 1) >= z)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.integers(1, 16), elements=bits), st.integers(1, 5))
def test_unanimous_votes_pass_through(v, K):
    p = np.tile(v, (K, 1))
    for n in range(1, K + 1):
        assert np.array_equal(fuse(p, n), v)


def test_fuse_batch_and_errors():
    p = np.random.default_rng(1).integers(0, 2, (7, 3, 5))
    assert np.array_equal(fuse(p, 2), np.stack([fuse(x, 2) for x in p]))
    with pytest.raises(ValueError):
        fuse(p[0], 0)
    with pytest.raises(ValueError):
        fuse(p[0], 4)
    with pytest.raises(ValueError):
        fuse(np.array([0, 1]), 1)


# ---------------------------------------------------------------------------
# collisions, utility, costs
# ---------------------------------------------------------------------------
def test_collision_cases():
    assert collision_indicator([0, 1, 0, 1], [0, 0, 1, 1]).tolist() == [1, -1, 0, 0]
    with pytest.raises(ValueError):
        collision_indicator([0, 1], [0])


def test_utility_examples():
    assert utility(1.0, 1.0, 0.0) == 0.0
    assert utility(1.0, 1.0, 1.0) == 1.0
    assert utility(1e-3, 625e3, 3.0) == pytest.approx(1250.0)
    assert utility(1e-3, 625e3, np.array([0.0, 3.0])).tolist() == pytest.approx([0.0, 1250.0])
    with pytest.raises(ValueError):
        utility(1.0, 1.0, -0.5)


def test_cost_examples():
    sc, ac = costs(CostModel(t_s=1e-3, V_CC=1.0, W_m=625e3, t_a=1e-3, P_tx=0.2))
    assert sc == pytest.approx(625.0) and ac == pytest.approx(2e-4)
    assert costs(CostModel(t_s=0.0))[0] == 0.0
    with pytest.raises(ValueError):
        CostModel(P_tx=0.0)
    assert CostModel().slot_duration == pytest.approx(4e-3)


# ---------------------------------------------------------------------------
# allocation constraints and EE
# ---------------------------------------------------------------------------
def test_allocation_constraints():
    z = np.array([0, 0, 1, 1])
    check_allocation(np.array([[1, 0, 0, 0], [0, 1, 0, 0]]), z)
    with pytest.raises(ConstraintViolation, match="more than one"):
        check_allocation(np.array([[1, 1, 0, 0], [0, 0, 0, 0]]), z)
    with pytest.raises(ConstraintViolation, match="shared"):
        check_allocation(np.array([[1, 0, 0, 0], [1, 0, 0, 0]]), z)
    with pytest.raises(ConstraintViolation, match="hole"):
        check_allocation(np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]]), np.array([0, 1, 1, 1]))


def test_overbooking_rejected_random():
    rng = np.random.default_rng(2)
    for _ in range(200):
        M = int(rng.integers(2, 10))
        z = rng.integers(0, 2, M)
        v = int(M - z.sum())
        if v >= M:
            continue
        K = v + 1
        y = np.zeros((K, M), dtype=int)
        for k, m in enumerate(rng.permutation(M)[:K]):
            y[k, m] = 1
        with pytest.raises(ConstraintViolation):
            check_allocation(y, z)


def test_ee_examples():
    z = np.array([0, 1])
    assert ee_objective([]) == 0.0
    y = np.array([[1, 0]])
    one = SlotTerm(y=y, c=np.array([1, 0]), U=np.array([[1250.0, 0.0]]), SC=625.0, AC=2e-4, z=z)
    assert ee_objective([one]) == pytest.approx(1250 / 625.0002, rel=1e-15)
    bad = SlotTerm(y=y, c=np.array([-1, 0]), U=np.array([[1250.0, 0.0]]), SC=625.0, AC=2e-4, z=z)
    assert ee_objective([bad]) == pytest.approx(-ee_objective([one]), rel=1e-15)
    with pytest.raises(ConstraintViolation):
        ee_objective([SlotTerm(y=np.array([[1, 1]]), c=0, U=1.0, SC=1.0, AC=1.0, z=np.zeros(2))])


def test_ee_matches_term_by_term_oracle():
    rng = np.random.default_rng(3)
    K, M = 2, 5
    history = []
    for _ in range(20):
        z = rng.integers(0, 2, M)
        vac = np.flatnonzero(z == 0)
        y = np.zeros((K, M), dtype=int)
        for k, m in enumerate(rng.permutation(vac)[:K]):
            y[k, m] = 1
        history.append(SlotTerm(y=y, c=rng.integers(-1, 2, M), U=rng.uniform(0, 2000, (K, M)),
                                SC=rng.uniform(0.1, 1000), AC=rng.uniform(1e-5, 1e-3), z=z))
    oracle = 0.0
    for h in history:
        for k in range(K):
            for m in range(M):
                oracle += h.y[k, m] * h.c[m] * h.U[k, m] / (h.y[k, m] * h.AC + h.SC)
    assert ee_objective(history) == pytest.approx(oracle, rel=1e-12)


# ---------------------------------------------------------------------------
# traces and tables
# ---------------------------------------------------------------------------
def test_fusion_trace_and_csv(tmp_path):
    preds = np.array([[[0, 1], [0, 1], [1, 1]], [[0, 0], [0, 0], [0, 0]]])
    truth = np.array([[0, 1], [1, 0]])
    frames = fusion_trace(preds, truth, 2)
    assert frames[0].c.tolist() == [0, 0]
    assert frames[1].z.tolist() == [0, 0]
    assert frames[1].c.tolist() == collision_indicator(truth[1], frames[0].z).tolist() == [-1, 0]
    write_fusion_trace(tmp_path / "f.csv", frames)
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0] == ["t", "channel", "votes_vacant", "z", "z_true", "c"]
    assert rows[1] == ["0", "0", "2", "0", "0", "0"] and len(rows) == 5


def test_fusion_table_and_gain(tmp_path):
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    good = labels.copy()
    noisy = 1 - labels
    preds = np.stack([good, good, noisy], axis=1)  # majority recovers the truth
    snr = np.array([0.0, 0.0, 10.0, 10.0])
    rows = fusion_table(preds, labels, snr, 2, [0.0, 10.0], regime="FL")
    fused = [r for r in rows if r["source"] == "fused"]
    assert [r["f1"] for r in fused] == [1.0, 1.0]
    gains = fusion_gain(rows)
    worst = {s: min(r["f1"] for r in rows if r["snr_db"] == s and r["source"] != "fused") for s in (0.0, 10.0)}
    assert gains == {s: 1.0 - worst[s] for s in (0.0, 10.0)}
    write_fusion_csv(tmp_path / "t.csv", rows)
    back = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(back) == 8 and back[0]["source"] == "uav1"
