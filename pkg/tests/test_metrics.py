import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import binary_dilation, generate_binary_structure

from valveseg.data import PhantomConfig, generate_phantom
from valveseg.metrics import (
    UndefinedMetricError,
    boundary,
    compare_reports,
    conformity,
    dice,
    evaluate_sequence,
    hd95,
    phase_tags,
    summarize,
    write_reports,
)


def brute_hd95(A, B, spacing=1.0):
    """All-pairs boundary distances with the same integer-offset arithmetic, then the pooled percentile."""
    pa, pb = np.argwhere(boundary(A)), np.argwhere(boundary(B))
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    ab = np.sqrt(d2.min(1).astype(np.float64)) * spacing
    ba = np.sqrt(d2.min(0).astype(np.float64)) * spacing
    return float(np.percentile(np.concatenate([ab, ba]), 95))


def random_pair(rng, shape):
    A = rng.random(shape) < rng.uniform(0.2, 0.6)
    B = rng.random(shape) < rng.uniform(0.2, 0.6)
    return A, B


def cube(n, size, off):
    m = np.zeros((n, n, n), bool)
    m[off:off + size, off:off + size, off:off + size] = True
    return m


# --------------------------------------------------------------------------- dice


def test_dice_hand_cases():
    A = cube(6, 2, 1)
    assert dice(A, A) == 1.0
    assert dice(A, cube(6, 2, 4)) == 0.0
    B = np.roll(A, 1, axis=0)  # |A|=|B|=8, overlap 4
    assert int((A & B).sum()) == 4
    assert dice(A, B) == 0.5


def test_dice_empty_conventions():
    z = np.zeros((3, 3, 3), bool)
    assert dice(z, z) == 1.0
    assert dice(z, cube(3, 1, 1)) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# --------------------------------------------------------------------------- hd95


def test_hd95_identical():
    A = cube(8, 3, 2)
    assert hd95(A, A) == 0.0


def test_hd95_parallel_plates():
    A = np.zeros((8, 8, 8), bool)
    B = np.zeros((8, 8, 8), bool)
    A[:, :, 2] = True
    B[:, :, 5] = True
    assert brute_hd95(A, B) == 3.0
    assert hd95(A, B) == 3.0
    assert hd95(A, B, spacing=0.5) == 1.5


def test_hd95_empty_is_undefined():
    with pytest.raises(UndefinedMetricError):
        hd95(np.zeros((4, 4, 4), bool), cube(4, 2, 1))


@pytest.mark.parametrize("seed", range(10))
def test_hd95_matches_all_pairs_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(4, 13, size=3))
    A, B = random_pair(rng, shape)
    assert hd95(A, B) == brute_hd95(A, B)
    assert hd95(A, B, 0.7) == brute_hd95(A, B, 0.7)


def test_hd95_symmetric():
    rng = np.random.default_rng(3)
    A, B = random_pair(rng, (9, 10, 11))
    assert hd95(A, B) == hd95(B, A)
    assert dice(A, B) == dice(B, A)


def test_boundary_of_solid_cube_is_its_shell():
    A = cube(7, 5, 1)
    assert boundary(A).sum() == 5 ** 3 - 3 ** 3


# --------------------------------------------------------------------------- conformity


def test_conformity_cases():
    A = cube(6, 2, 1)
    assert conformity(A, A) == 1.0
    pred = np.zeros(9, bool)
    ref = np.zeros(9, bool)
    pred[:4] = ref[:4] = True  # TP = 4
    pred[4:7] = True  # FP = 3
    ref[7:9] = True  # FN = 2
    assert conformity(pred, ref) == -0.25


def test_conformity_zero_at_two_thirds_dice():
    pred = np.zeros(12, bool)
    ref = np.zeros(12, bool)
    pred[:3] = ref[:3] = True
    pred[3:6] = True  # TP=3, FP=3 -> dice 6/9
    assert dice(pred, ref) == pytest.approx(2 / 3)
    assert conformity(pred, ref) == 0.0


def test_conformity_without_tp():
    with pytest.raises(UndefinedMetricError):
        conformity(cube(6, 2, 0), cube(6, 2, 3))


def test_conformity_identity_random_pairs():
    rng = np.random.default_rng(11)
    dev = 0.0
    for _ in range(100):
        A, B = random_pair(rng, (6, 6, 6))
        d = dice(A, B)
        dev = max(dev, abs(conformity(A, B) - (3 * d - 2) / d))
    assert dev < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_conformity_upper_bound(seed):
    A, B = random_pair(np.random.default_rng(seed), (5, 5, 5))
    if (A & B).any():
        assert conformity(A, B) <= 1.0
        assert 0 <= dice(A, B) <= 1


@pytest.mark.parametrize("size", [3, 4, 5])
def test_dilation_degrades(size):
    ref = cube(12, size, 3)
    grown = binary_dilation(ref, generate_binary_structure(3, 1))
    assert dice(grown, ref) <= dice(ref, ref)
    assert hd95(grown, ref) >= hd95(ref, ref)


# --------------------------------------------------------------------------- reports


@pytest.fixture(scope="module")
def sequence():
    return generate_phantom(PhantomConfig(grid_size=16, n_phases=8, n_patients=1, seed=0))[0]


def test_phase_tags(sequence):
    tags = phase_tags(sequence)
    assert tags[0] == "ES" and tags[7] == "ED"
    md = [t for t, v in tags.items() if v == "MD"]
    assert len(md) == 1
    gt = sequence.ground_truth
    overlaps = {t: dice(gt[t], gt[0]) for t in sequence.unlabeled_indices}
    assert overlaps[md[0]] == min(overlaps.values())
    assert tags[md[0] + 1] == "MD-1"


def test_perfect_predictions(sequence):
    preds = [m.astype(np.float32) for m in sequence.ground_truth]
    rep = evaluate_sequence(preds, sequence)
    assert len(rep.rows) == 8
    for r in rep.rows:
        assert (r.dice, r.hd95, r.conformity) == (100.0, 0.0, 100.0)


def test_aggregate_is_arithmetic_mean(sequence):
    rng = np.random.default_rng(0)
    preds = [np.clip(m + rng.normal(0, 0.4, m.shape), 0, 1) for m in sequence.ground_truth]
    rep = evaluate_sequence(preds, sequence)
    agg = rep.aggregate("all")
    assert abs(agg["dice"] - np.mean([r.dice for r in rep.rows])) < 1e-9
    hds = [r.hd95 for r in rep.rows if r.hd95 is not None]
    assert abs(agg["hd95"] - np.mean(hds)) < 1e-9
    unl = rep.aggregate("unlabeled")
    assert abs(unl["dice"] - np.mean([r.dice for r in rep.rows if r.phase_index not in (0, 7)])) < 1e-9


def test_missing_ground_truth_reported_as_gap(sequence):
    from valveseg.data import PatientSequence

    clinical = PatientSequence(sequence.patient_id, sequence.phases, sequence.labeled_indices)
    rep = evaluate_sequence([p.intensities for p in clinical.phases], clinical)
    assert [r.phase_index for r in rep.rows] == [0, 7]
    assert rep.gaps == [1, 2, 3, 4, 5, 6]


def test_empty_prediction_reports_missing(sequence):
    preds = [np.zeros(sequence.shape) for _ in range(8)]
    rep = evaluate_sequence(preds, sequence)
    assert all(r.hd95 is None and r.conformity is None and r.dice == 0.0 for r in rep.rows)
    assert rep.aggregate("all")["hd95"] is None


def test_write_and_compare_reports(tmp_path, sequence):
    perfect = [m.astype(np.float32) for m in sequence.ground_truth]
    shifted = [np.roll(m, 1, axis=2).astype(np.float32) for m in sequence.ground_truth]
    a = write_reports([evaluate_sequence(perfect, sequence)], tmp_path / "a")
    b = write_reports([evaluate_sequence(shifted, sequence)], tmp_path / "b")
    csv_text = (tmp_path / "a" / "report.csv").read_text()
    assert "All Phases" in csv_text
    assert json.loads((tmp_path / "a" / "report.json").read_text())["summary"]["All Phases"]["dice"] == 100.0
    rows = compare_reports(a, b)
    all_dice = [r for r in rows if r[0] == "All Phases" and r[1] == "dice"][0]
    assert all_dice[2] == 100.0
    assert all_dice[4] == pytest.approx(all_dice[3] - 100.0)
    assert all_dice[4] < 0


def test_summarize_over_patients(sequence):
    preds = [m.astype(np.float32) for m in sequence.ground_truth]
    s = summarize([evaluate_sequence(preds, sequence)] * 2)
    assert s["MD"]["dice"] == 100.0 and s["Key Phases"]["hd95"] == 0.0
