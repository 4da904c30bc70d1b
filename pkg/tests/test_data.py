import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from valveseg.data import (
    ConfigError,
    FormatError,
    PatientSequence,
    PhantomConfig,
    PhaseVolume,
    generate_phantom,
    load_sequence,
    resample,
    sample_triplet,
    save_dataset,
    save_sequence,
    volume_drift,
)


@pytest.fixture(scope="module")
def phantom16():
    return generate_phantom(PhantomConfig(grid_size=16, n_phases=8, n_patients=2, seed=0))


def _toy_sequence(n=9, labeled=(0, 4), shape=(4, 4, 4)):
    phases = []
    for t in range(n):
        lab = np.zeros(shape, np.uint8) if t in labeled else None
        phases.append(PhaseVolume(np.full(shape, t / n, np.float32), 1.0, t, lab))
    return PatientSequence("toy", phases, labeled)


# --------------------------------------------------------------------------- types


def test_phase_volume_invariants():
    img = np.zeros((4, 4, 4), np.float32)
    with pytest.raises(ValueError):
        PhaseVolume(img, 0.0, 0)
    with pytest.raises(ValueError):
        PhaseVolume(img, 1.0, 0, np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(ValueError):
        PhaseVolume(img, 1.0, 0, np.full((4, 4, 4), 2, np.uint8))
    assert PhaseVolume(img, 1.0, 0, np.zeros((4, 4, 4), np.uint8)).is_labeled
    assert not PhaseVolume(img, 1.0, 0).is_labeled


def test_sequence_invariants():
    with pytest.raises(ValueError, match="at least 3"):
        _toy_sequence(n=2, labeled=(0, 1))
    seq = _toy_sequence()
    with pytest.raises(ValueError, match="is_labeled"):
        PatientSequence("bad", seq.phases, (0, 5))
    with pytest.raises(ValueError, match="distinct"):
        PatientSequence("bad", seq.phases, (0, 0))


# --------------------------------------------------------------------------- phantom


def test_phantom_basic_shape(phantom16):
    seq = phantom16[0]
    assert seq.n_phases == 8
    assert seq.shape == (16, 16, 16)
    # voxel-count oracle: every ground-truth mask is nonempty
    counts = [int(m.sum()) for m in seq.ground_truth]
    assert min(counts) > 0
    assert seq.labeled_indices == (0, 7)
    for t, p in enumerate(seq.phases):
        assert p.is_labeled == (t in (0, 7))
        assert p.intensities.dtype == np.float32
        assert 0 <= p.intensities.min() and p.intensities.max() <= 1


def test_phantom_deforms(phantom16):
    gt = phantom16[0].ground_truth
    overlap = [2 * (gt[0] & gt[t]).sum() / (gt[0].sum() + gt[t].sum()) for t in range(8)]
    # bending changes the shape substantially mid-cycle
    assert min(overlap) < 0.6


def test_phantom_zero_noise_is_blurred_mask():
    cfg = PhantomConfig(grid_size=16, n_phases=4, n_patients=1, seed=3, noise_level=0.0)
    seq = generate_phantom(cfg)[0]
    for p, m in zip(seq.phases, seq.ground_truth):
        expected = np.clip(gaussian_filter(m.astype(np.float64), cfg.blur_sigma), 0, 1).astype(np.float32)
        np.testing.assert_array_equal(p.intensities, expected)


@pytest.mark.parametrize("tol", [0.05, 0.01])
def test_phantom_volume_conservation(tol):
    seqs = generate_phantom(PhantomConfig(grid_size=16, n_patients=3, seed=1, target_volume_tolerance=tol))
    for s in seqs:
        v = np.array([m.sum() for m in s.ground_truth], float)
        assert np.max(np.abs(v - v[0]) / v[0]) <= tol
        assert volume_drift(s.ground_truth) <= tol


def test_phantom_deterministic():
    cfg = PhantomConfig(grid_size=16, n_patients=2, seed=5)
    a, b = generate_phantom(cfg), generate_phantom(cfg)
    for sa, sb in zip(a, b):
        for pa, pb in zip(sa.phases, sb.phases):
            np.testing.assert_array_equal(pa.intensities, pb.intensities)


@pytest.mark.parametrize(
    "kwargs",
    [dict(grid_size=4), dict(n_phases=2), dict(deformation_amplitude=0.5), dict(target_volume_tolerance=0.3),
     dict(target_volume_tolerance=0.0), dict(n_patients=0)],
)
def test_phantom_config_errors(kwargs):
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(**kwargs))


def test_phantom_grid32_thickness():
    seq = generate_phantom(PhantomConfig(grid_size=32, n_patients=1, seed=0))[0]
    assert seq.shape == (32, 32, 32)
    assert seq.spacing == pytest.approx(1.0)


# --------------------------------------------------------------------------- resample


def _trilinear_oracle(img, out_shape):
    """Direct eight-corner trilinear formula at each target voxel centre."""
    n = np.array(img.shape)
    out = np.zeros(out_shape)
    for idx in np.ndindex(*out_shape):
        src = np.clip((np.array(idx) + 0.5) * n / np.array(out_shape) - 0.5, 0, n - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        f = src - lo
        acc = 0.0
        for corner in np.ndindex(2, 2, 2):
            pos = tuple(hi[a] if c else lo[a] for a, c in enumerate(corner))
            w = np.prod([f[a] if c else 1 - f[a] for a, c in enumerate(corner)])
            acc += w * img[pos]
        out[idx] = acc
    return out


def test_resample_identity(phantom16):
    p = phantom16[0].phases[0]
    r = resample(p, (16, 16, 16))
    np.testing.assert_array_equal(r.intensities, p.intensities)
    np.testing.assert_array_equal(r.label, p.label)
    assert r.spacing == p.spacing


@pytest.mark.parametrize("shape", [(8, 8, 8), (12, 12, 12), (32, 32, 32), (5, 5, 5)])
def test_resample_constant(shape):
    v = PhaseVolume(np.full((16, 16, 16), 0.7, np.float32), 2.0, 0)
    r = resample(v, shape)
    assert r.shape == shape
    assert np.all(r.intensities == np.float32(0.7))
    assert r.spacing * shape[0] == pytest.approx(32.0)


def test_resample_checkerboard_matches_oracle():
    cb = (np.indices((4, 4, 4)).sum(0) % 2).astype(np.float64)
    v = PhaseVolume(cb, 1.0, 0)
    r = resample(v, (8, 8, 8))
    np.testing.assert_allclose(r.intensities, _trilinear_oracle(cb, (8, 8, 8)), atol=1e-6)
    assert r.spacing == 0.5


def test_resample_label_nearest():
    lab = np.zeros((4, 4, 4), np.uint8)
    lab[1:3, 1:3, 1:3] = 1
    v = PhaseVolume(np.zeros((4, 4, 4), np.float32), 1.0, 0, lab)
    r = resample(v, (8, 8, 8))
    assert set(np.unique(r.label)) == {0, 1}
    assert r.label.sum() == 8 * lab.sum()


def test_resample_errors():
    v = PhaseVolume(np.zeros((4, 4, 4), np.float32), 1.0, 0)
    with pytest.raises(ValueError):
        resample(v, (1, 4, 4))
    with pytest.raises(ValueError, match="anisotropic"):
        resample(v, (8, 4, 4))


# --------------------------------------------------------------------------- triplets


def test_triplet_membership():
    seq = _toy_sequence()
    rng = np.random.default_rng(0)
    for _ in range(200):
        tr = sample_triplet(seq, rng)
        assert tr.labeled.phase_index in (0, 4)
        u = {tr.unlabeled_1.phase_index, tr.unlabeled_2.phase_index}
        assert len(u) == 2 and u <= {1, 2, 3, 5, 6, 7, 8}
        assert tr.patient_id == "toy"


def test_triplet_two_unlabeled_forced():
    seq = _toy_sequence(n=4, labeled=(0, 3))
    rng = np.random.default_rng(1)
    for _ in range(20):
        tr = sample_triplet(seq, rng)
        assert (tr.unlabeled_1.phase_index, tr.unlabeled_2.phase_index) == (1, 2)


def test_triplet_needs_two_unlabeled():
    seq = _toy_sequence(n=3, labeled=(0, 2))
    with pytest.raises(ValueError, match="unlabeled"):
        sample_triplet(seq, np.random.default_rng(0))


def test_triplet_deterministic():
    seq = _toy_sequence()
    a = sample_triplet(seq, np.random.default_rng(42))
    b = sample_triplet(seq, np.random.default_rng(42))
    assert [p.phase_index for p in (a.labeled, *a.unlabeled)] == [p.phase_index for p in (b.labeled, *b.unlabeled)]


def test_triplet_labeled_marginals():
    seq = _toy_sequence()
    rng = np.random.default_rng(7)
    picks = np.array([sample_triplet(seq, rng).labeled.phase_index for _ in range(10_000)])
    for t in (0, 4):
        assert abs(np.mean(picks == t) - 0.5) <= 0.05


# --------------------------------------------------------------------------- disk format


def test_roundtrip(tmp_path, phantom16):
    seq = phantom16[1]
    save_sequence(seq, tmp_path / "p")
    back = load_sequence(tmp_path / "p", with_ground_truth=True)
    assert back.patient_id == seq.patient_id
    assert back.labeled_indices == seq.labeled_indices
    assert back.spacing == seq.spacing
    for a, b in zip(seq.phases, back.phases):
        np.testing.assert_array_equal(a.intensities, b.intensities)
        assert a.is_labeled == b.is_labeled
        if a.is_labeled:
            np.testing.assert_array_equal(a.label, b.label)
    for a, b in zip(seq.ground_truth, back.ground_truth):
        np.testing.assert_array_equal(a, b)


def test_training_load_reads_only_anchor_labels(tmp_path, phantom16):
    save_sequence(phantom16[0], tmp_path / "p")
    seq = load_sequence(tmp_path / "p")
    assert seq.ground_truth is None
    assert [p.is_labeled for p in seq.phases] == [t in (0, 7) for t in range(8)]


def test_meta_layout(tmp_path, phantom16):
    save_sequence(phantom16[0], tmp_path / "p")
    meta = json.loads((tmp_path / "p" / "meta.json").read_text())
    assert meta["shape"] == [16, 16, 16]
    assert meta["labeled_indices"] == [0, 7]
    assert meta["byte_order"] == "little"
    assert (tmp_path / "p" / "phase_3.raw").stat().st_size == 16 ** 3 * 4
    assert (tmp_path / "p" / "label_3.raw").stat().st_size == 16 ** 3


def test_shape_mismatch_is_format_error(tmp_path, phantom16):
    save_sequence(phantom16[0], tmp_path / "p")
    np.zeros(8 ** 3, "<f4").tofile(tmp_path / "p" / "phase_2.raw")
    with pytest.raises(FormatError, match="phase_2.raw"):
        load_sequence(tmp_path / "p")


def test_missing_meta_is_format_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError, match="meta.json"):
        load_sequence(tmp_path / "empty")


def test_corrupt_meta_is_format_error(tmp_path, phantom16):
    save_sequence(phantom16[0], tmp_path / "p")
    (tmp_path / "p" / "meta.json").write_text("{not json")
    with pytest.raises(FormatError, match="meta.json"):
        load_sequence(tmp_path / "p")


def test_dataset_manifest(tmp_path, phantom16):
    manifest = save_dataset(phantom16, tmp_path, fractions=(0.5, 0.0, 0.5))
    assert manifest["split"] == {"train": ["patient_000"], "val": [], "test": ["patient_001"]}
    assert (tmp_path / "manifest.json").exists()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), phases=st.integers(3, 6))
def test_roundtrip_property(tmp_path_factory, seed, phases):
    seq = generate_phantom(PhantomConfig(grid_size=8, n_phases=phases, seed=seed, noise_level=0.2))[0]
    d = tmp_path_factory.mktemp("rt")
    save_sequence(seq, d)
    back = load_sequence(d, with_ground_truth=True)
    for a, b in zip(seq.phases, back.phases):
        assert a.intensities.tobytes() == b.intensities.tobytes()
    for a, b in zip(seq.ground_truth, back.ground_truth):
        assert a.tobytes() == b.tobytes()
