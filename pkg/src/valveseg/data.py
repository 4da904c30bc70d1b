"""Patient-level phase sequences, synthetic valve phantoms and the on-disk layout.

A patient is one cardiac cycle of 3D volumes. Only the two anchor phases
(ES, ED) carry labels visible to training; phantoms additionally keep the
ground truth of every phase in ``PatientSequence.ground_truth`` for evaluation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter


class ConfigError(ValueError):
    """Invalid configuration values."""


class FormatError(ValueError):
    """Malformed dataset directory; the message names the offending file."""


@dataclass
class PhaseVolume:
    intensities: np.ndarray
    spacing: float
    phase_index: int
    label: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise ValueError(f"intensities must be 3D, got shape {self.intensities.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.phase_index < 0:
            raise ValueError(f"phase_index must be >= 0, got {self.phase_index}")
        if self.label is not None:
            if self.label.shape != self.intensities.shape:
                raise ValueError(
                    f"label shape {self.label.shape} != intensities shape {self.intensities.shape}"
                )
            if not np.isin(self.label, (0, 1)).all():
                raise ValueError("label values must be 0 or 1")

    @property
    def is_labeled(self) -> bool:
        return self.label is not None

    @property
    def shape(self) -> tuple:
        return self.intensities.shape


@dataclass
class PatientSequence:
    patient_id: str
    phases: list
    labeled_indices: tuple
    # every-phase masks; phantoms only, never read by training
    ground_truth: Optional[list] = None

    def __post_init__(self):
        self.labeled_indices = tuple(int(t) for t in self.labeled_indices)
        n = len(self.phases)
        if n < 3:
            raise ValueError(f"a sequence needs at least 3 phases, got {n}")
        if [p.phase_index for p in self.phases] != list(range(n)):
            raise ValueError("phase indices must be 0..N-1 in order")
        if len(self.labeled_indices) != 2 or self.labeled_indices[0] == self.labeled_indices[1]:
            raise ValueError(f"labeled_indices must be two distinct phases, got {self.labeled_indices}")
        for t in self.labeled_indices:
            if not 0 <= t < n:
                raise ValueError(f"labeled index {t} out of range for {n} phases")
        for p in self.phases:
            if p.is_labeled != (p.phase_index in self.labeled_indices):
                raise ValueError(f"phase {p.phase_index}: is_labeled disagrees with labeled_indices")
        if self.ground_truth is not None and len(self.ground_truth) != n:
            raise ValueError("ground_truth must hold one mask per phase")

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def unlabeled_indices(self) -> list:
        return [t for t in range(self.n_phases) if t not in self.labeled_indices]

    @property
    def spacing(self) -> float:
        return self.phases[0].spacing

    @property
    def shape(self) -> tuple:
        return self.phases[0].shape


@dataclass
class Triplet:
    labeled: PhaseVolume
    unlabeled_1: PhaseVolume
    unlabeled_2: PhaseVolume
    patient_id: str

    def __post_init__(self):
        if not self.labeled.is_labeled:
            raise ValueError("first triplet member must be labeled")
        if self.unlabeled_1.is_labeled or self.unlabeled_2.is_labeled:
            raise ValueError("unlabeled triplet members must not carry labels")
        if self.unlabeled_1.phase_index == self.unlabeled_2.phase_index:
            raise ValueError("unlabeled triplet members must be distinct phases")

    @property
    def unlabeled(self) -> tuple:
        return self.unlabeled_1, self.unlabeled_2


@dataclass
class PhantomConfig:
    grid_size: int = 32
    n_phases: int = 8
    seed: int = 0
    n_patients: int = 1
    deformation_amplitude: float = 0.25
    noise_level: float = 0.3
    target_volume_tolerance: float = 0.05
    extent_mm: float = 32.0
    blur_sigma: float = 0.8

    def validate(self):
        if self.grid_size < 8:
            raise ConfigError(f"grid_size must be >= 8, got {self.grid_size}")
        if self.n_phases < 3:
            raise ConfigError(f"n_phases must be >= 3 (need unlabeled phases), got {self.n_phases}")
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be >= 1, got {self.n_patients}")
        if not 0 <= self.deformation_amplitude < 0.5:
            raise ConfigError(f"deformation_amplitude must be in [0, 0.5), got {self.deformation_amplitude}")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        if not 0 < self.target_volume_tolerance <= 0.2:
            raise ConfigError(
                f"target_volume_tolerance must be in (0, 0.2], got {self.target_volume_tolerance}"
            )
        if self.extent_mm <= 0 or self.blur_sigma < 0:
            raise ConfigError("extent_mm must be positive and blur_sigma non-negative")
        return self


# --------------------------------------------------------------------------- phantom


def opening_angles(n_phases: int, theta_max: float) -> np.ndarray:
    """Leaflet opening angle per phase: near-closed at both ends, widest mid-cycle."""
    u = np.arange(n_phases) / (n_phases - 1)
    return theta_max * np.sin(np.pi * (0.05 + 0.85 * u))


def _leaflet_score(zz, yy, xx, center, axes, side, angle, thickness):
    """Half-thickness minus approximate distance to one quarter-ellipsoid shell.

    The shell hangs below the annulus plane z = cz on the ``side`` half of y and
    is rotated by ``angle`` about its hinge line (parallel to x, on the rim).
    """
    cz, cy, cx = center
    a_x, b_y, c_z = axes
    hz, hy = cz, cy + side * b_y
    # undo the opening rotation (about the hinge, in the z-y plane)
    phi = -side * angle
    dz, dy = zz - hz, yy - hy
    z = hz + np.cos(phi) * dz - np.sin(phi) * dy
    y = hy + np.sin(phi) * dz + np.cos(phi) * dy

    u, v, w = (xx - cx) / a_x, (y - cy) / b_y, (z - cz) / c_z
    r = np.sqrt(u * u + v * v + w * w) + 1e-12
    grad = np.sqrt((u / a_x) ** 2 + (v / b_y) ** 2 + (w / c_z) ** 2) / r + 1e-12
    dist = np.abs(r - 1.0) / grad
    # distance outside the quarter: behind the coaptation plane or above the annulus
    outside = np.maximum(-side * (y - cy), 0.0) + np.maximum(-(z - cz), 0.0)
    return thickness / 2.0 - dist - outside


def _patient_masks(cfg: PhantomConfig, rng: np.random.Generator):
    n = cfg.grid_size
    g = np.arange(n, dtype=np.float64)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")

    center = (
        n * rng.uniform(0.30, 0.36),
        (n - 1) / 2 + n * rng.uniform(-0.03, 0.03),
        (n - 1) / 2 + n * rng.uniform(-0.03, 0.03),
    )
    axes = (n * rng.uniform(0.26, 0.32), n * rng.uniform(0.17, 0.21), n * rng.uniform(0.26, 0.32))
    thickness = max(1.5, 2.0 * n / 32)
    length = np.hypot(axes[1], axes[2])
    theta_max = min(1.2, cfg.deformation_amplitude * n / length) * rng.uniform(0.85, 1.15)
    angles = opening_angles(cfg.n_phases, theta_max)

    scores = []
    for angle in angles:
        s = np.maximum(
            _leaflet_score(zz, yy, xx, center, axes, +1, angle, thickness),
            _leaflet_score(zz, yy, xx, center, axes, -1, angle, thickness),
        )
        scores.append(s)

    # bending is near-isometric; pinning every phase to the ES voxel count makes
    # the volume conservation exact instead of approximate
    target = int((scores[0] > 0).sum())
    masks = []
    for s in scores:
        order = np.argsort(-s.ravel(), kind="stable")
        m = np.zeros(s.size, dtype=np.uint8)
        m[order[:target]] = 1
        masks.append(m.reshape(s.shape))
    return masks, angles


def _intensities(mask: np.ndarray, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    blurred = np.clip(gaussian_filter(mask.astype(np.float64), cfg.blur_sigma), 0.0, 1.0)
    if cfg.noise_level == 0:
        return blurred.astype(np.float32)
    speckle = gaussian_filter(rng.standard_normal(mask.shape), 0.7)
    speckle /= speckle.std() + 1e-12
    floor = gaussian_filter(rng.standard_normal(mask.shape), 0.7)
    floor /= floor.std() + 1e-12
    img = blurred * (1.0 + cfg.noise_level * speckle) + cfg.noise_level * floor
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_phantom(config: PhantomConfig) -> list:
    """Deterministic synthetic deforming-valve patients (one PatientSequence each)."""
    config.validate()
    spacing = config.extent_mm / config.grid_size
    streams = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    sequences = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        masks, _ = _patient_masks(config, rng)
        labeled = (0, config.n_phases - 1)
        phases = []
        for t, m in enumerate(masks):
            img = _intensities(m, config, rng)
            phases.append(PhaseVolume(img, spacing, t, m.copy() if t in labeled else None))
        sequences.append(PatientSequence(f"patient_{i:03d}", phases, labeled, ground_truth=masks))
    return sequences


def volume_drift(masks: Sequence[np.ndarray]) -> float:
    v = np.array([int(m.sum()) for m in masks], dtype=np.float64)
    return float(np.max(np.abs(v - v[0])) / v[0])


# --------------------------------------------------------------------------- resampling


def _lerp_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    t = (src - i0).reshape(shape)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    # a + t*(b-a) keeps constants exact
    return a + t * (b - a)


def _nearest_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    idx = np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int), n_in - 1)
    return np.take(arr, idx, axis=axis)


def resample(volume: PhaseVolume, target_shape) -> PhaseVolume:
    """Isotropic resize: trilinear for intensities, nearest-neighbour for labels."""
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 2:
        raise ValueError(f"target shape must be three dimensions >= 2, got {target_shape}")
    factors = [i / o for i, o in zip(volume.shape, target_shape)]
    if not np.allclose(factors, factors[0], rtol=1e-9, atol=0):
        raise ValueError(
            f"resampling {volume.shape} -> {target_shape} would make the spacing anisotropic"
        )
    img = volume.intensities.astype(np.float64)
    lab = volume.label
    for ax, n_out in enumerate(target_shape):
        img = _lerp_axis(img, ax, n_out)
        if lab is not None:
            lab = _nearest_axis(lab, ax, n_out)
    return PhaseVolume(
        img.astype(volume.intensities.dtype),
        volume.spacing * factors[0],
        volume.phase_index,
        None if lab is None else np.ascontiguousarray(lab),
    )


# --------------------------------------------------------------------------- triplets


def sample_triplet(sequence: PatientSequence, rng: np.random.Generator) -> Triplet:
    unlabeled = sequence.unlabeled_indices
    if len(unlabeled) < 2:
        raise ValueError(f"{sequence.patient_id}: need >= 2 unlabeled phases, got {len(unlabeled)}")
    t_lab = sequence.labeled_indices[int(rng.integers(2))]
    u1, u2 = sorted(int(t) for t in rng.choice(unlabeled, size=2, replace=False))
    return Triplet(sequence.phases[t_lab], sequence.phases[u1], sequence.phases[u2], sequence.patient_id)


# --------------------------------------------------------------------------- disk format

META_NAME = "meta.json"


def save_sequence(sequence: PatientSequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "patient_id": sequence.patient_id,
        "n_phases": sequence.n_phases,
        "spacing_mm": float(sequence.spacing),
        "shape": list(sequence.shape),
        "labeled_indices": list(sequence.labeled_indices),
        "dtype": {"phase": "float32", "label": "uint8"},
        "byte_order": "little",
    }
    with open(d / META_NAME, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    for p in sequence.phases:
        p.intensities.astype("<f4").tofile(d / f"phase_{p.phase_index}.raw")
        if sequence.ground_truth is not None:
            lab = sequence.ground_truth[p.phase_index]
        else:
            lab = p.label
        if lab is not None:
            np.asarray(lab).astype("u1").tofile(d / f"label_{p.phase_index}.raw")
    return d


def _read_raw(path: Path, dtype: str, shape: tuple) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"{path}: missing file")
    arr = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise FormatError(f"{path}: holds {arr.size} values, metadata shape {list(shape)} needs {expected}")
    return arr.reshape(shape)


def read_meta(directory) -> dict:
    path = Path(directory) / META_NAME
    if not path.exists():
        raise FormatError(f"{path}: missing metadata file")
    try:
        with open(path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt metadata ({e})") from e
    required = ("patient_id", "n_phases", "spacing_mm", "shape", "labeled_indices")
    missing = [k for k in required if k not in meta]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")
    if meta.get("byte_order", "little") != "little":
        raise FormatError(f"{path}: unsupported byte order {meta['byte_order']!r}")
    if len(meta["shape"]) != 3:
        raise FormatError(f"{path}: shape must have 3 entries")
    return meta


def load_sequence(directory, with_ground_truth: bool = False) -> PatientSequence:
    """Read one patient directory.

    Labels are read only at the labeled indices unless ``with_ground_truth``
    is set (evaluation), in which case every available label file is loaded
    into ``ground_truth``.
    """
    d = Path(directory)
    meta = read_meta(d)
    shape = tuple(int(s) for s in meta["shape"])
    labeled = tuple(int(t) for t in meta["labeled_indices"])
    phases, gt = [], []
    for t in range(int(meta["n_phases"])):
        img = _read_raw(d / f"phase_{t}.raw", "<f4", shape).astype(np.float32)
        lab = _read_raw(d / f"label_{t}.raw", "u1", shape) if t in labeled else None
        phases.append(PhaseVolume(img, float(meta["spacing_mm"]), t, lab))
        if with_ground_truth:
            p = d / f"label_{t}.raw"
            gt.append(_read_raw(p, "u1", shape) if p.exists() else None)
    try:
        seq = PatientSequence(meta["patient_id"], phases, labeled)
    except ValueError as e:
        raise FormatError(f"{d / META_NAME}: {e}") from e
    if with_ground_truth:
        seq.ground_truth = gt
    return seq


def save_dataset(sequences: Sequence[PatientSequence], out_dir, fractions=(0.75, 0.125, 0.125),
                 config: Optional[PhantomConfig] = None) -> dict:
    """Write patient directories plus ``manifest.json`` with a train/val/test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [s.patient_id for s in sequences]
    for s in sequences:
        save_sequence(s, out / s.patient_id)
    split = split_ids(ids, fractions)
    manifest = {"patients": ids, "split": split}
    if config is not None:
        manifest["phantom_config"] = dict(sorted(vars(config).items()))
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def split_ids(ids: Sequence[str], fractions=(0.75, 0.125, 0.125)) -> dict:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or fr.sum() <= 0:
        raise ConfigError(f"split fractions must be three non-negative numbers, got {fractions}")
    fr = fr / fr.sum()
    n = len(ids)
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_train = max(n - n_val - n_test, 0)
    return {
        "train": list(ids[:n_train]),
        "val": list(ids[n_train:n_train + n_val]),
        "test": list(ids[n_train + n_val:]),
    }


def load_dataset(root, subset: Optional[str] = None, with_ground_truth: bool = False) -> list:
    root = Path(root)
    mpath = root / "manifest.json"
    if mpath.exists():
        with open(mpath) as f:
            manifest = json.load(f)
        ids = manifest["split"][subset] if subset else manifest["patients"]
    else:
        if subset:
            raise FormatError(f"{mpath}: missing manifest, cannot select split {subset!r}")
        ids = sorted(p.name for p in root.iterdir() if (p / META_NAME).exists())
    return [load_sequence(root / i, with_ground_truth=with_ground_truth) for i in ids]


def output_root(default) -> Path:
    """Output directory, overridable through ``VALVESEG_OUTPUT_ROOT``."""
    return Path(os.environ.get("VALVESEG_OUTPUT_ROOT", default))
