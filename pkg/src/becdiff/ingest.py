"""ROI series extraction, synthetic causal populations and manifest I/O."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

KINDS = ("empirical", "rough", "denoised")
MANIFEST_HEADER = ["id", "label", "rough_path", "clean_path", "true_bec_path", "fold"]
BURN_IN = 50


class DataError(ValueError):
    pass


@dataclass
class RoiTimeSeries:
    values: np.ndarray
    kind: str = "empirical"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"ROI series must be 2D (N x d), got shape {self.values.shape}")
        if self.kind not in KINDS:
            raise DataError(f"unknown series kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("ROI series contains NaN or Inf")

    @property
    def n_rois(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class AtlasMask:
    labels: np.ndarray
    n_labels: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise DataError(f"atlas must be a 3D label volume, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            rounded = np.rint(self.labels)
            if not np.array_equal(rounded, self.labels):
                raise DataError("atlas volume must hold integer labels")
            self.labels = rounded.astype(np.int64)
        present = set(np.unique(self.labels).tolist()) - {0}
        missing = sorted(set(range(1, self.n_labels + 1)) - present)
        if missing:
            raise DataError(f"atlas labels missing from volume: {missing[:10]}")

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "AtlasMask":
        labels = np.asarray(labels)
        return cls(labels, int(labels.max()))


@dataclass
class SubjectRecord:
    id: str
    label: str
    rough: RoiTimeSeries
    clean: Optional[RoiTimeSeries] = None
    true_bec: Optional[np.ndarray] = None
    fold: int = 0

    def __post_init__(self):
        if self.clean is not None and self.clean.values.shape != self.rough.values.shape:
            raise DataError(
                f"subject {self.id}: rough {self.rough.values.shape} and clean "
                f"{self.clean.values.shape} shapes differ"
            )


@dataclass
class SynthSpec:
    n_rois: int = 10
    length: int = 200
    density: float = 0.2
    edge_scale: float = 0.5
    noise_sd: float = 1.0
    spectral_margin: float = 0.1
    n_subjects_per_class: int = 20
    class_count: int = 2
    seed: int = 0
    # corruption applied to produce the rough sample
    rough_noise_sd: float = 0.5
    rough_smooth: int = 5
    gain_jitter: float = 0.1
    subject_perturb: float = 0.05

    def validate(self) -> None:
        if not (0.0 <= self.density <= 1.0):
            raise DataError(f"density must be in [0, 1], got {self.density}")
        if not (0.0 < self.spectral_margin < 1.0):
            raise DataError(f"spectral_margin must be in (0, 1), got {self.spectral_margin}")
        if self.n_rois < 2 or self.length < 2:
            raise DataError("need at least 2 ROIs and 2 time points")
        if self.class_count < 1 or self.n_subjects_per_class < 1:
            raise DataError("need at least one class and one subject per class")


# ---------------------------------------------------------------- extraction


def extract_roi_series(volume4d: np.ndarray, atlas: AtlasMask, discard: int = 10) -> RoiTimeSeries:
    """Average the voxels of every atlas label at each retained time point.

    Args:
        volume4d: array of shape (X, Y, Z, time).
        atlas: integer label volume of shape (X, Y, Z).
        discard: number of leading volumes dropped.

    Returns:
        Rough series of shape (n_labels, time - discard).
    """
    volume4d = np.asarray(volume4d, dtype=np.float64)
    if volume4d.ndim != 4:
        raise DataError(f"expected a 4D volume, got shape {volume4d.shape}")
    if volume4d.shape[:3] != atlas.labels.shape:
        raise DataError(
            f"volume spatial dims {volume4d.shape[:3]} do not match atlas dims {atlas.labels.shape}"
        )
    if volume4d.shape[3] <= discard:
        raise DataError(f"volume has {volume4d.shape[3]} time points, cannot discard {discard}")

    flat = volume4d.reshape(-1, volume4d.shape[3])[:, discard:]
    labels = atlas.labels.reshape(-1)
    out = np.empty((atlas.n_labels, flat.shape[1]))
    for r in range(1, atlas.n_labels + 1):
        sel = labels == r
        if not sel.any():
            raise DataError(f"atlas label {r} has no voxels")
        out[r - 1] = flat[sel].mean(axis=0)
    return RoiTimeSeries(out, kind="rough")


def load_nifti(path) -> np.ndarray:
    import nibabel as nib

    return np.asarray(nib.load(str(path)).get_fdata())


def normalize_series(x: RoiTimeSeries) -> RoiTimeSeries:
    """Z-score each ROI row; constant rows become zero rows."""
    v = x.values
    mean = v.mean(axis=1, keepdims=True)
    std = v.std(axis=1, keepdims=True)
    centred = v - mean
    safe = np.where(std > 0, std, 1.0)
    out = np.where(std > 0, centred / safe, 0.0)
    return RoiTimeSeries(out, kind=x.kind)


# ------------------------------------------------------------ synthetic data


def spectral_radius(a: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(a)))) if a.size else 0.0


def random_sparse_bec(n: int, density: float, edge_scale: float, spectral_margin: float,
                      rng: np.random.Generator, max_tries: int = 20) -> np.ndarray:
    """Random signed zero-diagonal matrix with spectral radius <= 1 - margin."""
    off = ~np.eye(n, dtype=bool)
    limit = 1.0 - spectral_margin
    for _ in range(max_tries):
        mask = (rng.random((n, n)) < density) & off
        mag = rng.uniform(0.5, 1.0, (n, n)) * edge_scale
        sign = rng.choice([-1.0, 1.0], size=(n, n))
        a = np.where(mask, mag * sign, 0.0)
        rho = spectral_radius(a)
        if rho > limit:
            a = a * (limit / rho)
        if np.all(np.isfinite(a)) and spectral_radius(a) <= limit + 1e-12:
            return a
    raise DataError("could not draw a stable connectivity matrix")


def simulate_var1(a: np.ndarray, length: int, noise_sd: float, rng: np.random.Generator,
                  burn_in: int = BURN_IN, z0: Optional[np.ndarray] = None) -> np.ndarray:
    """Simulate z(tau + 1) = A^T z(tau) + noise; returns an (N, length) array."""
    n = a.shape[0]
    z = rng.standard_normal(n) if z0 is None else np.array(z0, dtype=np.float64)
    out = np.empty((n, length))
    at = a.T
    for step in range(burn_in + length):
        if step >= burn_in:
            out[:, step - burn_in] = z
        z = at @ z
        if noise_sd:
            z = z + noise_sd * rng.standard_normal(n)
    return out


def _smooth(noise: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return noise
    kernel = np.ones(width) / math.sqrt(width)
    return np.stack([np.convolve(row, kernel, mode="same") for row in noise])


def corrupt(clean: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Rough sample: per-ROI gain jitter plus temporally smoothed noise."""
    n, d = clean.shape
    gain = 1.0 + spec.gain_jitter * rng.standard_normal((n, 1))
    noise = _smooth(rng.standard_normal((n, d)), spec.rough_smooth) * spec.rough_noise_sd
    return gain * clean + noise


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def synth_population(spec: SynthSpec) -> list[SubjectRecord]:
    """Draw class templates, per-subject VAR(1) series and rough versions.

    Every subject gets its own seeded stream keyed on (class, index) so the
    result does not depend on generation order.
    """
    spec.validate()
    limit = 1.0 - spec.spectral_margin
    records = []
    for c in range(spec.class_count):
        template = random_sparse_bec(spec.n_rois, spec.density, spec.edge_scale,
                                     spec.spectral_margin, _stream(spec.seed, c))
        for k in range(spec.n_subjects_per_class):
            rng = _stream(spec.seed, c, k)
            a = template * (1.0 + spec.subject_perturb * rng.standard_normal(template.shape))
            rho = spectral_radius(a)
            if rho > limit:
                a = a * (limit / rho)
            clean = simulate_var1(a, spec.length, spec.noise_sd, rng)
            rough = corrupt(clean, spec, rng)
            records.append(SubjectRecord(
                id=f"c{c}_s{k:03d}",
                label=f"class{c}",
                rough=RoiTimeSeries(rough, "rough"),
                clean=RoiTimeSeries(clean, "empirical"),
                true_bec=a,
            ))
    return records


# ------------------------------------------------------------------ CSV I/O


def write_matrix(path, m: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(m), delimiter=",", fmt="%.17g")


def read_matrix(path) -> np.ndarray:
    m = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return m


def save_manifest(records: Sequence[SubjectRecord], path, data_dir=None) -> None:
    """Write series/BEC CSVs next to the manifest and the manifest itself.

    Paths stored in the manifest are relative to the manifest's directory.
    """
    path = Path(path)
    root = path.parent if data_dir is None else Path(data_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in records:
        sub = root / r.label
        rough = sub / f"{r.id}_rough.csv"
        write_matrix(rough, r.rough.values)
        clean = bec = ""
        if r.clean is not None:
            write_matrix(sub / f"{r.id}_clean.csv", r.clean.values)
            clean = _rel(sub / f"{r.id}_clean.csv", path.parent)
        if r.true_bec is not None:
            write_matrix(sub / f"{r.id}_bec.csv", r.true_bec)
            bec = _rel(sub / f"{r.id}_bec.csv", path.parent)
        rows.append([r.id, r.label, _rel(rough, path.parent), clean, bec, str(r.fold)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def _rel(p: Path, base: Path) -> str:
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p.resolve())


def load_manifest(path, classes: Optional[Iterable[str]] = None, threads: int = 1) -> list[SubjectRecord]:
    """Load a manifest CSV; errors name the offending subject id.

    ``threads`` only parallelises file reading; record order follows the manifest.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    allowed = set(classes) if classes is not None else None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing_cols = set(MANIFEST_HEADER) - set(reader.fieldnames)
        if missing_cols:
            raise DataError(f"manifest missing columns {sorted(missing_cols)}")
        rows = list(reader)

    for row in rows:
        if allowed is not None and row["label"] not in allowed:
            raise DataError(f"subject {row['id']}: label {row['label']!r} not in {sorted(allowed)}")
        if not row["rough_path"]:
            raise DataError(f"subject {row['id']}: rough_path is required")

    def load(row, col):
        if not row[col]:
            return None
        p = Path(row[col])
        p = p if p.is_absolute() else path.parent / p
        if not p.exists():
            raise DataError(f"subject {row['id']}: {col} file {p} not found")
        try:
            return read_matrix(p)
        except ValueError as exc:
            raise DataError(f"subject {row['id']}: cannot parse {p}: {exc}") from exc

    def load_row(row):
        return tuple(load(row, c) for c in ("rough_path", "clean_path", "true_bec_path"))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            arrays = list(pool.map(load_row, rows))
    else:
        arrays = [load_row(row) for row in rows]

    records: list[SubjectRecord] = []
    shape = None
    for row, (rough, clean, bec) in zip(rows, arrays):
        sid = row["id"]
        if shape is None:
            shape = rough.shape
        elif rough.shape != shape:
            raise DataError(f"subject {sid}: series shape {rough.shape} differs from {shape}")
        if bec is not None and bec.shape != (shape[0], shape[0]):
            raise DataError(f"subject {sid}: BEC shape {bec.shape} does not match N={shape[0]}")
        try:
            records.append(SubjectRecord(
                id=sid,
                label=row["label"],
                rough=RoiTimeSeries(rough, "rough"),
                clean=None if clean is None else RoiTimeSeries(clean, "empirical"),
                true_bec=bec,
                fold=int(row["fold"]) if row["fold"] else 0,
            ))
        except DataError as exc:
            raise DataError(f"subject {sid}: {exc}") from exc
    return records


def with_folds(records: Sequence[SubjectRecord], folds: Sequence[int]) -> list[SubjectRecord]:
    return [replace(r, fold=int(f)) for r, f in zip(records, folds)]
