"""Synthetic lesioned-brain phantoms with known scores.

Each phantom is an ellipsoidal brain (white-matter core inside a gray-matter
shell) with one ellipsoidal lesion placed in a fixed vascular territory of
the left or right hemisphere.  The score is synthetic:

    score = clamp(75 - 120 * lesion_fraction - 6 * [left] + N(0, noise_std), 39, 75)

These are test fixtures, not a model of any clinical population.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .regressor import Demographics, SubjectRecord, write_subject_table
from .volume import Volume, save_rawgrid

SCORE_MIN, SCORE_MAX = 39.0, 75.0
LESION_COEF = 120.0
LEFT_PENALTY = 6.0
GROUND_TRUTH_HEADER = ["subject_id", "lesion_volume_fraction", "cx", "cy", "cz", "hemisphere", "true_score"]


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 32)  # (nx, ny, nz)
    spacing: tuple = (3.0, 3.0, 4.5)
    gray_intensity: float = 0.5
    white_intensity: float = 0.8
    background: float = 0.0
    lesion_intensity: float = 0.2
    lesion_fraction_range: tuple = (0.0, 0.2)
    noise_std: float = 1.0  # score noise, score units
    image_noise_std: float = 0.02
    threshold: float = 60.0
    # target-class sampling keeps lesion fractions this far from the critical fraction
    class_margin: float = 0.02
    seed: int = 0

    def validate(self):
        if min(self.dims) < 8:
            raise PhantomSpecError(f"dims must be >= 8 per axis, got {self.dims}")
        for name in ("gray_intensity", "white_intensity", "background", "lesion_intensity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PhantomSpecError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.lesion_fraction_range
        if not 0.0 <= lo <= hi:
            raise PhantomSpecError(f"bad lesion fraction range {self.lesion_fraction_range}")
        if hi > MAX_LESION_FRACTION:
            raise PhantomSpecError(
                f"lesion fraction {hi} does not fit inside one hemisphere (max {MAX_LESION_FRACTION})")
        if self.class_margin < 0:
            raise PhantomSpecError(f"class_margin must be >= 0, got {self.class_margin}")
        if self.noise_std < 0 or self.image_noise_std < 0:
            raise PhantomSpecError("noise_std must be >= 0")


# a lesion this large no longer fits in its hemisphere
MAX_LESION_FRACTION = 0.4

# lesion aspect ratios are drawn from [1 - ASPECT_JITTER, 1 + ASPECT_JITTER]
ASPECT_JITTER = 0.25
CENTROID_JITTER = 0.06  # fraction of the brain semi-axis


@dataclass
class GroundTruth:
    lesion_volume_fraction: float
    lesion_centroid: tuple  # voxel (x, y, z)
    hemisphere: str
    tissue_fraction_vector: np.ndarray
    true_score: float
    lesion_mask: np.ndarray = field(repr=False, default=None)  # (nz, ny, nx) bool


def true_score(lesion_fraction, hemisphere, noise=0.0):
    raw = 75.0 - LESION_COEF * lesion_fraction - LEFT_PENALTY * (hemisphere == "left") + noise
    return float(min(max(raw, SCORE_MIN), SCORE_MAX))


def critical_fraction(hemisphere, threshold=60.0):
    """Lesion fraction at which the noise-free score equals ``threshold``."""
    return (75.0 - LEFT_PENALTY * (hemisphere == "left") - threshold) / LESION_COEF


def _grid(dims):
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return x.astype(np.float64), y.astype(np.float64), z.astype(np.float64)


def brain_geometry(dims):
    nx, ny, nz = dims
    center = ((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0)
    semi = (0.42 * nx, 0.40 * ny, 0.40 * nz)
    return center, semi


def _ellipsoid(grid, center, semi):
    x, y, z = grid
    return (((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
            + ((z - center[2]) / semi[2]) ** 2) <= 1.0


def tissue_template(dims):
    """Healthy anatomy: ``(brain, white)`` boolean masks shaped ``(nz, ny, nx)``."""
    grid = _grid(dims)
    center, semi = brain_geometry(dims)
    brain = _ellipsoid(grid, center, semi)
    white = _ellipsoid(grid, center, tuple(0.68 * s for s in semi))
    return brain, white


def territory_center(dims, hemisphere):
    center, semi = brain_geometry(dims)
    side = -1.0 if hemisphere == "left" else 1.0
    return (center[0] + side * 0.45 * semi[0], center[1] - 0.15 * semi[1], center[2] + 0.1 * semi[2])


def region_slices(dims, splits=(2, 2, 2)):
    """Axis-aligned boxes that tile the volume; used for tissue fraction vectors."""
    nx, ny, nz = dims
    edges = [np.linspace(0, n, k + 1).round().astype(int) for n, k in zip((nx, ny, nz), splits)]
    boxes = []
    for iz in range(splits[2]):
        for iy in range(splits[1]):
            for ix in range(splits[0]):
                boxes.append((slice(edges[2][iz], edges[2][iz + 1]),
                              slice(edges[1][iy], edges[1][iy + 1]),
                              slice(edges[0][ix], edges[0][ix + 1])))
    return boxes


def tissue_fractions(lesion_mask, dims):
    """Per-region intact gray and white matter fractions: ``[gray_0.., white_0..]``."""
    brain, white = tissue_template(dims)
    gray = brain & ~white
    intact = ~lesion_mask
    gray_f, white_f = [], []
    for box in region_slices(dims):
        for total, out in ((gray[box], gray_f), (white[box], white_f)):
            n = total.sum()
            out.append(float((total & intact[box]).sum() / n) if n else 1.0)
    return np.array(gray_f + white_f)


def _rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def subject_id_for(index):
    return f"sub-{index:04d}"


def _sample_demographics(rng, score, hemisphere):
    # age at stroke drifts down by 0.5 years per score point above 57: weak, negative
    age = float(np.clip(55.5 - 0.5 * (score - 57.0) + rng.normal(0.0, 11.0), 18.0, 95.0))
    stroke_to_scan = float(rng.exponential(2.0))
    return Demographics(
        a_years_stroke_to_scan=round(stroke_to_scan, 3),
        b_vision_affected=int(rng.random() < 0.1),
        c_hearing_affected=int(rng.random() < 0.1),
        d_gender=int(rng.random() < 0.32),
        e_lesion_count=1,
        f_lesion_side_left=int(hemisphere == "left"),
        f_lesion_side_right=int(hemisphere == "right"),
        g_education_years=round(float(np.clip(rng.normal(13.0, 3.0), 0.0, 25.0)), 1),
        h_age_at_stroke=round(age, 2),
        i_years_since_stroke=round(stroke_to_scan + float(rng.uniform(0.0, 1.0)), 3),
        j_handedness=int(rng.random() < 0.9),
    )


def generate_phantom(spec: PhantomSpec, index, lesion_fraction=None, hemisphere=None, target_class=None):
    """Build one phantom; fully determined by ``(spec.seed, index)`` and the overrides.

    ``target_class`` (0 or 1) restricts the lesion fraction to the side of the
    threshold that yields that class before score noise.
    """
    spec.validate()
    rng = _rng(spec.seed, index)
    dims = tuple(spec.dims)
    side_draw = rng.random()
    if hemisphere is None:
        hemisphere = "left" if side_draw < 0.5 else "right"
    elif hemisphere not in ("left", "right"):
        raise PhantomSpecError(f"hemisphere must be 'left' or 'right', got {hemisphere!r}")
    lo, hi = spec.lesion_fraction_range
    u = rng.random()
    if lesion_fraction is None:
        if target_class is not None:
            crit = critical_fraction(hemisphere, spec.threshold)
            if target_class == 1:
                hi = min(max(crit - spec.class_margin, lo), hi)
            else:
                lo = max(min(crit + spec.class_margin, hi), lo)
        lesion_fraction = lo + u * (hi - lo)
    if not 0.0 <= lesion_fraction <= MAX_LESION_FRACTION:
        raise PhantomSpecError(f"lesion fraction {lesion_fraction} does not fit inside the brain")

    grid = _grid(dims)
    brain, white = tissue_template(dims)
    n_brain = int(brain.sum())
    aspects = 1.0 + ASPECT_JITTER * rng.uniform(-1.0, 1.0, size=3)
    _, semi = brain_geometry(dims)
    tc = territory_center(dims, hemisphere)
    jitter = rng.normal(0.0, CENTROID_JITTER, size=3) * np.array(semi)
    center = tuple(float(c + j) for c, j in zip(tc, jitter))

    lesion = np.zeros_like(brain)
    if lesion_fraction > 0:
        # anisotropic voxels: z semi-axis shrinks by nz/nx so lesions look round in mm
        target = lesion_fraction * n_brain
        shape = aspects * np.array([1.0, 1.0, dims[2] / dims[0]])
        lo_r, hi_r = 0.0, 2.0 * max(dims)
        if (_ellipsoid(grid, center, tuple(hi_r * shape)) & brain).sum() < target:
            raise PhantomSpecError("lesion larger than brain")
        # the brain clips the ellipsoid, so search r on the clipped voxel count
        for _ in range(30):
            mid = 0.5 * (lo_r + hi_r)
            if (_ellipsoid(grid, center, tuple(mid * shape)) & brain).sum() < target:
                lo_r = mid
            else:
                hi_r = mid
        lesion = _ellipsoid(grid, center, tuple(hi_r * shape)) & brain

    data = np.full(brain.shape, spec.background)
    data[brain & ~white] = spec.gray_intensity
    data[white] = spec.white_intensity
    data[lesion] = spec.lesion_intensity
    if spec.image_noise_std > 0:
        data = data + rng.normal(0.0, spec.image_noise_std, size=data.shape) * brain
    data = np.clip(data, 0.0, 1.0)

    actual = float(lesion.sum() / n_brain)
    noise = float(rng.normal(0.0, spec.noise_std)) if spec.noise_std > 0 else 0.0
    score = true_score(actual, hemisphere, noise)
    if lesion.any():
        zz, yy, xx = np.nonzero(lesion)
        centroid = (float(xx.mean()), float(yy.mean()), float(zz.mean()))
    else:
        centroid = center
    truth = GroundTruth(
        lesion_volume_fraction=actual,
        lesion_centroid=centroid,
        hemisphere=hemisphere,
        tissue_fraction_vector=tissue_fractions(lesion, dims),
        true_score=score,
        lesion_mask=lesion,
    )
    sid = subject_id_for(index)
    volume = Volume(data, spacing=spec.spacing, subject_id=sid)
    return volume, truth, _sample_demographics(rng, score, hemisphere)


@dataclass
class Cohort:
    volumes: list
    truths: list
    records: list  # SubjectRecord

    @property
    def subject_ids(self):
        return [v.subject_id for v in self.volumes]


def generate_cohort(spec: PhantomSpec, n, out_dir=None):
    """``n`` phantoms alternating between target classes; optionally written to ``out_dir``.

    The on-disk layout is ``volumes/<subject_id>.raw``, ``subjects.csv``,
    ``ground_truth.csv`` and ``tissue_fractions.csv``.
    """
    if n < 2:
        raise PhantomSpecError(f"need >= 2 subjects, got {n}")
    volumes, truths, records = [], [], []
    for i in range(n):
        v, t, demo = generate_phantom(spec, i, target_class=(i + 1) % 2)
        lesion_feats = (t.lesion_volume_fraction,) + tuple(t.lesion_centroid)
        volumes.append(v)
        truths.append(t)
        records.append(SubjectRecord(v.subject_id, t.true_score, demo, lesion_feats))
    cohort = Cohort(volumes, truths, records)
    if out_dir is not None:
        write_cohort(cohort, out_dir)
    return cohort


def ground_truth_csv(cohort):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GROUND_TRUTH_HEADER)
    for v, t in zip(cohort.volumes, cohort.truths):
        cx, cy, cz = t.lesion_centroid
        w.writerow([v.subject_id, repr(t.lesion_volume_fraction), repr(cx), repr(cy), repr(cz),
                    t.hemisphere, repr(t.true_score)])
    return buf.getvalue()


def tissue_fractions_csv(cohort):
    k = len(cohort.truths[0].tissue_fraction_vector) // 2
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id"] + [f"gray_{i}" for i in range(k)] + [f"white_{i}" for i in range(k)])
    for v, t in zip(cohort.volumes, cohort.truths):
        w.writerow([v.subject_id] + [repr(float(x)) for x in t.tissue_fraction_vector])
    return buf.getvalue()


def write_cohort(cohort, out_dir):
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    for v in cohort.volumes:
        save_rawgrid(v, out / "volumes" / f"{v.subject_id}.raw")
    write_subject_table(cohort.records, out / "subjects.csv")
    (out / "ground_truth.csv").write_text(ground_truth_csv(cohort), encoding="utf-8")
    (out / "tissue_fractions.csv").write_text(tissue_fractions_csv(cohort), encoding="utf-8")


def read_ground_truth(path):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows[row["subject_id"]] = {
                "lesion_volume_fraction": float(row["lesion_volume_fraction"]),
                "centroid": (float(row["cx"]), float(row["cy"]), float(row["cz"])),
                "hemisphere": row["hemisphere"],
                "true_score": float(row["true_score"]),
            }
    return rows


def read_tissue_fractions(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out[row[0]] = np.array([float(x) for x in row[1:]])
    return out
