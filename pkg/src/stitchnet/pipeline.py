"""File-system orchestration shared by the CLI: cohorts, configs, splits, reports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from . import analysis, classifier, regressor, synthdata, volume

log = logging.getLogger(__name__)


class DataError(Exception):
    """Missing or inconsistent inputs on disk (exit code 2)."""


class ConfigError(Exception):
    """Unusable configuration or arguments (exit code 1)."""


DEFAULT_TAGS = regressor.TABLE_TAGS


@dataclass
class PipelineConfig:
    data_dir: Path = Path("cohort")
    output_dir: Path = Path("out")
    synth_n: int = 200
    synth_seed: int = 7
    synth_dims: tuple = synthdata.PhantomSpec.dims
    classifier: classifier.ClassifierConfig = field(default_factory=lambda: classifier.ClassifierConfig(seed=7))
    folds: int = 5
    test_size: int = 40
    regressor: regressor.RegressorConfig = field(default_factory=lambda: regressor.RegressorConfig(seed=7))
    feature_sets: tuple = DEFAULT_TAGS
    saliency_class: str = "below"
    reduction: str = "max"
    noise_seed: int = 7


_CLASSIFIER_KEYS = {"input_size", "threshold", "epochs", "batch_size", "seed", "lr", "beta1", "beta2", "epsilon"}
_REGRESSOR_KEYS = {"hidden_units", "epochs", "batch_size", "seed", "lr", "beta1", "beta2", "epsilon"}


def load_config(path=None, base_dir=None):
    """Read a TOML config; relative paths resolve against the config file's directory."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = Path(base_dir) if base_dir else path.parent
    known = {"paths", "synth", "classifier", "regressor", "analysis"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    try:
        paths = doc.get("paths", {})
        if "data_dir" in paths:
            cfg.data_dir = base / paths["data_dir"]
        if "output_dir" in paths:
            cfg.output_dir = base / paths["output_dir"]
        synth = doc.get("synth", {})
        cfg.synth_n = int(synth.get("n", cfg.synth_n))
        cfg.synth_seed = int(synth.get("seed", cfg.synth_seed))
        cfg.synth_dims = tuple(int(d) for d in synth.get("dims", cfg.synth_dims))

        clf = dict(doc.get("classifier", {}))
        cfg.folds = int(clf.pop("folds", cfg.folds))
        cfg.test_size = int(clf.pop("test_size", cfg.test_size))
        bad = set(clf) - _CLASSIFIER_KEYS
        if bad:
            raise ConfigError(f"{path}: unknown classifier keys {sorted(bad)}")
        if "input_size" in clf:
            size = clf["input_size"]
            clf["input_size"] = (size, size) if isinstance(size, int) else tuple(size)
            clf["architecture"] = None
        cfg.classifier = replace(cfg.classifier, **clf) if clf else cfg.classifier

        reg = dict(doc.get("regressor", {}))
        tags = reg.pop("feature_sets", None)
        if tags is not None:
            cfg.feature_sets = tuple(tags)
        bad = set(reg) - _REGRESSOR_KEYS
        if bad:
            raise ConfigError(f"{path}: unknown regressor keys {sorted(bad)}")
        cfg.regressor = replace(cfg.regressor, **reg) if reg else cfg.regressor

        an = doc.get("analysis", {})
        cfg.saliency_class = an.get("class", cfg.saliency_class)
        cfg.reduction = an.get("reduction", cfg.reduction)
        cfg.noise_seed = int(an.get("noise_seed", cfg.noise_seed))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


# ---------------------------------------------------------------------------
# cohorts on disk


@dataclass
class CohortData:
    volumes: list
    records: list
    layout: volume.MosaicLayout
    intensity: tuple

    @property
    def subject_ids(self):
        return [v.subject_id for v in self.volumes]

    def labels(self, threshold):
        return np.array([classifier.label_from_score(r.score, threshold) for r in self.records])


def load_cohort(data_dir):
    data_dir = Path(data_dir)
    table = data_dir / "subjects.csv"
    if not table.exists():
        raise DataError(f"no subject table at {table}")
    records = regressor.read_subject_table(table)
    vols = []
    for r in records:
        candidates = [data_dir / "volumes" / f"{r.subject_id}{ext}" for ext in (".raw", ".nii")]
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            raise DataError(f"no volume for {r.subject_id} under {data_dir / 'volumes'}")
        vols.append(volume.load_volume(found, subject_id=r.subject_id))
    dims = volume.validate_cohort(vols)
    layout = volume.MosaicLayout.for_dims(*dims)
    return CohortData(vols, records, layout, volume.intensity_range(vols))


def prepare_inputs(volumes, size, intensity):
    lo, hi = intensity
    return np.stack([volume.prepare_input(v, size, lo, hi)[0] for v in volumes])


def write_split(path, subject_ids, train_idx, test_idx):
    role = {i: "train" for i in train_idx}
    role.update({i: "test" for i in test_idx})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "split"])
    for i, sid in enumerate(subject_ids):
        w.writerow([sid, role[i]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_split(path):
    if not Path(path).exists():
        raise DataError(f"no split file at {path}; run train-classifier first")
    train, test = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            (train if row["split"] == "train" else test).append(row["subject_id"])
    return train, test


def load_model(output_dir):
    path = Path(output_dir) / "classifier.snet"
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run train-classifier first")
    return classifier.load_checkpoint(path)


def model_inputs(model, cohort):
    """Inputs prepared exactly as at training time."""
    pre = model.preprocessing
    intensity = (pre["intensity_min"], pre["intensity_max"]) if pre else cohort.intensity
    if pre and volume.MosaicLayout.from_dict(pre["layout"]) != cohort.layout:
        raise DataError(f"cohort layout {cohort.layout} differs from the checkpoint's {pre['layout']}")
    return prepare_inputs(cohort.volumes, model.config.input_size, intensity)


def features_csv(subject_ids, feats):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id"] + [f"f{i}" for i in range(feats.shape[1])])
    for sid, row in zip(subject_ids, feats):
        w.writerow([sid] + [repr(float(x)) for x in row])
    return buf.getvalue()


def read_features(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out[row[0]] = np.array([float(x) for x in row[1:]])
    return out


def rows_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# stages


def run_synth(cfg: PipelineConfig, out_dir=None):
    spec = synthdata.PhantomSpec(dims=cfg.synth_dims, seed=cfg.synth_seed, threshold=cfg.classifier.threshold)
    out = Path(out_dir or cfg.data_dir)
    cohort = synthdata.generate_cohort(spec, cfg.synth_n, out)
    return out, cohort


def run_stitch(cfg: PipelineConfig):
    cohort = load_cohort(cfg.data_dir)
    out = Path(cfg.output_dir) / "mosaics"
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = cohort.intensity
    for v in cohort.volumes:
        m = volume.stitch(volume.normalize_intensity(v, lo, hi))
        volume.write_pgm(m.pixels, out / f"{v.subject_id}.pgm")
    (out / "layout.csv").write_text(rows_csv(
        ["nx", "ny", "n_slices", "rows", "cols"],
        [list(cohort.layout.slice_dims) + [cohort.layout.n_slices] + list(cohort.layout.grid)]),
        encoding="utf-8")
    return out, cohort


def run_train_classifier(cfg: PipelineConfig):
    cohort = load_cohort(cfg.data_dir)
    ccfg = cfg.classifier
    X = prepare_inputs(cohort.volumes, ccfg.input_size, cohort.intensity)
    y = cohort.labels(ccfg.threshold)
    ids = cohort.subject_ids
    train_idx, test_idx = classifier.holdout_split(y, cfg.test_size, seed=ccfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_split(out / "split.csv", ids, train_idx, test_idx)

    cv = classifier.cross_validate(X[train_idx], y[train_idx], ccfg, k=cfg.folds,
                                   groups=np.array(ids)[train_idx])
    model = classifier.train(X[train_idx], y[train_idx], ccfg)
    model.preprocessing = {
        "intensity_min": cohort.intensity[0],
        "intensity_max": cohort.intensity[1],
        "layout": cohort.layout.to_dict(),
    }
    classifier.save_checkpoint(model, out / "classifier.snet")
    holdout = classifier.accuracy(model, X[test_idx], y[test_idx])
    rows = [[f"fold{i + 1}", acc, len(f)] for i, (acc, f) in enumerate(zip(cv.fold_accuracies, cv.folds))]
    rows.append(["mean", cv.mean_accuracy, int(sum(len(f) for f in cv.folds))])
    rows.append(["holdout", holdout, int(len(test_idx))])
    (out / "cv_accuracy.csv").write_text(rows_csv(["fold", "accuracy", "n"], rows), encoding="utf-8")
    return cv, holdout, model


def run_extract_features(cfg: PipelineConfig):
    model = load_model(cfg.output_dir)
    cohort = load_cohort(cfg.data_dir)
    feats = classifier.extract_features(model, model_inputs(model, cohort))
    path = Path(cfg.output_dir) / "features.csv"
    path.write_text(features_csv(cohort.subject_ids, feats), encoding="utf-8")
    return path, feats


def _features(cfg, model, cohort):
    path = Path(cfg.output_dir) / "features.csv"
    if path.exists():
        feats = read_features(path)
        if set(feats) == set(cohort.subject_ids):
            return np.stack([feats[s] for s in cohort.subject_ids])
    return classifier.extract_features(model, model_inputs(model, cohort))


def run_evaluate(cfg: PipelineConfig):
    model = load_model(cfg.output_dir)
    cohort = load_cohort(cfg.data_dir)
    train_ids, test_ids = read_split(Path(cfg.output_dir) / "split.csv")
    F = _features(cfg, model, cohort)
    feats = dict(zip(cohort.subject_ids, F))
    reports = regressor.evaluate_feature_sets(cohort.records, feats, cfg.feature_sets, cfg.regressor,
                                              train_ids, test_ids)
    path = Path(cfg.output_dir) / "evaluation.csv"
    path.write_text(regressor.reports_csv(reports), encoding="utf-8")
    return path, reports


def class_index(name):
    try:
        return {"below": 0, "above": 1}[name]
    except KeyError:
        raise ConfigError(f"class must be 'below' or 'above', got {name!r}") from None


def run_saliency(cfg: PipelineConfig, which=None):
    which = which or cfg.saliency_class
    k = class_index(which)
    model = load_model(cfg.output_dir)
    cohort = load_cohort(cfg.data_dir)
    X = model_inputs(model, cohort)
    y = cohort.labels(model.config.threshold)
    if not np.any(y == k):
        raise DataError(f"no subjects in class {which!r}")
    smap = analysis.class_average_saliency(model, X, y, k)
    svol = analysis.restack_saliency(smap, cohort.layout, cohort.volumes[0].dims)
    views = analysis.project_views(svol, cfg.reduction)
    out = Path(cfg.output_dir) / "saliency"
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "mosaic": out / f"{which}_mosaic.pgm",
        "axial": out / f"{which}_axial.pgm",
        "sagittal": out / f"{which}_sagittal.pgm",
        "coronal": out / f"{which}_coronal.pgm",
        "volume": out / f"{which}_volume.raw",
    }
    volume.write_pgm(smap.grid, paths["mosaic"])
    # the views share one peak, so pin the scale rather than rescaling each
    for name in ("axial", "sagittal", "coronal"):
        volume.write_pgm(getattr(views, name), paths[name], value_range=(0.0, 1.0))
    volume.save_rawgrid(volume.Volume(svol.data, spacing=cohort.volumes[0].spacing, subject_id=which),
                        paths["volume"])
    return paths, smap, svol


def run_analyze(cfg: PipelineConfig):
    model = load_model(cfg.output_dir)
    cohort = load_cohort(cfg.data_dir)
    tissue_path = Path(cfg.data_dir) / "tissue_fractions.csv"
    if not tissue_path.exists() or not (Path(cfg.data_dir) / "ground_truth.csv").exists():
        raise DataError(f"missing ground truth under {cfg.data_dir}")
    tissue = synthdata.read_tissue_fractions(tissue_path)
    missing = [s for s in cohort.subject_ids if s not in tissue]
    if missing:
        raise DataError(f"no tissue fractions for {missing[:5]}")
    F = _features(cfg, model, cohort)
    T = np.stack([tissue[s] for s in cohort.subject_ids])
    noise = np.random.default_rng(cfg.noise_seed).normal(size=T.shape)
    pca, proj = analysis.pca_fit_project(F)
    y = cohort.labels(model.config.threshold)
    out = Path(cfg.output_dir)
    (out / "pca.csv").write_text(rows_csv(
        ["subject_id", "label", "pc1", "pc2"],
        [[s, int(lab), float(p[0]), float(p[1])] for s, lab, p in zip(cohort.subject_ids, y, proj)]),
        encoding="utf-8")
    d_tissue = analysis.distance_correlation(F, T)
    d_noise = analysis.distance_correlation(F, noise)
    (out / "dcor.csv").write_text(rows_csv(
        ["comparison", "dcor", "n"],
        [["features_vs_tissue", d_tissue, len(F)], ["features_vs_noise", d_noise, len(F)]]),
        encoding="utf-8")
    return pca, proj, d_tissue, d_noise
