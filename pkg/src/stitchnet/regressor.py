"""Score regression from image features, demographics and lesion descriptors.

Feature vectors are always concatenated in the order

    [image (64) | demographics (11, or 4 for the baseline subset) | lesion (k)]

with absent components skipped.  The 11 demographic columns follow the
subject-table order: a, b, c, d, e, f_left, f_right, g, h, i, j.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import nncore

log = logging.getLogger(__name__)

DEMOGRAPHIC_COLUMNS = [
    ("a_years_stroke_to_scan", "a_years_stroke_to_scan"),
    ("b_vision", "b_vision_affected"),
    ("c_hearing", "c_hearing_affected"),
    ("d_gender", "d_gender"),
    ("e_lesion_count", "e_lesion_count"),
    ("f_left", "f_lesion_side_left"),
    ("f_right", "f_lesion_side_right"),
    ("g_education_years", "g_education_years"),
    ("h_age_at_stroke", "h_age_at_stroke"),
    ("i_years_since_stroke", "i_years_since_stroke"),
    ("j_handedness", "j_handedness"),
]
BASELINE_FIELDS = ("a_years_stroke_to_scan", "d_gender", "h_age_at_stroke", "j_handedness")
BINARY_FIELDS = ("b_vision_affected", "c_hearing_affected", "d_gender",
                 "f_lesion_side_left", "f_lesion_side_right", "j_handedness")
YEAR_FIELDS = ("a_years_stroke_to_scan", "g_education_years", "h_age_at_stroke", "i_years_since_stroke")
FEATURE_COMPONENTS = ("img", "demo", "baseline", "lesion")


class FeatureError(ValueError):
    pass


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


@dataclass(frozen=True)
class Demographics:
    a_years_stroke_to_scan: float
    b_vision_affected: int
    c_hearing_affected: int
    d_gender: int
    e_lesion_count: int
    f_lesion_side_left: int
    f_lesion_side_right: int
    g_education_years: float
    h_age_at_stroke: float
    i_years_since_stroke: float
    j_handedness: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ValueError(f"{f.name} is not finite: {v}")
        for name in BINARY_FIELDS:
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {getattr(self, name)}")
        for name in YEAR_FIELDS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.e_lesion_count < 0 or int(self.e_lesion_count) != self.e_lesion_count:
            raise ValueError(f"e_lesion_count must be a non-negative integer, got {self.e_lesion_count}")

    def vector(self, baseline=False):
        names = BASELINE_FIELDS if baseline else [attr for _, attr in DEMOGRAPHIC_COLUMNS]
        return np.array([float(getattr(self, n)) for n in names])


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    score: float | None
    demographics: Demographics | None = None
    lesion_features: tuple | None = None


@dataclass(frozen=True)
class FeatureBundle:
    image_features: np.ndarray | None = None
    demographics: Demographics | None = None
    lesion_features: tuple | None = None
    feature_set_tag: str = ""
    baseline: bool = False


def assemble_features(bundle: FeatureBundle):
    parts = []
    if bundle.image_features is not None:
        parts.append(np.asarray(bundle.image_features, dtype=np.float64).ravel())
    if bundle.demographics is not None:
        parts.append(bundle.demographics.vector(baseline=bundle.baseline))
    if bundle.lesion_features is not None:
        parts.append(np.asarray(bundle.lesion_features, dtype=np.float64).ravel())
    if not parts:
        raise FeatureError("feature bundle is empty")
    return np.concatenate(parts)


def parse_tag(tag):
    """Split a feature-set tag like ``demo+lesion+img`` into its components."""
    parts = [p.strip() for p in tag.split("+") if p.strip()]
    unknown = [p for p in parts if p not in FEATURE_COMPONENTS]
    if not parts or unknown:
        raise FeatureError(f"bad feature set tag {tag!r}; components are {FEATURE_COMPONENTS}")
    if "demo" in parts and "baseline" in parts:
        raise FeatureError(f"tag {tag!r} mixes demo and baseline")
    return set(parts)


def bundle_for(record: SubjectRecord, tag, image_features=None):
    parts = parse_tag(tag)
    need_demo = "demo" in parts or "baseline" in parts
    if "img" in parts and image_features is None:
        raise FeatureError(f"{record.subject_id}: tag {tag!r} needs image features")
    if need_demo and record.demographics is None:
        raise FeatureError(f"{record.subject_id}: tag {tag!r} needs demographics")
    if "lesion" in parts and record.lesion_features is None:
        raise FeatureError(f"{record.subject_id}: tag {tag!r} needs lesion features")
    return FeatureBundle(
        image_features=image_features if "img" in parts else None,
        demographics=record.demographics if need_demo else None,
        lesion_features=record.lesion_features if "lesion" in parts else None,
        feature_set_tag=tag,
        baseline="baseline" in parts,
    )


# ---------------------------------------------------------------------------
# subject table


def subject_table_header(n_lesion=0):
    return (["subject_id", "score"] + [col for col, _ in DEMOGRAPHIC_COLUMNS]
            + [f"lesion_{i}" for i in range(n_lesion)])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def subject_table_csv(records):
    n_lesion = max((len(r.lesion_features) for r in records if r.lesion_features), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(subject_table_header(n_lesion))
    for r in records:
        row = [r.subject_id, "" if r.score is None else _fmt(float(r.score))]
        if r.demographics is None:
            row += [""] * len(DEMOGRAPHIC_COLUMNS)
        else:
            row += [_fmt(getattr(r.demographics, attr)) for _, attr in DEMOGRAPHIC_COLUMNS]
        lesion = list(r.lesion_features or [])
        row += [_fmt(float(x)) for x in lesion] + [""] * (n_lesion - len(lesion))
        w.writerow(row)
    return buf.getvalue()


def write_subject_table(records, path):
    Path(path).write_text(subject_table_csv(records), encoding="utf-8")


def read_subject_table(path):
    """Parse the subject CSV.  Demographic and lesion columns may be absent or blank."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "subject_id" not in header:
            raise FeatureError(f"{path}: missing subject_id column")
        demo_cols = [col for col, _ in DEMOGRAPHIC_COLUMNS]
        present = [c for c in demo_cols if c in header]
        if present and len(present) != len(demo_cols):
            missing = sorted(set(demo_cols) - set(present))
            raise FeatureError(f"{path}: partial demographic columns, missing {missing}")
        lesion_cols = sorted((c for c in header if c.startswith("lesion_")), key=lambda c: int(c[7:]))
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                score = float(row["score"]) if row.get("score") else None
                demo = None
                if present and all(row[c] != "" for c in demo_cols):
                    values = {}
                    for col, attr in DEMOGRAPHIC_COLUMNS:
                        x = float(row[col])
                        if attr in BINARY_FIELDS or attr == "e_lesion_count":
                            x = int(x)
                        values[attr] = x
                    demo = Demographics(**values)
                lesion = tuple(float(row[c]) for c in lesion_cols if row[c] != "") or None
            except ValueError as exc:
                raise FeatureError(f"{path}:{lineno}: {exc}") from None
            records.append(SubjectRecord(row["subject_id"], score, demo, lesion))
    return records


# ---------------------------------------------------------------------------
# standardization and the regressor


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.means.shape[0]:
            raise FeatureError(f"expected {self.means.shape[0]} features, got {X.shape[-1]}")
        return (X - self.means) / self.stds


def standardize(train_matrix):
    """Fit per-column z-scoring; zero-variance columns keep std 1.

    Returns ``(means, stds, transform)``.
    """
    X = np.asarray(train_matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise FeatureError(f"need a 2D matrix with >= 2 rows, got shape {X.shape}")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    scaler = Standardizer(means, stds)
    return means, stds, scaler.transform


@dataclass(frozen=True)
class RegressorConfig:
    hidden_units: int = 16
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValueError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainedRegressor:
    net: nncore.Network
    scaler: Standardizer
    target_mean: float
    target_std: float
    config: RegressorConfig
    loss_log: list

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out, _ = nncore.forward(self.net, self.scaler.transform(X))
        return out[:, 0] * self.target_std + self.target_mean


def regressor_layers(n_in, hidden):
    return [nncore.dense(n_in, hidden), nncore.relu(), nncore.dense(hidden, 1)]


def train_regressor(features, scores, cfg: RegressorConfig = RegressorConfig()):
    """Fit dense(in, hidden) -> relu -> dense(hidden, 1) with Adam on MSE.

    Inputs are z-scored with training statistics and so is the target; the
    returned model undoes both.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(scores, dtype=np.float64).ravel()
    if X.ndim != 2:
        raise FeatureError(f"features must be 2D, got shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise FeatureError(f"{X.shape[0]} feature rows but {y.shape[0]} scores")
    if X.shape[0] < 10:
        raise FeatureError(f"need >= 10 training rows, got {X.shape[0]}")
    means, stds, transform = standardize(X)
    Xs = transform(X)
    t_mean = float(y.mean())
    t_std = float(y.std()) or 1.0
    ys = ((y - t_mean) / t_std)[:, None]

    net = nncore.build_network(regressor_layers(X.shape[1], cfg.hidden_units), (X.shape[1],), cfg.seed)
    params = net.flat_params()
    state = nncore.AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1,
                                        beta2=cfg.beta2, epsilon=cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = nncore.forward(net, Xs[idx])
            loss, g = nncore.loss_mse(out, ys[idx])
            if not np.isfinite(loss):
                raise nncore.NonFiniteError(f"regressor loss became {loss} in epoch {epoch}")
            grads, _ = nncore.backward(net, cache, g)
            params, state = nncore.adam_step(params, [a for grp in grads for a in grp], state)
            net = net.with_flat_params(params)
            total += loss * len(idx)
        losses.append(total / n)
    log.debug("regressor final training loss %.6f", losses[-1])
    return TrainedRegressor(net, Standardizer(means, stds), t_mean, t_std, cfg, losses)


# ---------------------------------------------------------------------------
# metrics


def _pair(y_true, y_pred):
    a = np.asarray(y_true, dtype=np.float64).ravel()
    b = np.asarray(y_pred, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise MetricError(f"need >= 2 samples, got {a.size}")
    return a, b


def r_squared(y_true, y_pred):
    """``1 - SS_res / SS_tot``; undefined for constant ``y_true``."""
    y, p = _pair(y_true, y_pred)
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0:
        raise MetricError("r_squared undefined: y_true has zero variance")
    ss_res = float(np.sum((y - p) ** 2))
    return 1.0 - ss_res / ss_tot


def pearson_r(x, y):
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise MetricError("pearson_r undefined: constant input")
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


@dataclass(frozen=True)
class EvalReport:
    feature_set_tag: str
    r_squared: float
    pearson_r: float
    n: int
    seed: int

    def __post_init__(self):
        if not -1.0 <= self.pearson_r <= 1.0:
            raise ValueError(f"pearson_r out of range: {self.pearson_r}")
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")


TABLE_TAGS = ("baseline", "img", "demo", "demo+img", "demo+lesion", "demo+lesion+img")


def feature_matrix(records, tag, image_features=None):
    image_features = image_features or {}
    rows = [assemble_features(bundle_for(r, tag, image_features.get(r.subject_id))) for r in records]
    return np.vstack(rows)


def evaluate_feature_sets(records, image_features, tags, cfg: RegressorConfig, train_ids, test_ids):
    """Train and score one regressor per feature-set tag on a fixed split.

    ``image_features`` maps subject_id to its 64-vector (may be None when no
    tag uses ``img``).
    """
    by_id = {r.subject_id: r for r in records}
    unknown = [s for s in list(train_ids) + list(test_ids) if s not in by_id]
    if unknown:
        raise FeatureError(f"split names subjects missing from the table: {unknown[:5]}")
    train = [by_id[s] for s in train_ids]
    test = [by_id[s] for s in test_ids]
    for r in train + test:
        if r.score is None:
            raise FeatureError(f"{r.subject_id}: no score")
    y_train = np.array([r.score for r in train])
    y_test = np.array([r.score for r in test])
    reports = []
    for tag in tags:
        X_train = feature_matrix(train, tag, image_features)
        X_test = feature_matrix(test, tag, image_features)
        model = train_regressor(X_train, y_train, cfg)
        pred = model.predict(X_test)
        reports.append(EvalReport(tag, r_squared(y_test, pred), pearson_r(y_test, pred), len(test), cfg.seed))
        log.info("feature set %-18s R2 %.3f  r %.3f", tag, reports[-1].r_squared, reports[-1].pearson_r)
    return reports


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature_set", "r_squared", "pearson_r", "n", "seed"])
    for r in reports:
        w.writerow([r.feature_set_tag, repr(r.r_squared), repr(r.pearson_r), r.n, r.seed])
    return buf.getvalue()
