"""Tiny CNN that labels stitched scans as above/below a score threshold.

The penultimate representation is the flattened output of the last conv
block (4 channels x 4 x 4 = 64 values), which is what downstream regression
and analysis consume.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nncore
from .nncore import LayerSpec

log = logging.getLogger(__name__)

FEATURE_DIM = 64
MAX_PARAMS = 1000


class TrainingError(ValueError):
    pass


def label_from_score(score, threshold=60.0):
    """1 if ``score >= threshold`` else 0.  Ties go to the upper class."""
    if not np.isfinite(score):
        raise ValueError(f"score is not finite: {score}")
    return int(score >= threshold)


def build_reference_architecture(input_size=256):
    """Three conv/relu/maxpool blocks (1->4->6->4 channels) and a 64->1 dense head.

    Pool size is chosen so the last block is 4x4; at 256 it is 4.
    """
    pool = round((input_size / 4) ** (1 / 3))
    if pool < 1 or 4 * pool ** 3 != input_size:
        raise ValueError(f"input size {input_size} is not 4 * p**3 for an integer pool size p")
    return [
        nncore.conv2d(1, 4), nncore.relu(), nncore.maxpool(pool),
        nncore.conv2d(4, 6), nncore.relu(), nncore.maxpool(pool),
        nncore.conv2d(6, 4), nncore.relu(), nncore.maxpool(pool),
        nncore.flatten(),
        nncore.dense(FEATURE_DIM, 1),
    ]


@dataclass(frozen=True)
class ClassifierConfig:
    input_size: tuple = (256, 256)
    threshold: float = 60.0
    architecture: tuple = None
    epochs: int = 16
    batch_size: int = 8
    seed: int = 0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.architecture is None:
            object.__setattr__(self, "architecture", tuple(build_reference_architecture(self.input_size[0])))
        else:
            object.__setattr__(self, "architecture", tuple(
                a if isinstance(a, LayerSpec) else LayerSpec.from_dict(a) for a in self.architecture))
        shapes = nncore.shape_chain(self.architecture, self.input_shape)
        if shapes[-1] != (1,):
            raise ValueError(f"architecture must end in a single logit, ends in {shapes[-1]}")
        feat = shapes[flatten_index(self.architecture) + 1]
        if feat != (FEATURE_DIM,):
            raise ValueError(f"penultimate representation must have {FEATURE_DIM} values, has {feat}")
        if nncore.count_params(self.architecture) > MAX_PARAMS:
            raise ValueError(f"architecture has {nncore.count_params(self.architecture)} parameters, "
                             f"limit is {MAX_PARAMS}")

    @property
    def input_shape(self):
        return (1,) + self.input_size

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["architecture"] = [a.to_dict() for a in self.architecture]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def flatten_index(layers):
    idx = [i for i, spec in enumerate(layers) if spec.kind == "flatten"]
    if not idx:
        raise ValueError("architecture has no flatten layer")
    return idx[-1]


@dataclass
class TrainedClassifier:
    config: ClassifierConfig
    net: nncore.Network
    training_log: list = field(default_factory=list)  # dicts: epoch, loss, accuracy
    # how raw volumes become inputs: intensity bounds and mosaic layout
    preprocessing: dict = field(default_factory=dict)

    @property
    def param_count(self):
        return self.net.param_count

    @property
    def weights(self):
        return self.net.flat_params()


def _as_batch(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == cfg.input_size:
        x = x[None, None]
    elif x.ndim == 3 and x.shape[1:] == cfg.input_size:
        x = x[:, None]
    if x.shape[1:] != cfg.input_shape:
        raise nncore.ShapeError(f"expected input {cfg.input_size}, got {x.shape}")
    return x


def _adam_for(net, cfg):
    return nncore.AdamState.for_params(net.flat_params(), lr=cfg.lr, beta1=cfg.beta1,
                                       beta2=cfg.beta2, epsilon=cfg.epsilon)


def train(images, labels, cfg: ClassifierConfig = ClassifierConfig()):
    """Minimize BCE with Adam over seeded mini-batches.  Bit-reproducible for a given seed.

    ``images`` is ``(n, H, W)`` at ``cfg.input_size``; ``labels`` are 0/1.
    """
    X = _as_batch(images, cfg)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if X.shape[0] != y.shape[0]:
        raise TrainingError(f"{X.shape[0]} images but {y.shape[0]} labels")
    counts = [int((y == c).sum()) for c in (0, 1)]
    if min(counts) < 2:
        raise TrainingError(f"need >= 2 examples per class, got {counts[0]} below / {counts[1]} above")

    net = nncore.build_network(cfg.architecture, cfg.input_shape, cfg.seed)
    params = net.flat_params()
    state = _adam_for(net, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = nncore.forward(net, X[idx])
            logits = out[:, 0]
            loss, g = nncore.loss_bce_logits(logits, y[idx])
            if not np.isfinite(loss):
                raise nncore.NonFiniteError(f"classifier loss became {loss} in epoch {epoch}")
            grads, _ = nncore.backward(net, cache, g[:, None], input_grad=False)
            params, state = nncore.adam_step(params, [a for grp in grads for a in grp], state)
            net = net.with_flat_params(params)
            loss_sum += loss * len(idx)
            correct += int(((logits >= 0) == (y[idx] == 1)).sum())
        history.append({"epoch": epoch + 1, "loss": loss_sum / n, "accuracy": correct / n})
        log.debug("epoch %d loss %.4f acc %.3f", epoch + 1, history[-1]["loss"], history[-1]["accuracy"])
    return TrainedClassifier(cfg, net, history)


def logits(model: TrainedClassifier, images, batch_size=32):
    X = _as_batch(images, model.config)
    out = [nncore.forward(model.net, X[i:i + batch_size])[0][:, 0] for i in range(0, X.shape[0], batch_size)]
    return np.concatenate(out)


def predict(model: TrainedClassifier, x):
    """``(probability, logit)`` for one input grid."""
    z = float(logits(model, x)[0])
    p = float(nncore._sigmoid(np.array([z]))[0])
    return p, z


def accuracy(model, images, labels):
    z = logits(model, images)
    return float(np.mean((z >= 0) == (np.asarray(labels) == 1)))


def extract_features(model: TrainedClassifier, x, batch_size=32):
    """Flattened final-conv activations: a 64-vector for one grid, ``(n, 64)`` for a stack."""
    single = np.asarray(x).ndim == 2
    X = _as_batch(x, model.config)
    k = flatten_index(model.net.layers)
    feats = []
    for i in range(0, X.shape[0], batch_size):
        _, cache = nncore.forward(model.net, X[i:i + batch_size])
        feats.append(cache.activations[k])
    feats = np.concatenate(feats)
    return feats[0] if single else feats


# ---------------------------------------------------------------------------
# folds and cross-validation


def stratified_folds(labels, k=5, seed=0, groups=None):
    """Partition indices into ``k`` validation folds, stratified by label.

    Records sharing a group (subject id) always land in the same fold.
    Returns a list of ``k`` sorted index arrays.
    """
    labels = np.asarray(labels).ravel()
    n = labels.size
    if groups is None:
        groups = np.arange(n)
    groups = np.asarray(groups)
    uniq, first = np.unique(groups, return_index=True)
    group_label = labels[first]
    for c in np.unique(labels):
        if (group_label == c).sum() < k:
            raise TrainingError(f"class {c} has {(group_label == c).sum()} subjects, fewer than {k} folds")
    rng = np.random.default_rng(seed)
    fold_of_group = {}
    slot = 0
    for c in sorted(np.unique(group_label)):
        members = uniq[group_label == c]
        for gid in members[rng.permutation(members.size)]:
            fold_of_group[gid] = slot % k
            slot += 1
    fold_ids = np.array([fold_of_group[g] for g in groups])
    return [np.flatnonzero(fold_ids == f) for f in range(k)]


def holdout_split(labels, test_size, seed=0):
    """Stratified ``(train_idx, test_idx)`` with ``test_size`` held-out records."""
    labels = np.asarray(labels).ravel()
    n = labels.size
    if not 0 < test_size < n:
        raise ValueError(f"test_size must be in (0, {n}), got {test_size}")
    rng = np.random.default_rng(seed)
    test = []
    classes = sorted(np.unique(labels))
    quota = {c: int(round(test_size * (labels == c).sum() / n)) for c in classes}
    quota[classes[-1]] += test_size - sum(quota.values())
    for c in classes:
        idx = np.flatnonzero(labels == c)
        test.extend(idx[rng.permutation(idx.size)[:quota[c]]])
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


@dataclass
class CVResult:
    fold_accuracies: list
    folds: list

    @property
    def mean_accuracy(self):
        return float(np.mean(self.fold_accuracies))


def cross_validate(images, labels, cfg: ClassifierConfig, k=5, groups=None):
    X = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels).ravel()
    folds = stratified_folds(y, k, cfg.seed, groups)
    accs = []
    for f, val in enumerate(folds):
        tr = np.setdiff1d(np.arange(y.size), val)
        model = train(X[tr], y[tr], cfg)
        accs.append(accuracy(model, X[val], y[val]))
        log.info("fold %d/%d: validation accuracy %.3f", f + 1, k, accs[-1])
    return CVResult(accs, folds)


# ---------------------------------------------------------------------------
# SNET checkpoints
#
# "SNET" | version u32 | metadata length u64 | metadata JSON (UTF-8)
# then per weight tensor: rank u32 | dims u64 * rank | values f64
# All integers and floats little-endian.

SNET_MAGIC = b"SNET"
SNET_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: TrainedClassifier):
    meta = {
        "architecture": [a.to_dict() for a in model.net.layers],
        "input_shape": list(model.net.input_shape),
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "param_count": model.param_count,
        "training_log": model.training_log,
        "preprocessing": model.preprocessing,
    }
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [SNET_MAGIC, struct.pack("<I", SNET_VERSION), struct.pack("<Q", len(text)), text]
    for a in model.net.flat_params():
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_from_bytes(raw):
    try:
        return _parse_checkpoint(raw)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def _parse_checkpoint(raw):
    if raw[:4] != SNET_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != SNET_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + meta_len
    if pos > len(raw):
        raise CheckpointError("truncated metadata")
    meta = json.loads(raw[16:pos].decode("utf-8"))
    tensors = []
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise CheckpointError("truncated tensor header")
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        end = pos + 8 * count
        if end > len(raw):
            raise CheckpointError("truncated tensor data")
        tensors.append(np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64).reshape(dims))
        pos = end
    cfg = ClassifierConfig.from_dict(meta["config"])
    layers = [LayerSpec.from_dict(d) for d in meta["architecture"]]
    template = nncore.Network(layers, tuple(meta["input_shape"]))
    expected = [p.shape for p in template.flat_params()]
    if [t.shape for t in tensors] != expected:
        raise CheckpointError(f"tensor shapes {[t.shape for t in tensors]} do not match architecture {expected}")
    net = template.with_flat_params(tensors)
    if net.param_count != meta["param_count"]:
        raise CheckpointError(f"param_count {meta['param_count']} disagrees with tensors ({net.param_count})")
    return TrainedClassifier(cfg, net, meta["training_log"], meta.get("preprocessing", {}))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


def model_summary(model_or_cfg):
    """Human-readable layer table with parameter counts."""
    layers = model_or_cfg.config.architecture if isinstance(model_or_cfg, TrainedClassifier) \
        else model_or_cfg.architecture
    input_shape = (1,) + tuple(
        (model_or_cfg.config if isinstance(model_or_cfg, TrainedClassifier) else model_or_cfg).input_size)
    shapes = nncore.shape_chain(layers, input_shape)
    lines = [f"{'#':>2}  {'layer':<10} {'output shape':<16} {'params':>6}"]
    total = 0
    for i, spec in enumerate(layers):
        n = nncore.count_params([spec])
        total += n
        lines.append(f"{i:>2}  {spec.kind:<10} {str(shapes[i + 1]):<16} {n:>6}")
    lines.append(f"trainable parameters: {total}")
    lines.append(f"penultimate representation: {shapes[flatten_index(layers) + 1][0]} values")
    return "\n".join(lines)
