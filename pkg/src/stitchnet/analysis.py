"""Interpretation tools: gradient saliency, 3D restacking, PCA and distance correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nncore
from .classifier import TrainedClassifier, _as_batch
from .volume import Mosaic, MosaicLayout, LayoutError, unstitch, upsample_to_mosaic


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray
    normalization: str = "raw"  # raw | peak
    class_tag: str = "single-subject"  # below | above | single-subject


@dataclass(frozen=True)
class SaliencyVolume:
    data: np.ndarray  # (nz, ny, nx)

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


def raw_saliency(model: TrainedClassifier, x):
    """``|d logit / d input|`` for a batch ``(n, H, W)`` or a single grid."""
    single = np.asarray(x).ndim == 2
    X = _as_batch(x, model.config)
    out, cache = nncore.forward(model.net, X)
    _, gx = nncore.backward(model.net, cache, np.ones_like(out))
    grads = np.abs(gx[:, 0])
    return grads[0] if single else grads


def saliency(model: TrainedClassifier, x) -> SaliencyMap:
    if np.asarray(x).ndim != 2:
        raise nncore.ShapeError(f"saliency takes one 2D grid, got shape {np.shape(x)}")
    return SaliencyMap(raw_saliency(model, x), "raw", "single-subject")


def peak_normalize(m: SaliencyMap) -> SaliencyMap:
    peak = float(m.grid.max())
    grid = m.grid / peak if peak > 0 else m.grid.copy()
    return SaliencyMap(grid, "peak", m.class_tag)


def exact_mean(stack, chunk=4096):
    """Pixelwise mean of ``(n, ...)`` maps with an exactly rounded sum.

    Exact summation makes the result independent of input order and of
    repeating the whole list.
    """
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[0]
    flat = stack.reshape(n, -1)
    out = np.empty(flat.shape[1])
    for start in range(0, flat.shape[1], chunk):
        cols = flat[:, start:start + chunk].T.tolist()
        out[start:start + chunk] = [math.fsum(c) for c in cols]
    return (out / n).reshape(stack.shape[1:])


def class_average_saliency(model, inputs, labels, which_class, batch_size=16) -> SaliencyMap:
    """Mean raw saliency over one class, then peak-normalized."""
    labels = np.asarray(labels).ravel()
    members = np.flatnonzero(labels == which_class)
    if members.size == 0:
        raise AnalysisError(f"no inputs with label {which_class}")
    inputs = np.asarray(inputs, dtype=np.float64)
    maps = np.concatenate([raw_saliency(model, inputs[members[i:i + batch_size]])
                           for i in range(0, members.size, batch_size)])
    tag = "above" if which_class == 1 else "below"
    return peak_normalize(SaliencyMap(exact_mean(maps), "raw", tag))


def restack_saliency(m: SaliencyMap, layout: MosaicLayout, original_dims=None) -> SaliencyVolume:
    """Upsample a map to mosaic resolution and unstitch it into a volume; padding is dropped."""
    if original_dims is not None:
        nx, ny, nz = original_dims
        if (nx, ny) != tuple(layout.slice_dims) or nz != layout.n_slices:
            raise LayoutError(f"layout {layout} does not match volume dims {tuple(original_dims)}")
    mosaic = upsample_to_mosaic(m.grid, layout)
    return SaliencyVolume(unstitch(mosaic).data)


def restacked_mosaic(m: SaliencyMap, layout: MosaicLayout) -> Mosaic:
    return upsample_to_mosaic(m.grid, layout)


@dataclass(frozen=True)
class Views:
    axial: np.ndarray  # (ny, nx), reduced over z
    sagittal: np.ndarray  # (nz, ny), reduced over x
    coronal: np.ndarray  # (nz, nx), reduced over y


def project_views(v: SaliencyVolume, reduction="max", normalize=True) -> Views:
    """Axial/sagittal/coronal projections sharing one peak normalization."""
    data = np.asarray(v.data, dtype=np.float64)
    reduce = {"max": np.max, "mean": np.mean}.get(reduction)
    if reduce is None:
        raise ValueError(f"reduction must be 'max' or 'mean', got {reduction!r}")
    axial, sagittal, coronal = reduce(data, axis=0), reduce(data, axis=2), reduce(data, axis=1)
    if normalize:
        peak = max(float(axial.max()), float(sagittal.max()), float(coronal.max()))
        if peak > 0:
            axial, sagittal, coronal = axial / peak, sagittal / peak, coronal / peak
    return Views(axial, sagittal, coronal)


# ---------------------------------------------------------------------------
# PCA


def jacobi_eigh(A, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Iterates until the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||A||_F)``.  Returns ``(eigenvalues, eigenvectors)`` sorted by
    descending eigenvalue, eigenvectors in columns.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"need a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    limit = tol * max(1.0, float(np.linalg.norm(A)))

    off_diag = ~np.eye(n, dtype=bool)

    def off_norm(M):
        # summed directly: total minus diagonal cancels below ~1e-8 relative
        return float(np.linalg.norm(M[off_diag]))

    for _ in range(max_sweeps):
        if off_norm(A) < limit:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                h = A[q, q] - A[p, p]
                if abs(h) + 100.0 * abs(apq) == abs(h):
                    t = apq / h  # theta**2 would overflow
                else:
                    theta = h / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        if off_norm(A) >= limit:
            raise ArithmeticError(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (2, p), rows orthonormal
    explained_variance: np.ndarray

    def project(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def pca_fit_project(features, n_components=2):
    """Top principal components of the sample covariance and the projected data.

    Each component is signed so its largest-magnitude entry is positive.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise AnalysisError(f"need an (n >= 3, p) matrix, got shape {X.shape}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if np.trace(cov) == 0:
        raise AnalysisError("features have zero total variance")
    w, V = jacobi_eigh(cov)
    comps = V[:, :n_components].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = np.maximum(w[:n_components], 0.0)
    model = PcaModel(mean, comps, var)
    return model, model.project(X)


# ---------------------------------------------------------------------------
# distance correlation


def _as_samples(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise AnalysisError(f"samples must be 1D or 2D, got shape {X.shape}")
    return X


def _double_centered_distances(X):
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=-1))
    return D - D.mean(axis=0, keepdims=True) - D.mean(axis=1, keepdims=True) + D.mean()


def distance_correlation(X, Y):
    """Sample distance correlation (biased V-statistic) between paired samples."""
    X, Y = _as_samples(X), _as_samples(Y)
    if X.shape[0] != Y.shape[0]:
        raise AnalysisError(f"sample counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise AnalysisError("need >= 2 samples")
    A = _double_centered_distances(X)
    B = _double_centered_distances(Y)
    dvar_x = float(np.mean(A * A))
    dvar_y = float(np.mean(B * B))
    if dvar_x == 0 or dvar_y == 0:
        raise AnalysisError("degenerate sample: all rows identical")
    dcov2 = max(float(np.mean(A * B)), 0.0)
    return float(min(1.0, math.sqrt(dcov2 / math.sqrt(dvar_x * dvar_y))))
