"""Sequential layer stack with exact backpropagation, losses, Adam and gradient checking.

Everything runs in float64.  Activations are batched: image tensors are
``(batch, channels, height, width)`` and vectors are ``(batch, features)``.
A network is described by a list of :class:`LayerSpec` plus the input shape
of a single example (without the batch axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "maxpool", "relu", "sigmoid", "dense", "flatten")


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    in_features: int | None = None
    out_features: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "maxpool") and (self.kernel is None or self.kernel < 1):
            raise ValueError(f"{self.kind} kernel must be >= 1, got {self.kernel}")
        if self.kind == "maxpool" and (self.stride is None or self.stride < 1):
            raise ValueError(f"maxpool stride must be >= 1, got {self.stride}")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conv2d(cin, cout, kernel=3, stride=1, padding="same"):
    if padding == "same":
        padding = kernel // 2
    return LayerSpec("conv2d", in_channels=cin, out_channels=cout, kernel=kernel,
                     stride=stride, padding=padding)


def maxpool(kernel, stride=None):
    return LayerSpec("maxpool", kernel=kernel, stride=kernel if stride is None else stride)


def dense(n_in, n_out):
    return LayerSpec("dense", in_features=n_in, out_features=n_out)


def relu():
    return LayerSpec("relu")


def sigmoid():
    return LayerSpec("sigmoid")


def flatten():
    return LayerSpec("flatten")


# ---------------------------------------------------------------------------
# per-kind shape rules, forward and backward


def _output_shape(spec, shape, index):
    def fail(expected):
        raise ShapeError(f"layer {index} ({spec.kind}): expected input {expected}, got {tuple(shape)}")

    if spec.kind == "conv2d":
        if len(shape) != 3 or shape[0] != spec.in_channels:
            fail(f"({spec.in_channels}, H, W)")
        _, h, w = shape
        k, s, p = spec.kernel, spec.stride, spec.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            fail(f"spatial dims >= {k - 2 * p}")
        return (spec.out_channels, ho, wo)
    if spec.kind == "maxpool":
        if len(shape) != 3:
            fail("(C, H, W)")
        c, h, w = shape
        k, s = spec.kernel, spec.stride
        if h < k or w < k:
            fail(f"spatial dims >= {k}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if spec.kind == "dense":
        if len(shape) != 1 or shape[0] != spec.in_features:
            fail(f"({spec.in_features},)")
        return (spec.out_features,)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    return tuple(shape)


def _param_shapes(spec):
    if spec.kind == "conv2d":
        k = spec.kernel
        return [(spec.out_channels, spec.in_channels, k, k), (spec.out_channels,)]
    if spec.kind == "dense":
        return [(spec.out_features, spec.in_features), (spec.out_features,)]
    return []


def _conv_windows(x, spec):
    p, k, s = spec.padding, spec.kernel, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s], xp.shape


def _conv_forward(spec, params, x):
    W, b = params
    win, padded_shape = _conv_windows(x, spec)
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), (win, padded_shape)


def _conv_backward(spec, params, x, aux, g, need_dx=True):
    W, _ = params
    win, padded_shape = aux
    p, k, s = spec.padding, spec.kernel, spec.stride
    dW = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    db = g.sum(axis=(0, 2, 3))
    if not need_dx:
        return [dW, db], None
    ho, wo = g.shape[2], g.shape[3]
    cols = np.tensordot(g, W, axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
    dxp = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:padded_shape[2] - p, p:padded_shape[3] - p] if p else dxp
    return [dW, db], dx


def _pool_views(x, k, s, ho, wo):
    """Strided views ``(i, j, view)`` over the window offsets, in row-major window order."""
    for i in range(k):
        for j in range(k):
            yield i, j, x[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def _pool_forward(spec, params, x):
    k, s = spec.kernel, spec.stride
    ho, wo = (x.shape[2] - k) // s + 1, (x.shape[3] - k) // s + 1
    views = list(_pool_views(x, k, s, ho, wo))
    out = views[0][2].copy()
    for _, _, v in views[1:]:
        np.maximum(out, v, out=out)
    # walk offsets backwards so the first maximum in row-major order wins ties
    idx = np.zeros(out.shape, dtype=np.int64)
    for i, j, v in reversed(views):
        idx[v == out] = i * k + j
    return out, idx


def _pool_backward(spec, params, x, idx, g):
    k, s = spec.kernel, spec.stride
    ho, wo = g.shape[2], g.shape[3]
    dx = np.zeros_like(x)
    for i, j, v in _pool_views(dx, k, s, ho, wo):
        v += g * (idx == i * k + j)
    return [], dx


def _relu_forward(spec, params, x):
    return np.maximum(x, 0.0), None


def _relu_backward(spec, params, x, aux, g):
    return [], g * (x > 0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_forward(spec, params, x):
    y = _sigmoid(x)
    return y, y


def _sigmoid_backward(spec, params, x, y, g):
    return [], g * y * (1.0 - y)


def _dense_forward(spec, params, x):
    W, b = params
    return x @ W.T + b, None


def _dense_backward(spec, params, x, aux, g):
    W, _ = params
    return [g.T @ x, g.sum(axis=0)], g @ W


def _flatten_forward(spec, params, x):
    return x.reshape(x.shape[0], -1), x.shape


def _flatten_backward(spec, params, x, shape, g):
    return [], g.reshape(shape)


FORWARD = {
    "conv2d": _conv_forward,
    "maxpool": _pool_forward,
    "relu": _relu_forward,
    "sigmoid": _sigmoid_forward,
    "dense": _dense_forward,
    "flatten": _flatten_forward,
}

BACKWARD = {
    "conv2d": _conv_backward,
    "maxpool": _pool_backward,
    "relu": _relu_backward,
    "sigmoid": _sigmoid_backward,
    "dense": _dense_backward,
    "flatten": _flatten_backward,
}


# ---------------------------------------------------------------------------
# networks


@dataclass
class Network:
    layers: list
    input_shape: tuple
    params: list = field(default_factory=list)  # one list of arrays per layer

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.shapes = shape_chain(self.layers, self.input_shape)
        if not self.params:
            self.params = [[np.zeros(s) for s in _param_shapes(spec)] for spec in self.layers]
        if len(self.params) != len(self.layers):
            raise ShapeError(f"{len(self.params)} parameter groups for {len(self.layers)} layers")
        for i, (spec, group) in enumerate(zip(self.layers, self.params)):
            expected = _param_shapes(spec)
            got = [tuple(np.shape(a)) for a in group]
            if got != expected:
                raise ShapeError(f"layer {i} ({spec.kind}): parameter shapes {got}, expected {expected}")
        self.params = [[np.asarray(a, dtype=np.float64) for a in group] for group in self.params]

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def param_count(self):
        return sum(a.size for group in self.params for a in group)

    def flat_params(self):
        return [a for group in self.params for a in group]

    def with_flat_params(self, flat):
        flat = list(flat)
        groups, pos = [], 0
        for group in self.params:
            groups.append([np.asarray(a, dtype=np.float64) for a in flat[pos:pos + len(group)]])
            pos += len(group)
        return Network(list(self.layers), self.input_shape, groups)

    def copy(self):
        return self.with_flat_params([a.copy() for a in self.flat_params()])


def shape_chain(layers, input_shape):
    """Per-layer shapes: ``[input, after layer 0, after layer 1, ...]``."""
    shapes = [tuple(input_shape)]
    for i, spec in enumerate(layers):
        shapes.append(_output_shape(spec, shapes[-1], i))
    return shapes


def count_params(layers):
    return sum(int(np.prod(s)) for spec in layers for s in _param_shapes(spec))


def init_params(layers, input_shape, seed):
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    shape_chain(layers, input_shape)
    rng = np.random.default_rng(seed)
    params = []
    for spec in layers:
        if spec.kind == "conv2d":
            k2 = spec.kernel * spec.kernel
            fan_in, fan_out = spec.in_channels * k2, spec.out_channels * k2
        elif spec.kind == "dense":
            fan_in, fan_out = spec.in_features, spec.out_features
        else:
            params.append([])
            continue
        wshape, bshape = _param_shapes(spec)
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params.append([rng.uniform(-limit, limit, size=wshape), np.zeros(bshape)])
    return params


def build_network(layers, input_shape, seed=0):
    return Network(list(layers), input_shape, init_params(layers, input_shape, seed))


@dataclass
class Cache:
    inputs: list  # input to each layer
    aux: list
    output: np.ndarray

    @property
    def activations(self):
        """Output of every layer, in order."""
        return self.inputs[1:] + [self.output]


def forward(net: Network, x):
    """Run a batch through the stack.  ``x`` is ``(batch,) + net.input_shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0 ({net.layers[0].kind}): expected input "
                         f"(batch,) + {net.input_shape}, got {x.shape}")
    inputs, aux = [], []
    for spec, group in zip(net.layers, net.params):
        inputs.append(x)
        x, a = FORWARD[spec.kind](spec, group, x)
        aux.append(a)
    return x, Cache(inputs, aux, x)


def backward(net: Network, cache: Cache, output_grad, input_grad=True):
    """Return ``(param_grads, input_grad)`` with param_grads grouped like ``net.params``.

    With ``input_grad=False`` a leading conv layer skips its input gradient and
    None is returned in its place.
    """
    if len(cache.inputs) != len(net.layers):
        raise ShapeError(f"cache holds {len(cache.inputs)} layers, network has {len(net.layers)}")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"output grad shape {g.shape} does not match output {cache.output.shape}")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        x = cache.inputs[i]
        if x.shape[1:] != net.shapes[i]:
            raise ShapeError(f"layer {i} ({spec.kind}): cached input {x.shape[1:]} does not "
                             f"match network shape {net.shapes[i]}")
        if i == 0 and not input_grad and spec.kind == "conv2d":
            grads[i], g = BACKWARD[spec.kind](spec, net.params[i], x, cache.aux[i], g, need_dx=False)
        else:
            grads[i], g = BACKWARD[spec.kind](spec, net.params[i], x, cache.aux[i], g)
    return grads, g


# ---------------------------------------------------------------------------
# losses


def loss_bce_logits(logit, label):
    """Mean binary cross-entropy on logits and its gradient w.r.t. each logit.

    Scalars in, scalars out; arrays are averaged over all elements.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = _sigmoid(np.atleast_1d(z)).reshape(z.shape) - y
    if z.ndim == 0:
        return float(per), float(grad)
    return float(per.mean()), grad / z.size


def loss_mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(first_moment=[np.zeros_like(p) for p in params],
                   second_moment=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``; inputs are untouched."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state = AdamState.for_params(params, lr=state.lr, beta1=state.beta1,
                                     beta2=state.beta2, epsilon=state.epsilon)
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"parameter {i}: shape {np.shape(p)} but gradient {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i} at step {state.step_count + 1}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(state.lr, b1, b2, state.epsilon, t, new_m, new_v)
    return new_p, new_state


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic, numeric):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def grad_check(net: Network, x, loss, step=1e-5, wrt="params"):
    """Max relative error between backprop and central differences.

    ``loss`` maps the network output to ``(value, d value / d output)``.
    ``wrt`` is ``"params"``, ``"input"`` or ``"both"``.
    """
    x = np.asarray(x, dtype=np.float64)
    out, cache = forward(net, x)
    _, g = loss(out)
    grads, gx = backward(net, cache, g)

    def value(n, inp):
        return loss(forward(n, inp)[0])[0]

    worst = 0.0
    if wrt in ("params", "both"):
        for li, group in enumerate(net.params):
            for pi, p in enumerate(group):
                analytic = grads[li][pi]
                numeric = np.empty_like(p)
                for idx in np.ndindex(p.shape):
                    orig = p[idx]
                    p[idx] = orig + step
                    fp = value(net, x)
                    p[idx] = orig - step
                    fm = value(net, x)
                    p[idx] = orig
                    numeric[idx] = (fp - fm) / (2 * step)
                if p.size:
                    worst = max(worst, float(relative_error(analytic, numeric).max()))
    if wrt in ("input", "both"):
        numeric = np.empty_like(x)
        xp = x.copy()
        for idx in np.ndindex(x.shape):
            xp[idx] = x[idx] + step
            fp = value(net, xp)
            xp[idx] = x[idx] - step
            fm = value(net, xp)
            xp[idx] = x[idx]
            numeric[idx] = (fp - fm) / (2 * step)
        worst = max(worst, float(relative_error(gx, numeric).max()))
    return worst
