"""Layers with explicit forward/backward passes.

All layers work on batches: feature maps are ``[N, C, H, W]`` and vectors
``[N, F]``.  A single sample (``[C, H, W]`` or ``[F]``) is accepted by the
functional helpers and promoted to a batch of one.

Every layer keeps learnable tensors in ``params`` and the matching gradients
in ``grads`` (same keys).  Non-learnable state that still belongs in a
checkpoint (batch-norm running statistics) lives in ``buffers``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError, StateError
from .tensor import DTYPE, gaussian_fill

# upper bound on the im2col buffer built per chunk
_COLS_BYTES = 192 * 2**20


def he_std(fan_in):
    return float(np.sqrt(2.0 / fan_in))


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def out_shape(self, shape):
        """Per-sample output shape for a per-sample input shape."""
        return tuple(shape)

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def describe(self):
        return type(self).__name__


def _chunk(per_sample_bytes):
    return max(1, _COLS_BYTES // max(per_sample_bytes, 1))


def correlate(x, kernels, biases=None):
    """Valid cross-correlation of ``[C,H,W]`` (or ``[N,C,H,W]``) with
    ``[K,C,kh,kw]`` kernels; any kernel extent."""
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    kh, kw = kernels.shape[2:]
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"kernels expect {kernels.shape[1]} planes, got {x.shape[1]}")
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"input {x.shape[2:]} smaller than kernel {(kh, kw)}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,kcij->nkhw", win, kernels)
    if biases is not None:
        out += np.asarray(biases, dtype=DTYPE)[None, :, None, None]
    return out[0] if single else out


class Conv2D(Layer):
    """Valid (unpadded) stride-1 cross-correlation.

    ``kernels`` is ``[out_maps, in_planes, k, k]`` and ``biases`` is
    ``[out_maps]``.  With ``input_grad=False`` the backward pass skips the
    input gradient, which is what the first layer of a network wants.
    """

    def __init__(self, in_planes, out_maps, k, rng=None, std=None, bias=0.0, input_grad=True):
        super().__init__()
        if k < 1 or k % 2 == 0:
            raise ParameterError(f"kernel size must be odd and positive, got {k}")
        self.in_planes, self.out_maps, self.k = in_planes, out_maps, k
        self.input_grad = input_grad
        shape = (out_maps, in_planes, k, k)
        if rng is None:
            self.params["kernels"] = np.zeros(shape, dtype=DTYPE)
        else:
            std = std if std is not None else he_std(in_planes * k * k)
            self.params["kernels"] = gaussian_fill(shape, rng, std)
        self.params["biases"] = np.full(out_maps, bias, dtype=DTYPE)
        self.zero_grad()
        self._x = None

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_planes:
            raise ShapeError(f"conv{self.k} expects {self.in_planes} planes, got {c}")
        if h < self.k or w < self.k:
            raise ShapeError(f"conv{self.k} needs extent >= {self.k}, got {h}x{w}")
        return (self.out_maps, h - self.k + 1, w - self.k + 1)

    def _cols(self, x):
        # columns laid out [C*k*k, N*Ho*Wo] so the matmul output is channel-major
        n, c, _, _ = x.shape
        k = self.k
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, -1)

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"conv expects [N,C,H,W], got shape {x.shape}")
        n = x.shape[0]
        ho, wo = self.out_shape(x.shape[1:])[1:]
        w2 = self.params["kernels"].reshape(self.out_maps, -1)
        out = np.empty((self.out_maps, n, ho, wo), dtype=DTYPE)
        step = _chunk(ho * wo * w2.shape[1] * 8)
        for s in range(0, n, step):
            xs = x[s : s + step]
            out[:, s : s + len(xs)] = (w2 @ self._cols(xs)).reshape(-1, len(xs), ho, wo)
        out += self.params["biases"][:, None, None, None]
        self._x = x
        return out.transpose(1, 0, 2, 3)

    def backward(self, grad):
        if self._x is None:
            raise StateError("conv backward called before forward")
        x = self._x
        n, c, h, w = x.shape
        k = self.k
        _, kout, ho, wo = grad.shape
        w2 = self.params["kernels"].reshape(kout, -1)
        gk = np.zeros_like(w2)
        dx = np.zeros((c, n, h, w), dtype=DTYPE) if self.input_grad else None
        step = _chunk(ho * wo * w2.shape[1] * 8)
        for s in range(0, n, step):
            xs = x[s : s + step]
            m = len(xs)
            g = grad[s : s + m].transpose(1, 0, 2, 3).reshape(kout, -1)
            gk += g @ self._cols(xs).T
            if dx is not None:
                dcols = (w2.T @ g).reshape(c, k, k, m, ho, wo)
                dxs = dx[:, s : s + m]
                for i in range(k):
                    for j in range(k):
                        dxs[:, :, i : i + ho, j : j + wo] += dcols[:, i, j]
        self.grads["kernels"] = gk.reshape(self.params["kernels"].shape)
        self.grads["biases"] = grad.sum(axis=(0, 2, 3))
        return None if dx is None else dx.transpose(1, 0, 2, 3)

    def describe(self):
        return f"conv{self.k}({self.in_planes}->{self.out_maps})"


class MaxPool2D(Layer):
    """Max pooling with window ``p`` and stride ``s``.

    Ties route the gradient to the first maximal cell in row-major order.
    """

    def __init__(self, p, s=1):
        super().__init__()
        if p < 1 or s < 1:
            raise ParameterError("pool size and stride must be positive")
        self.p, self.s = p, s
        self._cache = None

    def out_shape(self, shape):
        c, h, w = shape
        if h < self.p or w < self.p:
            raise ShapeError(f"pool{self.p} needs extent >= {self.p}, got {h}x{w}")
        return (c, (h - self.p) // self.s + 1, (w - self.p) // self.s + 1)

    def forward(self, x, train=False):
        p, s = self.p, self.s
        _, ho, wo = self.out_shape(x.shape[1:])
        # separable max: along columns first, then rows; keeps first-in-row-major ties
        win_c = sliding_window_view(x, p, axis=3)[:, :, :, ::s][:, :, :, :wo]
        a_col = win_c.argmax(axis=-1)
        v_col = np.take_along_axis(win_c, a_col[..., None], axis=-1)[..., 0]
        win_r = sliding_window_view(v_col, p, axis=2)[:, :, ::s][:, :, :ho]
        a_row = win_r.argmax(axis=-1)
        out = np.take_along_axis(win_r, a_row[..., None], axis=-1)[..., 0]
        rows = np.arange(ho)[:, None] * s + a_row
        cols = np.take_along_axis(a_col, rows, axis=2) + np.arange(wo)[None, :] * s
        self._cache = (x.shape, rows, cols)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        if self._cache is None:
            raise StateError("maxpool backward called before forward")
        shape, rows, cols = self._cache
        n, c, h, w = shape
        base = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
        flat = (base + rows * w + cols).ravel()
        dx = np.bincount(flat, weights=grad.ravel(), minlength=n * c * h * w)
        dx = dx.reshape(shape).astype(DTYPE, copy=False)
        return dx

    def describe(self):
        return f"maxpool{self.p}/s{self.s}"


def relu(x):
    return np.maximum(x, 0.0)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        if self._mask is None:
            raise StateError("relu backward called before forward")
        return np.where(self._mask, grad, 0.0)


def maxout(x, k):
    """Max over adjacent channel groups of size ``k``: ``[C,H,W] -> [C/k,H,W]``.

    Accepts a batch ``[N,C,H,W]`` as well.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    n, c = x.shape[:2]
    if k < 1 or c % k:
        raise ShapeError(f"group size {k} does not divide {c} channels")
    out = x.reshape(n, c // k, k, *x.shape[2:]).max(axis=2)
    return out[0] if single else out


class Maxout(Layer):
    def __init__(self, k=2):
        super().__init__()
        self.k = k
        self._cache = None

    def out_shape(self, shape):
        c = shape[0]
        if self.k < 1 or c % self.k:
            raise ShapeError(f"group size {self.k} does not divide {c} channels")
        return (c // self.k, *shape[1:])

    def forward(self, x, train=False):
        n, c = x.shape[:2]
        self.out_shape(x.shape[1:])
        g = x.reshape(n, c // self.k, self.k, *x.shape[2:])
        idx = g.argmax(axis=2)
        self._cache = (x.shape, idx)
        return np.take_along_axis(g, idx[:, :, None], axis=2)[:, :, 0]

    def backward(self, grad):
        if self._cache is None:
            raise StateError("maxout backward called before forward")
        shape, idx = self._cache
        n, c = shape[:2]
        dg = np.zeros((n, c // self.k, self.k, *shape[2:]), dtype=DTYPE)
        np.put_along_axis(dg, idx[:, :, None], grad[:, :, None], axis=2)
        return dg.reshape(shape)


class BatchNorm(Layer):
    """Per-channel batch normalization for ``[N,C,H,W]`` or ``[N,C]``.

    Training mode standardizes with the batch statistics and folds them into
    the running averages (``running = momentum*running + (1-momentum)*batch``);
    inference mode uses the running averages.
    """

    def __init__(self, channels, eps=1e-7, momentum=0.9):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["scale"] = np.ones(channels, dtype=DTYPE)
        self.params["shift"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)
        self.zero_grad()
        self._cache = None
        self.last_normalized = None

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {shape[0]}")
        return tuple(shape)

    def _axes(self, x):
        return (0,) + tuple(range(2, x.ndim))

    def _bcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, train=False):
        self.out_shape(x.shape[1:])
        axes = self._axes(x)
        if train:
            if x.shape[0] < 2:
                raise ParameterError("batch norm in training mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        self._cache = (xhat, inv_std, train)
        self.last_normalized = xhat
        return xhat * self._bcast(self.params["scale"], x) + self._bcast(self.params["shift"], x)

    def backward(self, grad):
        if self._cache is None:
            raise StateError("batchnorm backward called before forward")
        xhat, inv_std, train = self._cache
        axes = self._axes(grad)
        self.grads["scale"] = (grad * xhat).sum(axis=axes)
        self.grads["shift"] = grad.sum(axis=axes)
        dxhat = grad * self._bcast(self.params["scale"], grad)
        if not train:
            return dxhat * self._bcast(inv_std, grad)
        m = grad.size // grad.shape[1]
        s1 = self._bcast(dxhat.sum(axis=axes), grad)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), grad)
        return self._bcast(inv_std, grad) * (dxhat - s1 / m - xhat * s2 / m)


class Dropout(Layer):
    """Inverted dropout: keep each unit with probability ``keep`` and divide
    survivors by ``keep`` so that inference is the identity."""

    def __init__(self, keep, rng=None):
        super().__init__()
        if not 0 < keep <= 1:
            raise ParameterError(f"keep probability must be in (0, 1], got {keep}")
        self.keep = keep
        self.rng = rng
        self._mask = None

    def forward(self, x, train=False, rng=None):
        if not train or self.keep == 1.0:
            self._mask = None
            return x
        rng = rng or self.rng
        if rng is None:
            raise StateError("dropout in training mode needs a random generator")
        self._mask = rng.random(x.shape) < self.keep
        return x * self._mask / self.keep

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask / self.keep

    def describe(self):
        return f"dropout(keep={self.keep})"


class Dense(Layer):
    """Affine map ``a @ w + b`` with ``w`` of shape ``[features, units]``."""

    def __init__(self, features, units, rng=None, std=None, bias=0.0):
        super().__init__()
        self.features, self.units = features, units
        if rng is None:
            self.params["w"] = np.zeros((features, units), dtype=DTYPE)
        else:
            std = std if std is not None else he_std(features)
            self.params["w"] = gaussian_fill((features, units), rng, std)
        self.params["b"] = np.full(units, bias, dtype=DTYPE)
        self.zero_grad()
        self._x = None

    def out_shape(self, shape):
        if tuple(shape) != (self.features,):
            raise ShapeError(f"dense expects {self.features} features, got {tuple(shape)}")
        return (self.units,)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.features:
            raise ShapeError(f"dense expects [N,{self.features}], got {x.shape}")
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, grad):
        if self._x is None:
            raise StateError("dense backward called before forward")
        self.grads["w"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["w"].T

    def describe(self):
        return f"dense({self.features}->{self.units})"


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


def softmax(logits, axis=-1):
    """Max-shifted softmax along ``axis``."""
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    """Softmax over the channel axis (axis 1).

    On ``[N,K]`` this is the usual class softmax; on ``[N,K,H,W]`` it is a
    per-position softmax producing a probability map.
    """

    def __init__(self):
        super().__init__()
        self._p = None

    def forward(self, x, train=False):
        self._p = softmax(x, axis=1)
        return self._p

    def backward(self, grad):
        if self._p is None:
            raise StateError("softmax backward called before forward")
        p = self._p
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))


def concat_channels(a, b):
    """Stack ``b``'s channels after ``a``'s; works for ``[C,H,W]`` and ``[N,C,H,W]``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    axis = a.ndim - 3
    if a.ndim != b.ndim or a.shape[:axis] != b.shape[:axis] or a.shape[axis + 1 :] != b.shape[axis + 1 :]:
        raise ShapeError(f"cannot concatenate {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=axis)


def split_channels(x, c1):
    axis = x.ndim - 3
    return np.split(x, [c1], axis=axis)
