"""Neural layers: Dense, Conv2D, Conv3D, LSTM, BatchNorm, Dropout and friends.

Every layer acts on the trailing axes of its input and treats all leading axes
as batch/time positions, so one sample ``(T, H, W, C)`` and a minibatch
``(N, T, H, W, C)`` go through the same code.

Conventions:

* kernels are ``(*window, c_in, c_out)``, cross-correlation, stride 1;
* LSTM gate blocks are ordered ``[input, forget, cell, output]``;
* ``mode`` is ``"train"`` or ``"infer"``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as tn
from .errors import ConfigError, DataError, DimensionError
from .tensor import Parameter, Tensor, apply_op

GATE_ORDER = ("input", "forget", "cell", "output")
MODES = ("train", "infer")

# elements per im2col buffer; bounds peak memory of conv forward/backward
_IM2COL_BUDGET = 1 << 22


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class. Subclasses set ``self.params`` and implement ``forward``."""

    kind = "layer"

    def __init__(self, name: str, dtype=np.float64):
        self.name = name
        self.dtype = np.dtype(dtype)
        self.params: list[Parameter] = []

    def _param(self, suffix: str, value) -> Parameter:
        p = Parameter(f"{self.name}.{suffix}", value, dtype=self.dtype)
        self.params.append(p)
        return p

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that must survive a checkpoint round-trip."""
        return {}

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        raise KeyError(key)

    def config(self) -> dict:
        return {}

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, mode: str = "infer") -> Tensor:
        _check_mode(mode)
        return self.forward(x, mode)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Activation(Layer):
    kind = "activation"
    _fns = {"relu": tn.relu, "tanh": tn.tanh, "sigmoid": tn.sigmoid, "linear": None}

    def __init__(self, fn: str, name: str = "activation", dtype=np.float64):
        super().__init__(name, dtype)
        if fn not in self._fns:
            raise ConfigError(f"unknown activation {fn!r}")
        self.fn = fn

    def config(self):
        return {"fn": self.fn}

    def forward(self, x, mode="infer"):
        f = self._fns[self.fn]
        return x if f is None else f(x)


class Dense(Layer):
    """``activation(x @ W + b)`` over the last axis."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, activation: str = "linear",
                 rng: np.random.Generator | None = None, name: str = "dense", dtype=np.float64):
        super().__init__(name, dtype)
        if in_features < 1 or out_features < 1:
            raise ConfigError(f"dense extents must be positive, got {in_features}->{out_features}")
        if activation not in ("relu", "linear", "tanh", "sigmoid"):
            raise ConfigError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.activation = activation
        self.weight = self._param("weight", glorot_uniform(
            rng, (in_features, out_features), in_features, out_features))
        self.bias = self._param("bias", np.zeros(out_features))

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features,
                "activation": self.activation}

    def forward(self, x, mode="infer"):
        if x.ndim < 1 or x.shape[-1] != self.in_features:
            raise DimensionError(
                f"{self.name}: expected last extent {self.in_features}, got shape {x.shape}")
        squeeze = x.ndim == 1
        if squeeze:
            x = tn.reshape(x, (1, self.in_features))
        y = tn.add(tn.matmul(x, self.weight.value), self.bias.value)
        if self.activation != "linear":
            y = tn.elementwise(self.activation, y)
        return tn.reshape(y, (self.out_features,)) if squeeze else y


# --- convolution -----------------------------------------------------------

def _same_pads(window: tuple, padding: str) -> list[tuple[int, int]]:
    if padding == "valid":
        return [(0, 0)] * len(window)
    return [((k - 1) // 2, k // 2) for k in window]


def _correlate(x: np.ndarray, kernel: np.ndarray, pads) -> np.ndarray:
    """Stride-1 cross-correlation of ``x (L, *S, Ci)`` with ``kernel (*K, Ci, Co)``."""
    nd = kernel.ndim - 2
    window = kernel.shape[:nd]
    c_out = kernel.shape[-1]
    xp = np.pad(x, [(0, 0), *pads, (0, 0)])
    out_sp = tuple(xp.shape[1 + i] - window[i] + 1 for i in range(nd))
    out = np.empty((x.shape[0], int(np.prod(out_sp)), c_out), dtype=np.result_type(x, kernel))
    if nd == 3:
        # im2col over (H, W) once per frame, then sum the kt temporal taps
        kflat = kernel.reshape(window[0], -1, c_out)
        for s in range(x.shape[0]):
            cols = _im2col(xp[s], window[1:], 2)
            cols = cols.reshape(xp.shape[1], -1, cols.shape[-1])
            acc = cols[0:out_sp[0]].reshape(-1, cols.shape[-1]) @ kflat[0]
            for dt in range(1, window[0]):
                acc += cols[dt:dt + out_sp[0]].reshape(-1, cols.shape[-1]) @ kflat[dt]
            out[s] = acc
        return out.reshape((x.shape[0], *out_sp, c_out))
    kflat = kernel.reshape(-1, c_out)
    per_item = int(np.prod(out_sp)) * kflat.shape[0]
    chunk = max(1, _IM2COL_BUDGET // per_item)
    for s in range(0, x.shape[0], chunk):
        cols = _im2col(xp[s:s + chunk], window, nd)
        out[s:s + chunk] = (cols @ kflat).reshape(-1, out.shape[1], c_out)
    return out.reshape((x.shape[0], *out_sp, c_out))


def _im2col(xp: np.ndarray, window: tuple, nd: int) -> np.ndarray:
    """Patches of the ``nd`` axes after the first: ``(L*prod(out), prod(window)*C)``."""
    win = sliding_window_view(xp, window, axis=tuple(range(1, 1 + nd)))
    # (L, *out, C, *K) -> (L, *out, *K, C) to match kernel.reshape(-1, c_out)
    win = np.moveaxis(win, 1 + nd, -1)
    return win.reshape(-1, int(np.prod(window)) * xp.shape[-1])


def _kernel_grad(x: np.ndarray, g: np.ndarray, window: tuple, pads) -> np.ndarray:
    nd = len(window)
    xp = np.pad(x, [(0, 0), *pads, (0, 0)])
    c_in, c_out = x.shape[-1], g.shape[-1]
    dtype = np.result_type(x, g)
    if nd == 3:
        steps = g.shape[1]
        acc = np.zeros((window[0], int(np.prod(window[1:])) * c_in, c_out), dtype=dtype)
        for s in range(x.shape[0]):
            cols = _im2col(xp[s], window[1:], 2)
            cols = cols.reshape(xp.shape[1], -1, cols.shape[-1])
            gs = g[s].reshape(-1, c_out)
            for dt in range(window[0]):
                acc[dt] += cols[dt:dt + steps].reshape(-1, cols.shape[-1]).T @ gs
        return acc.reshape((*window, c_in, c_out))
    per_item = int(np.prod(g.shape[1:-1])) * int(np.prod(window)) * c_in
    chunk = max(1, _IM2COL_BUDGET // per_item)
    acc = np.zeros((int(np.prod(window)) * c_in, c_out), dtype=dtype)
    for s in range(0, x.shape[0], chunk):
        cols = _im2col(xp[s:s + chunk], window, nd)
        acc += cols.T @ g[s:s + chunk].reshape(-1, c_out)
    return acc.reshape((*window, c_in, c_out))


def conv_nd(x: Tensor, kernel: Tensor, bias: Tensor, nd: int, padding: str = "same") -> Tensor:
    """Differentiable stride-1 correlation over the ``nd`` axes before channels."""
    if x.ndim < nd + 1:
        raise DimensionError(f"conv{nd}d needs at least {nd + 1} axes, got shape {x.shape}")
    window = kernel.shape[:nd]
    c_in, c_out = kernel.shape[-2], kernel.shape[-1]
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv{nd}d: input has {x.shape[-1]} channels, kernel expects {c_in}")
    pads = _same_pads(window, padding)
    spatial = x.shape[-nd - 1:-1]
    lead = x.shape[:-nd - 1]
    for s, k, (lo, hi) in zip(spatial, window, pads):
        if s + lo + hi < k:
            raise DimensionError(f"conv{nd}d: extent {s} smaller than window {k} under {padding!r} padding")
    xl = x.data.reshape((-1, *spatial, c_in))
    out = _correlate(xl, kernel.data, pads) + bias.data
    out_sp = out.shape[1:-1]

    def grad(g):
        gl = g.reshape((-1, *out_sp, c_out))
        dk = _kernel_grad(xl, gl, window, pads)
        db = gl.reshape(-1, c_out).sum(axis=0)
        dx = None
        if x.requires_grad:
            flipped = np.swapaxes(kernel.data[(slice(None, None, -1),) * nd], -1, -2)
            back_pads = [(k - 1 - lo, k - 1 - hi) for k, (lo, hi) in zip(window, pads)]
            dx = _correlate(gl, flipped, back_pads).reshape(x.shape)
        return dx, dk, db

    return apply_op(f"conv{nd}d", out.reshape((*lead, *out_sp, c_out)), (x, kernel, bias), grad)


class _ConvND(Layer):
    nd = 0

    def __init__(self, c_in: int, c_out: int, kernel_size=3, padding: str = "same", stride: int = 1,
                 rng: np.random.Generator | None = None, name: str = "conv", dtype=np.float64):
        super().__init__(name, dtype)
        window = (kernel_size,) * self.nd if isinstance(kernel_size, int) else tuple(kernel_size)
        if len(window) != self.nd or any(k < 1 for k in window):
            raise ConfigError(f"{name}: kernel_size must give {self.nd} positive extents, got {kernel_size}")
        if padding not in ("same", "valid"):
            raise ConfigError(f"{name}: padding must be 'same' or 'valid', got {padding!r}")
        if padding == "same" and any(k % 2 == 0 for k in window):
            raise ConfigError(f"{name}: 'same' padding needs odd kernel extents, got {window}")
        if stride != 1:
            raise ConfigError(f"{name}: only stride 1 is supported")
        if c_in < 1 or c_out < 1:
            raise ConfigError(f"{name}: channel counts must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.window, self.padding, self.stride = c_in, c_out, window, padding, stride
        area = int(np.prod(window))
        self.kernel = self._param("kernel", glorot_uniform(
            rng, (*window, c_in, c_out), area * c_in, area * c_out))
        self.bias = self._param("bias", np.zeros(c_out))

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "kernel_size": list(self.window),
                "padding": self.padding, "stride": self.stride}

    def forward(self, x, mode="infer"):
        return conv_nd(x, self.kernel.value, self.bias.value, self.nd, self.padding)


class Conv2D(_ConvND):
    """Time-distributed 2-D convolution: input ``(..., H, W, C)``."""

    kind = "conv2d"
    nd = 2


class Conv3D(_ConvND):
    """3-D convolution over ``(T, H, W)``: input ``(..., T, H, W, C)``."""

    kind = "conv3d"
    nd = 3


# --- recurrent -------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_sequence(x: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM over axis -2 of ``x (..., T, in)``; returns every hidden state."""
    n_in, units = w.shape[0], u.shape[0]
    if x.ndim < 2 or x.shape[-1] != n_in:
        raise DimensionError(f"lstm: expected input (..., T, {n_in}), got shape {x.shape}")
    lead, steps = x.shape[:-2], x.shape[-2]
    x3 = x.data.reshape(-1, steps, n_in)
    batch = x3.shape[0]
    dtype = np.result_type(x.data, w.data)
    xw = x3 @ w.data + b.data
    gates = np.empty((batch, steps, 4 * units), dtype=dtype)
    cells = np.empty((batch, steps, units), dtype=dtype)
    tanh_c = np.empty_like(cells)
    hidden = np.empty_like(cells)
    h = np.zeros((batch, units), dtype=dtype)
    c = np.zeros((batch, units), dtype=dtype)
    for t in range(steps):
        z = xw[:, t] + h @ u.data
        gate = gates[:, t]
        gate[:, :2 * units] = _sigmoid(z[:, :2 * units])
        gate[:, 2 * units:3 * units] = np.tanh(z[:, 2 * units:3 * units])
        gate[:, 3 * units:] = _sigmoid(z[:, 3 * units:])
        i, f, g, o = np.split(gate, 4, axis=1)
        c = f * c + i * g
        cells[:, t] = c
        tanh_c[:, t] = np.tanh(c)
        h = o * tanh_c[:, t]
        hidden[:, t] = h

    def grad(gout):
        gh = gout.reshape(batch, steps, units)
        dz_all = np.empty_like(gates)
        du = np.zeros_like(u.data, dtype=dtype)
        dh_next = np.zeros((batch, units), dtype=dtype)
        dc_next = np.zeros((batch, units), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            i, f, g, o = np.split(gates[:, t], 4, axis=1)
            tc = tanh_c[:, t]
            dh = gh[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            c_prev = cells[:, t - 1] if t > 0 else 0.0
            dz = dz_all[:, t]
            dz[:, :units] = dc * g * i * (1.0 - i)
            dz[:, units:2 * units] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * units:3 * units] = dc * i * (1.0 - g * g)
            dz[:, 3 * units:] = dh * tc * o * (1.0 - o)
            if t > 0:
                du += hidden[:, t - 1].T @ dz
            dh_next = dz @ u.data.T
            dc_next = dc * f
        flat = dz_all.reshape(-1, 4 * units)
        dw = x3.reshape(-1, n_in).T @ flat
        db = flat.sum(axis=0)
        dx = (flat @ w.data.T).reshape(x.shape) if x.requires_grad else None
        return dx, dw, du, db

    return apply_op("lstm", hidden.reshape((*lead, steps, units)), (x, w, u, b), grad)


class LSTM(Layer):
    """Single-direction LSTM returning the full hidden-state sequence.

    Weights: ``W (in, 4*units)``, ``U (units, 4*units)``, ``b (4*units)``, gate
    blocks ordered input, forget, cell, output. States start at zero.
    """

    kind = "lstm"

    def __init__(self, in_features: int, units: int, rng: np.random.Generator | None = None,
                 name: str = "lstm", dtype=np.float64, forget_bias: float = 1.0):
        super().__init__(name, dtype)
        if in_features < 1 or units < 1:
            raise ConfigError(f"{name}: extents must be positive, got in={in_features} units={units}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.units = in_features, units
        self.W = self._param("W", glorot_uniform(rng, (in_features, 4 * units), in_features, 4 * units))
        self.U = self._param("U", glorot_uniform(rng, (units, 4 * units), units, 4 * units))
        bias = np.zeros(4 * units)
        bias[units:2 * units] = forget_bias
        self.b = self._param("b", bias)

    def config(self):
        return {"in_features": self.in_features, "units": self.units, "gate_order": list(GATE_ORDER)}

    def forward(self, x, mode="infer"):
        return lstm_sequence(x, self.W.value, self.U.value, self.b.value)


# --- normalization and regularization --------------------------------------

def _batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    feat = x.shape[-1]
    x2 = x.data.reshape(-1, feat)
    n = x2.shape[0]
    if n < 2:
        raise DataError("batchnorm: train mode needs more than one value per feature (batch of size 1)")
    mu = x2.mean(axis=0)
    xhat = x2 - mu
    var = np.einsum("ij,ij->j", xhat, xhat) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def grad(g):
        g2 = g.reshape(-1, feat)
        dgamma = np.einsum("ij,ij->j", g2, xhat)
        dbeta = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            # dx = inv * gamma * (g - mean(g) - xhat * mean(g * xhat))
            dx = xhat * (-dgamma / n)
            dx += g2
            dx -= dbeta / n
            dx *= gamma.data * inv
            dx = dx.reshape(x.shape)
        return dx, dgamma, dbeta

    return apply_op("batchnorm_train", out.reshape(x.shape), (x, gamma, beta), grad), mu, var


def _batchnorm_infer(x: Tensor, gamma: Tensor, beta: Tensor, mean, var, eps: float) -> Tensor:
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    scale = gamma.data * inv

    def grad(g):
        red = tuple(range(g.ndim - 1))
        return g * scale, (g * xhat).sum(axis=red), g.sum(axis=red)

    return apply_op("batchnorm_infer", xhat * gamma.data + beta.data, (x, gamma, beta), grad)


class BatchNorm(Layer):
    """Per-feature normalization over all leading axes.

    Train mode normalizes with batch statistics and folds them into the
    running estimates (``running = momentum * running + (1 - momentum) * batch``);
    infer mode uses the running estimates only.
    """

    kind = "batchnorm"

    def __init__(self, features: int, momentum: float = 0.9, eps: float = 1e-5,
                 name: str = "batchnorm", dtype=np.float64):
        super().__init__(name, dtype)
        if features < 1:
            raise ConfigError(f"{name}: features must be positive")
        if not 0.0 <= momentum < 1.0 or eps <= 0:
            raise ConfigError(f"{name}: need 0 <= momentum < 1 and eps > 0")
        self.features, self.momentum, self.eps = features, momentum, eps
        self.gamma = self._param("gamma", np.ones(features))
        self.beta = self._param("beta", np.zeros(features))
        self.running_mean = np.zeros(features, dtype=self.dtype)
        self.running_var = np.ones(features, dtype=self.dtype)

    def config(self):
        return {"features": self.features, "momentum": self.momentum, "eps": self.eps}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, key, value):
        if key not in ("running_mean", "running_var"):
            raise KeyError(key)
        value = np.asarray(value, dtype=self.dtype).reshape(self.features)
        setattr(self, key, value.copy())

    def forward(self, x, mode="infer"):
        if x.ndim < 1 or x.shape[-1] != self.features:
            raise DimensionError(f"{self.name}: expected {self.features} features, got shape {x.shape}")
        if mode == "infer":
            return _batchnorm_infer(x, self.gamma.value, self.beta.value,
                                    self.running_mean, self.running_var, self.eps)
        y, mu, var = _batchnorm_train(x, self.gamma.value, self.beta.value, self.eps)
        m = self.momentum
        self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(self.dtype)
        self.running_var = (m * self.running_var + (1 - m) * var).astype(self.dtype)
        return y


class Dropout(Layer):
    """Inverted dropout: in train mode each value is zeroed with probability
    ``rate`` and survivors are scaled by ``1 / (1 - rate)``."""

    kind = "dropout"

    def __init__(self, rate: float = 0.2, seed: int = 0, name: str = "dropout", dtype=np.float64):
        super().__init__(name, dtype)
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"{name}: dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def config(self):
        return {"rate": self.rate}

    def forward(self, x, mode="infer"):
        if mode == "infer" or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return tn.mul(x, Tensor(mask, dtype=x.dtype))


class StepFlatten(Layer):
    """Flatten the trailing ``n_axes`` axes into one feature axis per step."""

    kind = "flatten"

    def __init__(self, n_axes: int = 3, name: str = "flatten", dtype=np.float64):
        super().__init__(name, dtype)
        self.n_axes = n_axes

    def config(self):
        return {"n_axes": self.n_axes}

    def forward(self, x, mode="infer"):
        if x.ndim < self.n_axes:
            raise DimensionError(f"{self.name}: cannot flatten {self.n_axes} axes of shape {x.shape}")
        return tn.flatten(x, x.ndim - self.n_axes)
