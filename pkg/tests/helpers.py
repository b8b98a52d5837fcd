"""Naive reference implementations and finite-difference gradients for tests."""

import numpy as np

from surgekit import tensor as tn
from surgekit.tensor import GradTape, Tensor


def naive_dense(x, w, b):
    n, fi = x.shape
    fo = w.shape[1]
    out = np.zeros((n, fo))
    for i in range(n):
        for o in range(fo):
            acc = b[o]
            for k in range(fi):
                acc += x[i, k] * w[k, o]
            out[i, o] = acc
    return out


def naive_conv2d(x, k, b):
    """'same' cross-correlation; x (H, W, Ci), k (kh, kw, Ci, Co)."""
    h, w, ci = x.shape
    kh, kw, _, co = k.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, co))
    for r in range(h):
        for c in range(w):
            for o in range(co):
                acc = b[o]
                for i in range(kh):
                    for j in range(kw):
                        rr, cc = r + i - ph, c + j - pw
                        if 0 <= rr < h and 0 <= cc < w:
                            for m in range(ci):
                                acc += x[rr, cc, m] * k[i, j, m, o]
                out[r, c, o] = acc
    return out


def naive_conv3d(x, k, b):
    """'same' cross-correlation; x (T, H, W, Ci), k (kt, kh, kw, Ci, Co)."""
    t_, h, w, ci = x.shape
    kt, kh, kw, _, co = k.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    out = np.zeros((t_, h, w, co))
    for t in range(t_):
        for r in range(h):
            for c in range(w):
                for o in range(co):
                    acc = b[o]
                    for a in range(kt):
                        for i in range(kh):
                            for j in range(kw):
                                tt, rr, cc = t + a - pt, r + i - ph, c + j - pw
                                if 0 <= tt < t_ and 0 <= rr < h and 0 <= cc < w:
                                    for m in range(ci):
                                        acc += x[tt, rr, cc, m] * k[a, i, j, m, o]
                    out[t, r, c, o] = acc
    return out


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def naive_lstm(x, W, U, b):
    """x (T, in); gate blocks [i, f, g, o]; scalar loops over units."""
    steps, n_in = x.shape
    units = U.shape[0]
    h = np.zeros(units)
    c = np.zeros(units)
    out = np.zeros((steps, units))
    for t in range(steps):
        z = np.zeros(4 * units)
        for q in range(4 * units):
            acc = b[q]
            for k in range(n_in):
                acc += x[t, k] * W[k, q]
            for k in range(units):
                acc += h[k] * U[k, q]
            z[q] = acc
        new_h = np.zeros(units)
        for u in range(units):
            i = _sig(z[u])
            f = _sig(z[units + u])
            g = np.tanh(z[2 * units + u])
            o = _sig(z[3 * units + u])
            c[u] = f * c[u] + i * g
            new_h[u] = o * np.tanh(c[u])
        h = new_h
        out[t] = h
    return out


def numeric_grad(f, arr, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_layer_gradients(layer, x, mode="train", rng=None, eps=1e-6):
    """Max relative error between tape and central-difference gradients over params and input.

    The scalar objective is ``sum(layer(x) * R)`` for a fixed random ``R``.
    """
    rng = rng or np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    out_shape = layer(Tensor(x), mode).shape
    proj = rng.standard_normal(out_shape)

    def objective():
        return float(np.sum(layer(Tensor(x), mode).data * proj))

    xt = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        loss = tn.reduce_sum(tn.mul(layer(xt, mode), Tensor(proj)))
    sources = [xt] + [p.value for p in layer.params]
    analytic = tape.gradient(loss, sources)

    errors = {"input": rel_error(analytic[0], numeric_grad(objective, x, eps))}
    for p, g in zip(layer.params, analytic[1:]):
        arr = np.array(p.value.data)

        def obj_p(p=p, arr=arr):
            p.assign(arr)
            return objective()

        num = numeric_grad(obj_p, arr, eps)
        p.assign(arr)
        errors[p.name] = rel_error(g, num)
    return errors
