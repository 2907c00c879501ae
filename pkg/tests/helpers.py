"""Shared test oracles, independent of the library's backward rules."""

import mpmath
import numpy as np


def scalar_prox_argmin(ahat, beta, tol="1e-13"):
    """Golden-section minimizer of 0.5*(a - ahat)^2 + beta*|a|.

    Runs in 30-digit arithmetic so comparisons stay exact well below the
    bracket tolerance; knows nothing about the closed-form branches.
    """
    with mpmath.workdps(30):
        a_hat = mpmath.mpf(repr(float(ahat)))
        b = mpmath.mpf(repr(float(beta)))

        def f(a):
            return (a - a_hat) ** 2 / 2 + b * abs(a)

        lo = min(a_hat, mpmath.mpf(0)) - mpmath.mpf("0.5")
        hi = max(a_hat, mpmath.mpf(0)) + mpmath.mpf("0.5")
        invphi = (mpmath.sqrt(5) - 1) / 2
        c = hi - invphi * (hi - lo)
        d = lo + invphi * (hi - lo)
        fc, fd = f(c), f(d)
        eps = mpmath.mpf(tol)
        while hi - lo > eps:
            if fc < fd:
                hi, d, fd = d, c, fc
                c = hi - invphi * (hi - lo)
                fc = f(c)
            else:
                lo, c, fc = c, d, fd
                d = lo + invphi * (hi - lo)
                fd = f(d)
        return float((lo + hi) / 2)


def numeric_grad(tensor, scalar_fn, step=1e-6):
    """Central finite differences of scalar_fn() w.r.t. tensor.data."""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = tensor.data[idx]
        tensor.data[idx] = old + step
        fp = scalar_fn()
        tensor.data[idx] = old - step
        fm = scalar_fn()
        tensor.data[idx] = old
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def rel_err(analytic, numeric):
    """max over entries of |analytic - numeric| / max(1, |numeric|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def naive_conv2d(x, k, stride=1, padding=0):
    """Sextuple-loop cross-correlation; the conv oracle."""
    c, h, w = x.shape
    d, ck, r, _ = k.shape
    assert c == ck
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - r) // stride + 1
    wo = (w + 2 * padding - r) // stride + 1
    out = np.zeros((d, ho, wo))
    for o in range(d):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for cc in range(c):
                    for a in range(r):
                        for b in range(r):
                            acc += k[o, cc, a, b] * xp[cc, i * stride + a, j * stride + b]
                out[o, i, j] = acc
    return out


def naive_depthwise2d(x, k, stride=1, padding=0):
    """Per-channel loop convolution; the depthwise oracle."""
    c, h, w = x.shape
    ck, r, _ = k.shape
    assert c == ck
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - r) // stride + 1
    wo = (w + 2 * padding - r) // stride + 1
    out = np.zeros((c, ho, wo))
    for cc in range(c):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for a in range(r):
                    for b in range(r):
                        acc += k[cc, a, b] * xp[cc, i * stride + a, j * stride + b]
                out[cc, i, j] = acc
    return out


def count_macs(graph):
    """Direct MAC walk over a concrete graph, written against tensor shapes
    only; the independent side of every FLOPs exactness check."""
    shapes = graph.tensor_shapes()
    total = 0
    for l in graph.layers:
        if l.kind == "conv":
            cin = shapes[l.inputs[0]][0]
            d, ho, wo = shapes[l.name]
            r = l.attrs["kernel"]
            total += cin * d * r * r * ho * wo
        elif l.kind == "dwconv":
            c, ho, wo = shapes[l.name]
            r = l.attrs["kernel"]
            total += c * r * r * ho * wo
        elif l.kind == "dense":
            total += shapes[l.inputs[0]][0] * shapes[l.name][0]
    return total
