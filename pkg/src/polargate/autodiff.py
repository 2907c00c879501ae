"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a value-semantic :class:`Tensor` wrapping a
NumPy array, an explicit :class:`Tape` that records every differentiable
operation applied while it is active, and a :func:`backward` replay that
accumulates gradients.  Gradients accumulate across backward calls until
:func:`zero_grad` resets them, which lets a training step combine several
gradient sources without hidden state.

Only the layers needed by small gated CNNs and MLPs are provided: 2-d
convolution (cross-correlation, no kernel flip), depthwise convolution,
per-channel scaling, affine (dense) maps, relu, average pooling, batch
normalization, elementwise add/sub/mul, reductions and softmax
cross-entropy.  Everything runs single threaded at 64-bit precision.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grad",
    "conv2d",
    "depthwise_conv2d",
    "channel_scale",
    "dense",
    "relu",
    "avgpool2d",
    "global_avgpool",
    "batchnorm2d",
    "softmax_cross_entropy",
    "add",
    "sub",
    "mul",
    "tsum",
    "tmean",
    "flatten",
    "gate_values",
    "slice_norms",
    "gate_value",
    "gate_grad",
]


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``requires_grad`` marks trainable leaves; outputs of recorded operations
    inherit it.  ``grad`` is allocated lazily by :func:`backward` and has the
    same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{nm}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.rule = rule


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, so inputs of every node precede
    it; replaying the list in reverse propagates gradients to every
    ``requires_grad`` tensor reachable from the loss.  Use as a context
    manager around the forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(out, inputs, rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate on top of whatever is already stored; call
    :func:`zero_grad` between steps.  ``d(loss)/d(loss) = 1``.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(
            f"backward needs a scalar loss, got shape {loss.data.shape}"
        )
    if loss.tape is None:
        if loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
        return
    tape = loss.tape

    # Restrict the replay to nodes whose output feeds the loss.
    needed = {id(loss)}
    relevant: list[_Node] = []
    for node in reversed(tape.nodes):
        if id(node.out) in needed:
            relevant.append(node)
            needed.update(id(t) for t in node.inputs if t.requires_grad)

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    loss.accumulate_grad(flowing[id(loss)])
    for node in relevant:  # already reverse topological
        gout = flowing.get(id(node.out))
        if gout is None:
            continue
        for tin, g in zip(node.inputs, node.rule(gout)):
            if g is None or not tin.requires_grad:
                continue
            key = id(tin)
            if key in flowing:
                flowing[key] = flowing[key] + g
            else:
                flowing[key] = g
    for node in relevant:
        for tin in node.inputs:
            g = flowing.pop(id(tin), None)
            if g is not None:
                tin.accumulate_grad(g)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"sub: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatchError(f"mul: shapes {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def rule(g):
        ga = g * bd
        gb = g * ad
        if ga.shape != ad.shape:
            ga = np.array(ga.sum())
        if gb.shape != bd.shape:
            gb = np.array(gb.sum())
        return ga.reshape(ad.shape), gb.reshape(bd.shape)

    return _record(out, (a, b), rule)


def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch axes; 3-d input collapses fully to a vector."""
    x = as_tensor(x)
    if x.data.ndim == 4:
        new_shape = (x.data.shape[0], -1)
    else:
        new_shape = (-1,)
    old_shape = x.data.shape
    out = Tensor(x.data.reshape(new_shape))
    return _record(out, (x,), lambda g: (g.reshape(old_shape),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# convolution ops
# ---------------------------------------------------------------------------

def _promote4d(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError(f"expected a 3-d or 4-d image tensor, got shape {x.shape}")


def _conv_geometry(h: int, w: int, r: int, stride: int, padding: int):
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    ho = (h + 2 * padding - r) // stride + 1
    wo = (w + 2 * padding - r) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"kernel {r}x{r} with stride {stride}, padding {padding} does not fit "
            f"input {h}x{w}"
        )
    return ho, wo


def _im2col(xp: np.ndarray, r: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded [n, c, hp, wp] -> windows [n, c, ho, wo, r, r]
    win = np.lib.stride_tricks.sliding_window_view(xp, (r, r), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _col2im(gwin: np.ndarray, xp_shape, r: int, stride: int):
    # scatter-add window grads [n, c, ho, wo, r, r] back to padded image
    gxp = np.zeros(xp_shape)
    n, c, ho, wo = gwin.shape[:4]
    for i in range(r):
        for j in range(r):
            gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gwin[
                :, :, :, :, i, j
            ]
    return gxp


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation of ``x`` [c,h,w] (or [n,c,h,w]) with ``kernel`` [d,c,r,r]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, squeezed = _promote4d(x.data)
    if kernel.data.ndim != 4 or kernel.data.shape[2] != kernel.data.shape[3]:
        raise ShapeMismatchError(f"conv2d kernel must be [d,c,r,r], got {kernel.data.shape}")
    d, ck, r, _ = kernel.data.shape
    n, c, h, w = xd.shape
    if c != ck:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input shape {x.data.shape} has {c} channels, "
            f"kernel shape {kernel.data.shape} expects {ck}"
        )
    ho, wo = _conv_geometry(h, w, r, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _im2col(xp, r, stride, ho, wo)  # [n,c,ho,wo,r,r]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * r * r, ho * wo)
    kmat = kernel.data.reshape(d, c * r * r)
    out_d = np.matmul(kmat, cols).reshape(n, d, ho, wo)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (d,):
            raise ShapeMismatchError(
                f"conv2d bias shape {bias.data.shape} does not match {d} output channels"
            )
        out_d = out_d + bias.data[None, :, None, None]
    out = Tensor(out_d[0] if squeezed else out_d)

    def rule(g):
        g4 = g[None] if squeezed else g
        gflat = g4.reshape(n, d, ho * wo)
        gk = np.einsum("ndl,nkl->dk", gflat, cols).reshape(kernel.data.shape)
        gcols = np.matmul(kmat.T, gflat)  # [n, c*r*r, ho*wo]
        gwin = gcols.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 5, 2, 3)
        gxp = _col2im(gwin, xp.shape, r, stride)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        gx = gx[0] if squeezed else gx
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _record(out, inputs, rule)


def depthwise_conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Per-channel filtering: ``kernel`` [c,r,r] applied independently per channel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, squeezed = _promote4d(x.data)
    if kernel.data.ndim != 3 or kernel.data.shape[1] != kernel.data.shape[2]:
        raise ShapeMismatchError(
            f"depthwise kernel must be [c,r,r], got {kernel.data.shape}"
        )
    c_k, r, _ = kernel.data.shape
    n, c, h, w = xd.shape
    if c != c_k:
        raise ShapeMismatchError(
            f"depthwise channel mismatch: input shape {x.data.shape} has {c} channels, "
            f"kernel shape {kernel.data.shape} expects {c_k}"
        )
    ho, wo = _conv_geometry(h, w, r, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _im2col(xp, r, stride, ho, wo)  # [n,c,ho,wo,r,r]
    out_d = np.einsum("nchwij,cij->nchw", win, kernel.data)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c,):
            raise ShapeMismatchError(
                f"depthwise bias shape {bias.data.shape} does not match {c} channels"
            )
        out_d = out_d + bias.data[None, :, None, None]
    out = Tensor(out_d[0] if squeezed else out_d)

    def rule(g):
        g4 = g[None] if squeezed else g
        gk = np.einsum("nchw,nchwij->cij", g4, win)
        gwin = g4[:, :, :, :, None, None] * kernel.data[None, :, None, None, :, :]
        gxp = _col2im(gwin, xp.shape, r, stride)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        gx = gx[0] if squeezed else gx
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _record(out, inputs, rule)


def channel_scale(x: Tensor, gains: Tensor) -> Tensor:
    """Multiply every channel of ``x`` by its entry of ``gains``.

    The channel axis is axis 0 for unbatched tensors ([c,h,w] or [c]) and
    axis 1 for batched ones ([n,c,h,w] or [n,m]).  The gradient of a gain is
    the sum of upstream_grad * x over every other axis of its channel.
    """
    x, gains = as_tensor(x), as_tensor(gains)
    if gains.data.ndim != 1:
        raise ShapeMismatchError(f"gains must be a vector, got shape {gains.data.shape}")
    axis = 0 if x.data.ndim in (1, 3) else 1
    c = x.data.shape[axis]
    if gains.data.shape[0] != c:
        raise ShapeMismatchError(
            f"channel_scale: input shape {x.data.shape} has {c} channels on axis "
            f"{axis}, gains has length {gains.data.shape[0]}"
        )
    bshape = [1] * x.data.ndim
    bshape[axis] = c
    gb = gains.data.reshape(bshape)
    out = Tensor(x.data * gb)
    other_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def rule(g):
        gx = g * gb
        gg = (g * x.data).sum(axis=other_axes) if other_axes else (g * x.data)
        return gx, gg.reshape(gains.data.shape)

    return _record(out, (x, gains), rule)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight [n_out, m]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2:
        raise ShapeMismatchError(f"dense weight must be 2-d, got {weight.data.shape}")
    n_out, m = weight.data.shape
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != m:
        raise ShapeMismatchError(
            f"dense: input shape {x.data.shape} incompatible with weight {weight.data.shape}"
        )
    out_d = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (n_out,):
            raise ShapeMismatchError(
                f"dense bias shape {bias.data.shape} does not match {n_out} outputs"
            )
        out_d = out_d + bias.data
    out = Tensor(out_d)

    def rule(g):
        gx = g @ weight.data
        if x.data.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g.copy() if bias is not None else None
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, rule)


def avgpool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Average pooling with a square window; stride defaults to the window size."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    xd, squeezed = _promote4d(x.data)
    n, c, h, w = xd.shape
    ho, wo = _conv_geometry(h, w, kernel, stride, 0)
    win = _im2col(xd, kernel, stride, ho, wo)
    out_d = win.mean(axis=(4, 5))
    out = Tensor(out_d[0] if squeezed else out_d)

    def rule(g):
        g4 = g[None] if squeezed else g
        gwin = np.broadcast_to(
            g4[:, :, :, :, None, None] / (kernel * kernel),
            (n, c, ho, wo, kernel, kernel),
        )
        gx = _col2im(gwin, xd.shape, kernel, stride)
        return (gx[0] if squeezed else gx,)

    return _record(out, (x,), rule)


def global_avgpool(x: Tensor) -> Tensor:
    """Reduce [*,c,h,w] to [*,c] by spatial averaging."""
    x = as_tensor(x)
    xd, squeezed = _promote4d(x.data)
    n, c, h, w = xd.shape
    out_d = xd.mean(axis=(2, 3))
    out = Tensor(out_d[0] if squeezed else out_d)

    def rule(g):
        g4 = g[None] if squeezed else g
        gx = np.broadcast_to(g4[:, :, None, None] / (h * w), xd.shape).copy()
        return (gx[0] if squeezed else gx,)

    return _record(out, (x,), rule)


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization with learnable scale and shift.

    Training mode normalizes by batch statistics and updates the running
    buffers in place; inference mode applies the stored running statistics,
    which makes the op a per-channel affine map.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xd, squeezed = _promote4d(x.data)
    n, c, h, w = xd.shape
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeMismatchError(
            f"batchnorm scale/shift must have shape ({c},), got "
            f"{scale.data.shape} and {shift.data.shape}"
        )
    axes = (0, 2, 3)
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / max(m - 1, 1))
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_d = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    out = Tensor(out_d[0] if squeezed else out_d)

    def rule(g):
        g4 = g[None] if squeezed else g
        gscale = (g4 * xhat).sum(axis=axes)
        gshift = g4.sum(axis=axes)
        gxhat = g4 * scale.data[None, :, None, None]
        if training:
            m = n * h * w
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = (
                inv_std[None, :, None, None]
                * (gxhat - (s1[None, :, None, None] + xhat * s2[None, :, None, None]) / m)
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        gx = gx[0] if squeezed else gx
        return gx, gscale, gshift

    return _record(out, (x, scale, shift), rule)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax logits."""
    logits = as_tensor(logits)
    ld = logits.data[None, :] if logits.data.ndim == 1 else logits.data
    if ld.ndim != 2:
        raise ShapeMismatchError(f"logits must be 1-d or 2-d, got shape {logits.data.shape}")
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = labels[None]
    n, k = ld.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match batch of {n} logit rows"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(
            f"label out of range: values must be in [0, {k}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    out = Tensor(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)

    def rule(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        gl *= float(g) / n
        return (gl[0] if logits.data.ndim == 1 else gl,)

    return _record(out, (logits,), rule)


# ---------------------------------------------------------------------------
# gate primitives
# ---------------------------------------------------------------------------

def gate_value(x: float, epsilon: float) -> float:
    """Smoothed-L0 gate x^2 / (x^2 + epsilon); exactly 0 at x = 0."""
    if epsilon <= 0:
        raise ConfigError(f"gate epsilon must be > 0, got {epsilon}")
    x = float(x)
    if x == 0.0:
        return 0.0
    return x * x / (x * x + epsilon)


def gate_grad(x: float, epsilon: float) -> float:
    """Derivative of the smoothed-L0 gate: 2 x epsilon / (x^2 + epsilon)^2."""
    if epsilon <= 0:
        raise ConfigError(f"gate epsilon must be > 0, got {epsilon}")
    x = float(x)
    d = x * x + epsilon
    return 2.0 * x * epsilon / (d * d)


def gate_values(x: Tensor, epsilon) -> Tensor:
    """Vectorized differentiable gate; ``epsilon`` is a scalar or per-entry vector."""
    x = as_tensor(x)
    eps = np.asarray(epsilon, dtype=np.float64)
    if np.any(eps <= 0):
        raise ConfigError(f"gate epsilon must be > 0, got {epsilon}")
    xd = x.data
    denom = xd * xd + eps
    out = Tensor(np.where(xd == 0.0, 0.0, xd * xd / denom))

    def rule(g):
        return (g * (2.0 * xd * eps / (denom * denom)),)

    return _record(out, (x,), rule)


def slice_norms(kernel: Tensor) -> Tensor:
    """Euclidean norm of each input-channel slice of a conv or dense kernel.

    For a conv kernel [d,c,r,r] entry i is ||kernel[:, i, :, :]||_2; for a
    dense weight [n, m] it is the column norm.  The gradient at a zero slice
    is defined as zero.
    """
    kernel = as_tensor(kernel)
    kd = kernel.data
    if kd.ndim == 4:
        axes = (0, 2, 3)
    elif kd.ndim == 2:
        axes = (0,)
    else:
        raise ShapeMismatchError(f"slice_norms expects a conv or dense kernel, got {kd.shape}")
    sq = (kd * kd).sum(axis=axes)
    norms = np.sqrt(sq)
    out = Tensor(norms)

    def rule(g):
        safe = np.where(norms > 0, norms, 1.0)
        coef = np.where(norms > 0, g / safe, 0.0)
        if kd.ndim == 4:
            return (kd * coef[None, :, None, None],)
        return (kd * coef[None, :],)

    return _record(out, (kernel,), rule)
