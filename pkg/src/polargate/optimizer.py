"""Joint training step: SGD on the task loss, then a proximal step on the
resource penalty.

The objective is  L(w; g(alpha)) + lambda * R(alpha)  where R is the bilinear
MAC model evaluated at exact-zero L0 counts.  Weights and alphas follow plain
SGD on L (alpha at a scaled learning rate, never weight-decayed); the
nonsmooth lambda*R term is handled by a proximal operator solved with
alternating relaxation: group by group, the group's own L0 norm is relaxed to
L1 while the other groups' L0 counts are held fixed at their current
iterates, which turns each subproblem into a closed-form soft-threshold

    a_i  <-  sign(a_i) * max(|a_i| - beta, 0),
    beta = eta1 * lambda * (sum_{k != l} a_lk ||alpha_k||_0 + b_l).

The zero branch writes an exact 0, and an entry at exact zero stays there
under both the loss step (the gate derivative vanishes at 0) and the prox.
One sweep (``inner_iters = 1``) is enough in practice.

A standalone solver over raw vectors is exposed for arbitrary bilinear-L0
instances, together with a hard-threshold comparator (the unrelaxed L0 prox)
and an iterated proximal-descent loop used to study its initialization
sensitivity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape, backward, zero_grad
from .errors import ConfigError, GraphInvariantError, NumericsError
from .network import GateVector, NetworkGraph
from .resource import ResourceModel

__all__ = [
    "ProxConfig",
    "EpsilonSchedule",
    "soft_threshold",
    "hard_threshold",
    "prox_step",
    "solve_bilinear_l0",
    "prox_descent",
    "loss_step",
    "epsilon_step",
    "resource_penalty",
]


@dataclass
class ProxConfig:
    """Hyperparameters of the proximal step.

    ``bare_linear`` switches to the variant where the linear coefficient b_l
    is not multiplied by eta1 * lambda (beta = eta1*lambda*sum a_lk*l0 + b_l).
    The default scales the whole resource term, which keeps beta dimensionally
    consistent with the objective.
    """

    eta1: float
    lam: float
    inner_iters: int = 1
    bare_linear: bool = False

    def __post_init__(self):
        if self.eta1 <= 0:
            raise ConfigError(f"eta1 must be > 0, got {self.eta1}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.inner_iters < 1:
            raise ConfigError(f"inner_iters must be >= 1, got {self.inner_iters}")


@dataclass
class EpsilonSchedule:
    """Geometric per-epoch decay of the gate smoothing constant."""

    init: float = 0.1
    decay: float = 0.96

    def __post_init__(self):
        if self.init <= 0:
            raise ConfigError(f"epsilon init must be > 0, got {self.init}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"epsilon decay must be in (0, 1], got {self.decay}")

    def value(self, epoch: int) -> float:
        return self.init * self.decay**epoch


def soft_threshold(alpha_hat, beta: float):
    """Closed-form prox of beta*|.|: shrink by beta, zero the (-beta, beta) band.

    Accepts a scalar or an array; the zero branch writes exact 0 and the sign
    of a nonzero output always matches the input.
    """
    if beta < 0:
        raise ConfigError(f"soft_threshold shrinkage must be >= 0, got {beta}")
    x = np.asarray(alpha_hat, dtype=np.float64)
    out = np.where(np.abs(x) < beta, 0.0, x - np.sign(x) * beta)
    if np.isscalar(alpha_hat) or x.ndim == 0:
        return float(out)
    return out


def hard_threshold(alpha_hat, beta: float):
    """Prox of beta*[. != 0]: keep an entry iff 0.5*entry^2 > beta, else exact 0.

    Survivors are not shrunk, which is what makes this comparator sensitive to
    initialization when iterated; provided for study, never used in training.
    """
    if beta < 0:
        raise ConfigError(f"hard_threshold penalty must be >= 0, got {beta}")
    x = np.asarray(alpha_hat, dtype=np.float64)
    out = np.where(0.5 * x * x > beta, x, 0.0)
    if np.isscalar(alpha_hat) or x.ndim == 0:
        return float(out)
    return out


def _beta(model: ResourceModel, counts: Sequence[int], l: int, cfg: ProxConfig) -> float:
    coupled = 0.0
    for (i, j), v in model.a.items():
        if i == l:
            coupled += v * counts[j]
        elif j == l:
            coupled += v * counts[i]
    if cfg.bare_linear:
        return cfg.eta1 * cfg.lam * coupled + model.b[l]
    return cfg.eta1 * cfg.lam * (coupled + model.b[l])


def prox_step(gates: list[GateVector], model: ResourceModel, cfg: ProxConfig) -> None:
    """Apply the alternating-relaxation prox to the gate state, in place.

    The anchor of every subproblem is the post-gradient alpha, held fixed
    across sweeps; only the L0 counts of the other groups are refreshed as
    the alternation visits the groups in layer order.  ``param`` mode
    soft-thresholds alpha entrywise; ``weightnorm`` mode applies the group
    form (scale each consumer-kernel input slice by max(0, 1 - beta/norm)),
    which zeroes whole slices exactly.
    """
    if len(gates) != model.num_groups:
        raise GraphInvariantError(
            f"{len(gates)} gate vectors for a model with {model.num_groups} groups"
        )
    if cfg.lam == 0.0:
        return
    mode = gates[0].mode if gates else "param"
    if mode == "param":
        anchors = [gv.alpha.data.copy() for gv in gates]
        counts = [gv.l0() for gv in gates]
        for _ in range(cfg.inner_iters):
            for l, gv in enumerate(gates):
                beta = _beta(model, counts, l, cfg)
                gv.alpha.data[...] = soft_threshold(anchors[l], beta)
                counts[l] = int(np.count_nonzero(gv.alpha.data))
    elif mode == "weightnorm":
        anchors = [gv.kernel_ref.data.copy() for gv in gates]
        counts = [gv.l0() for gv in gates]
        for _ in range(cfg.inner_iters):
            for l, gv in enumerate(gates):
                beta = _beta(model, counts, l, cfg)
                kd = anchors[l]
                axes = (0, 2, 3) if kd.ndim == 4 else (0,)
                norms = np.sqrt((kd * kd).sum(axis=axes))
                scale = np.where(norms > beta, 1.0 - beta / np.where(norms > 0, norms, 1.0), 0.0)
                shaped = scale[None, :, None, None] if kd.ndim == 4 else scale[None, :]
                gv.kernel_ref.data[...] = kd * shaped
                counts[l] = gv.l0()
    else:
        raise ConfigError(f"prox_step does not apply in gate mode {mode!r}")


def solve_bilinear_l0(
    u: Sequence[np.ndarray],
    coeff_a: np.ndarray,
    coeff_b: Sequence[float],
    cfg: ProxConfig,
    init: Optional[Sequence[np.ndarray]] = None,
    relax: str = "l1",
):
    """Alternating relaxation on a raw bilinear-L0 prox instance.

    Minimizes  0.5 * sum_l ||x_l - u_l||^2
               + eta1*lambda * (sum_{l!=k} a_lk ||x_l||_0 ||x_k||_0
                                + sum_l b_l ||x_l||_0)
    by visiting groups in order for ``inner_iters`` sweeps, thresholding each
    group against the fixed anchor u with beta built from the current L0
    counts of the other groups.  ``relax='l1'`` uses the soft threshold;
    ``relax='l0'`` uses the unrelaxed hard threshold (comparator only).

    Returns (solution vectors, per-sweep objective trace, converged flag);
    the flag is set when a full sweep leaves every vector bitwise unchanged.
    """
    u = [np.asarray(v, dtype=np.float64) for v in u]
    a = np.asarray(coeff_a, dtype=np.float64)
    b = np.asarray(coeff_b, dtype=np.float64)
    n = len(u)
    if a.shape != (n, n):
        raise GraphInvariantError(f"coefficient matrix shape {a.shape}, expected ({n}, {n})")
    if b.shape != (n,):
        raise GraphInvariantError(f"linear coefficients shape {b.shape}, expected ({n},)")
    if np.any(np.diag(a) != 0):
        raise GraphInvariantError("bilinear coefficient matrix must have a zero diagonal")
    thresh = soft_threshold if relax == "l1" else hard_threshold
    if relax not in ("l1", "l0"):
        raise ConfigError(f"relax must be 'l1' or 'l0', got {relax!r}")
    x = [v.copy() for v in (init if init is not None else u)]
    for xi, ui in zip(x, u):
        if xi.shape != ui.shape:
            raise GraphInvariantError(
                f"initialization shape {xi.shape} does not match anchor shape {ui.shape}"
            )

    def objective(vecs):
        counts = np.array([np.count_nonzero(v) for v in vecs], dtype=np.float64)
        quad = 0.5 * sum(((v - uu) ** 2).sum() for v, uu in zip(vecs, u))
        if cfg.bare_linear:
            res = cfg.eta1 * cfg.lam * float(counts @ a @ counts) + float(b @ counts)
        else:
            res = cfg.eta1 * cfg.lam * (float(counts @ a @ counts) + float(b @ counts))
        return quad + res

    trace = [objective(x)]
    converged = False
    for _ in range(cfg.inner_iters):
        prev = [v.copy() for v in x]
        counts = [int(np.count_nonzero(v)) for v in x]
        for l in range(n):
            # total sensitivity of the bilinear term to group l, whatever the
            # storage convention (triangular or symmetric) of the input matrix
            coupled = float(sum((a[l, k] + a[k, l]) * counts[k] for k in range(n) if k != l))
            if cfg.bare_linear:
                beta = cfg.eta1 * cfg.lam * coupled + float(b[l])
            else:
                beta = cfg.eta1 * cfg.lam * (coupled + float(b[l]))
            x[l] = np.asarray(thresh(u[l], beta))
            counts[l] = int(np.count_nonzero(x[l]))
        trace.append(objective(x))
        if all(np.array_equal(p, v) for p, v in zip(prev, x)):
            converged = True
            break
    return x, trace, converged


def prox_descent(
    u: Sequence[np.ndarray],
    coeff_a: np.ndarray,
    coeff_b: Sequence[float],
    init: Sequence[np.ndarray],
    eta: float,
    lam: float,
    steps: int,
    relax: str = "l1",
):
    """Iterated proximal gradient descent on the full bilinear-L0 objective.

    Each step descends the smooth part 0.5*sum ||x_l - u_l||^2 with step eta,
    then applies one alternating prox sweep with eta1 = eta.  Unlike
    :func:`solve_bilinear_l0` the anchor moves every step, so the trajectory
    (and with the l0 comparator, the final support) can depend on the
    initialization.  Returns (solution vectors, per-step objective trace).
    """
    u = [np.asarray(v, dtype=np.float64) for v in u]
    a = np.asarray(coeff_a, dtype=np.float64)
    b = np.asarray(coeff_b, dtype=np.float64)
    thresh = soft_threshold if relax == "l1" else hard_threshold
    if relax not in ("l1", "l0"):
        raise ConfigError(f"relax must be 'l1' or 'l0', got {relax!r}")
    x = [np.asarray(v, dtype=np.float64).copy() for v in init]
    n = len(u)

    def objective(vecs):
        counts = np.array([np.count_nonzero(v) for v in vecs], dtype=np.float64)
        quad = 0.5 * sum(((v - uu) ** 2).sum() for v, uu in zip(vecs, u))
        return quad + lam * (float(counts @ a @ counts) + float(b @ counts))

    trace = [objective(x)]
    for _ in range(steps):
        hat = [v - eta * (v - uu) for v, uu in zip(x, u)]
        counts = [int(np.count_nonzero(v)) for v in x]
        for l in range(n):
            coupled = float(sum((a[l, k] + a[k, l]) * counts[k] for k in range(n) if k != l))
            beta = eta * lam * (coupled + float(b[l]))
            x[l] = np.asarray(thresh(hat[l], beta))
            counts[l] = int(np.count_nonzero(x[l]))
        trace.append(objective(x))
    return x, trace


def resource_penalty(graph: NetworkGraph, model: ResourceModel, lam: float) -> Tensor:
    """Differentiable resource term for ``reg`` mode.

    Replaces each group's L0 count by the smoothed count sum_i g(norm_i), so
    lambda * R flows back into the kernels by plain gradient descent.
    """
    sums = []
    for gv in graph.gates:
        norms = ad.slice_norms(gv.kernel_ref)
        sums.append(ad.tsum(ad.gate_values(norms, gv.epsilon)))
    total = Tensor(np.array(float(model.const)))
    for (l, k), v in model.a.items():
        total = ad.add(total, ad.mul(Tensor(np.array(float(v))), ad.mul(sums[l], sums[k])))
    for l, v in enumerate(model.b):
        total = ad.add(total, ad.mul(Tensor(np.array(float(v))), sums[l]))
    return ad.mul(Tensor(np.array(lam)), total)


def loss_step(
    graph: NetworkGraph,
    batch,
    lr: float,
    alpha_lr_scale: float = 0.1,
    weight_decay: float = 0.0,
    resource_term=None,
) -> float:
    """One SGD step on the task loss for weights and gate alphas.

    Weights move with step ``lr`` (optionally weight-decayed); alphas move
    with ``lr * alpha_lr_scale`` through dL/dalpha = dL/dg * g'(alpha) and are
    never weight-decayed.  ``resource_term`` is an optional callable returning
    an extra differentiable loss tensor (used by ``reg`` mode).  Raises
    :class:`NumericsError` and leaves parameters untouched if the loss is not
    finite.
    """
    xb, yb = batch
    if len(np.asarray(yb)) == 0:
        raise ConfigError("loss_step needs a nonempty batch")
    params = graph.parameters()
    alphas = graph.gate_parameters()
    with Tape():
        logits = graph.forward(xb, training=True)
        loss = ad.softmax_cross_entropy(logits, yb)
        if resource_term is not None:
            loss = ad.add(loss, resource_term())
    value = loss.item()
    if not np.isfinite(value):
        zero_grad(params + alphas)
        raise NumericsError(f"non-finite training loss ({value}); step aborted")
    backward(loss)
    for p in params:
        if p.grad is not None:
            step = p.grad if weight_decay == 0.0 else p.grad + weight_decay * p.data
            p.data -= lr * step
        elif weight_decay != 0.0:
            p.data -= lr * weight_decay * p.data
    a_lr = lr * alpha_lr_scale
    for p in alphas:
        if p.grad is not None:
            p.data -= a_lr * p.grad
    zero_grad(params + alphas)
    return value


def epsilon_step(schedule: EpsilonSchedule, gates: list[GateVector], epoch: int) -> None:
    """Multiply every gate vector's epsilon by the decay factor (one boundary)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    for gv in gates:
        if np.isscalar(gv.epsilon):
            gv.epsilon = float(gv.epsilon) * schedule.decay
        else:
            gv.epsilon = gv.epsilon * schedule.decay
