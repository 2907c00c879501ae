"""Network graphs with polarizing channel gates.

A :class:`NetworkGraph` is an ordered, acyclic list of layers over named
tensors.  Gates are attached on the input of every regular convolution and
dense layer (never on depthwise convolutions, which mix no channels).  Gate
sites whose tensors are connected through channel-preserving layers or
elementwise adds are forced into one share group backed by a single
:class:`GateVector`, so a channel is kept or removed consistently everywhere
it appears, including across skip connections.

Three gate parameterizations are supported:

* ``param`` - a trainable vector alpha per group; the gate value is the
  smoothed-L0 function alpha^2 / (alpha^2 + epsilon) with one epsilon per
  group.
* ``weightnorm`` - the gate argument is the Euclidean norm of the consumer
  kernel's input-channel slice, with a per-gate epsilon frozen at one tenth
  of the initial norm.
* ``reg`` - no gate multiplies the activations; gate values of kernel-slice
  norms enter only the differentiable resource penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, GraphInvariantError

__all__ = [
    "GATE_MODES",
    "LayerSpec",
    "GateVector",
    "NetworkGraph",
    "attach_gates",
    "zero_gate_count",
    "init_params",
]

GATE_MODES = ("param", "weightnorm", "reg")

# layer kinds whose output occupies the same channel space as their input
_CHANNEL_PRESERVING = {"relu", "avgpool", "gap", "batchnorm", "dwconv"}
_GATED_KINDS = {"conv", "dense"}
_ALL_KINDS = _CHANNEL_PRESERVING | _GATED_KINDS | {"add", "flatten", "select", "bias_map"}


@dataclass
class LayerSpec:
    """One layer: kind, producer names, scalar attributes and parameter tensors."""

    name: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self) -> "LayerSpec":
        return LayerSpec(
            name=self.name,
            kind=self.kind,
            inputs=list(self.inputs),
            attrs=dict(self.attrs),
            params={
                k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=v.name)
                for k, v in self.params.items()
            },
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )


class GateVector:
    """Trainable gate state for one share group of channel-gate sites."""

    def __init__(self, mode, channels, sites, class_id, alpha=None, epsilon=0.1, kernel_ref=None):
        if mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {mode!r}, expected one of {GATE_MODES}")
        eps = np.asarray(epsilon, dtype=np.float64)
        if np.any(eps <= 0):
            raise ConfigError(f"gate epsilon must be > 0, got {epsilon}")
        self.mode = mode
        self.channels = int(channels)
        self.sites = list(sites)
        self.class_id = class_id
        self.alpha = alpha
        self.epsilon = float(eps) if eps.ndim == 0 else eps
        self.kernel_ref = kernel_ref

    def argument(self) -> np.ndarray:
        """Current gate argument: alpha, or consumer-kernel slice norms."""
        if self.mode == "param":
            return self.alpha.data
        kd = self.kernel_ref.data
        axes = (0, 2, 3) if kd.ndim == 4 else (0,)
        return np.sqrt((kd * kd).sum(axis=axes))

    def values(self) -> np.ndarray:
        """Gate values g(argument) without touching the tape."""
        x = self.argument()
        denom = x * x + self.epsilon
        return np.where(x == 0.0, 0.0, x * x / denom)

    def l0(self) -> int:
        return self.channels - zero_gate_count(self)

    def __repr__(self):
        return (
            f"GateVector(mode={self.mode!r}, channels={self.channels}, "
            f"sites={self.sites}, zeros={zero_gate_count(self)})"
        )


def zero_gate_count(gv: GateVector) -> int:
    """Number of gate arguments that are exactly zero (no thresholding)."""
    return int(np.count_nonzero(gv.argument() == 0.0))


class NetworkGraph:
    """Ordered layer list over named tensors plus optional gate state."""

    def __init__(self, input_shape, layers: Iterable[LayerSpec], output: str,
                 nogate: Optional[Iterable[str]] = None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.output = output
        self.nogate = set(nogate or ())
        self.gate_mode: Optional[str] = None
        self.gates: list[GateVector] = []
        self.gate_sites: dict[str, int] = {}  # consumer layer name -> gate index
        self.validate()

    # -- structure ---------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise GraphInvariantError(f"no layer named {name!r}")

    def consumers(self, tensor_name: str) -> list[LayerSpec]:
        return [l for l in self.layers if tensor_name in l.inputs]

    def validate(self) -> None:
        seen = {"input"}
        names = set()
        for l in self.layers:
            if l.kind not in _ALL_KINDS:
                raise GraphInvariantError(f"layer {l.name!r} has unknown kind {l.kind!r}")
            if l.name in names or l.name == "input":
                raise GraphInvariantError(f"duplicate layer name {l.name!r}")
            names.add(l.name)
            want = 2 if l.kind == "add" else 1
            if len(l.inputs) != want:
                raise GraphInvariantError(
                    f"layer {l.name!r} ({l.kind}) takes {want} inputs, got {len(l.inputs)}"
                )
            for src in l.inputs:
                if src not in seen:
                    raise GraphInvariantError(
                        f"layer {l.name!r} consumes {src!r} before it is produced"
                    )
            seen.add(l.name)
        if self.output not in names:
            raise GraphInvariantError(f"output tensor {self.output!r} is not produced")
        self.tensor_shapes()  # raises on inconsistent shapes

    def tensor_shapes(self) -> dict[str, tuple]:
        """Static shape of every tensor, keyed by producer name."""
        shapes: dict[str, tuple] = {"input": self.input_shape}

        def chw(name, layer):
            s = shapes[name]
            if len(s) != 3:
                raise GraphInvariantError(
                    f"layer {layer.name!r} ({layer.kind}) needs an image input, "
                    f"got shape {s} from {name!r}"
                )
            return s

        for l in self.layers:
            a = l.attrs
            if l.kind == "conv":
                c, h, w = chw(l.inputs[0], l)
                r, st, p = a["kernel"], a.get("stride", 1), a.get("padding", 0)
                ho = (h + 2 * p - r) // st + 1
                wo = (w + 2 * p - r) // st + 1
                if ho < 1 or wo < 1:
                    raise GraphInvariantError(
                        f"conv {l.name!r}: kernel {r} stride {st} padding {p} "
                        f"does not fit input {h}x{w}"
                    )
                shapes[l.name] = (a["out_channels"], ho, wo)
            elif l.kind == "dwconv":
                c, h, w = chw(l.inputs[0], l)
                r, st, p = a["kernel"], a.get("stride", 1), a.get("padding", 0)
                shapes[l.name] = (c, (h + 2 * p - r) // st + 1, (w + 2 * p - r) // st + 1)
            elif l.kind == "dense":
                s = shapes[l.inputs[0]]
                if len(s) != 1:
                    raise GraphInvariantError(
                        f"dense {l.name!r} needs a vector input, got shape {s}"
                    )
                shapes[l.name] = (a["out_features"],)
            elif l.kind == "avgpool":
                c, h, w = chw(l.inputs[0], l)
                k = a["kernel"]
                st = a.get("stride") or k
                shapes[l.name] = (c, (h - k) // st + 1, (w - k) // st + 1)
            elif l.kind == "gap":
                c, h, w = chw(l.inputs[0], l)
                shapes[l.name] = (c,)
            elif l.kind == "flatten":
                s = shapes[l.inputs[0]]
                shapes[l.name] = (int(np.prod(s)),)
            elif l.kind == "add":
                s0, s1 = shapes[l.inputs[0]], shapes[l.inputs[1]]
                if s0 != s1:
                    raise GraphInvariantError(
                        f"add {l.name!r}: mismatched input shapes {s0} vs {s1} "
                        f"(strided or reshaped skip paths are not supported)"
                    )
                shapes[l.name] = s0
            elif l.kind in ("relu", "batchnorm"):
                shapes[l.name] = shapes[l.inputs[0]]
            elif l.kind == "select":
                s = shapes[l.inputs[0]]
                kept = len(a["indices"])
                shapes[l.name] = (kept,) + tuple(s[1:])
            elif l.kind == "bias_map":
                shapes[l.name] = (a["channels"], a["height"], a["width"])
        return shapes

    # -- channel classes ----------------------------------------------------

    def channel_classes(self):
        """Partition tensors into channel spaces.

        Returns (class_of: tensor name -> class id, pinned: set of class ids
        that must never be gated).  Elementwise adds merge the classes of
        their operands; channel-preserving layers propagate them; regular
        convs, dense layers and flattens start fresh classes.
        """
        parent: dict[int, int] = {}

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        def union(i, j):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)

        next_id = [0]

        def fresh():
            i = next_id[0]
            next_id[0] += 1
            parent[i] = i
            return i

        class_of = {"input": fresh()}
        pinned_raw: set[int] = set()
        for l in self.layers:
            if l.kind in _CHANNEL_PRESERVING:
                class_of[l.name] = class_of[l.inputs[0]]
            elif l.kind == "add":
                union(class_of[l.inputs[0]], class_of[l.inputs[1]])
                class_of[l.name] = class_of[l.inputs[0]]
            elif l.kind == "flatten":
                pinned_raw.add(class_of[l.inputs[0]])
                class_of[l.name] = fresh()
            elif l.kind in ("conv", "dense", "select", "bias_map"):
                class_of[l.name] = fresh()

        resolved = {name: find(cid) for name, cid in class_of.items()}
        pinned = {find(c) for c in pinned_raw}
        pinned.add(resolved[self.output])
        for l in self.layers:
            if l.name in self.nogate and l.kind in _GATED_KINDS:
                pinned.add(resolved[l.inputs[0]])
        return resolved, pinned

    def class_channels(self, resolved=None) -> dict[int, int]:
        resolved = resolved or self.channel_classes()[0]
        shapes = self.tensor_shapes()
        counts: dict[int, int] = {}
        for name, cid in resolved.items():
            c = shapes[name][0]
            if cid in counts and counts[cid] != c:
                raise GraphInvariantError(
                    f"channel class {cid} has inconsistent channel counts "
                    f"({counts[cid]} vs {c} at {name!r})"
                )
            counts[cid] = c
        return counts

    # -- parameters ----------------------------------------------------------

    def parameters(self):
        """All weight tensors (excludes gate alphas and BN running buffers)."""
        out = []
        for l in self.layers:
            out.extend(l.params.values())
        return out

    def gate_parameters(self):
        return [gv.alpha for gv in self.gates if gv.mode == "param"]

    def num_params(self) -> int:
        n = sum(t.size for t in self.parameters())
        n += sum(gv.alpha.size for gv in self.gates if gv.mode == "param")
        return n

    def copy(self) -> "NetworkGraph":
        g = NetworkGraph(self.input_shape, [l.copy() for l in self.layers],
                         self.output, nogate=self.nogate)
        g.gate_mode = self.gate_mode
        g.gate_sites = dict(self.gate_sites)
        for gv in self.gates:
            alpha = None
            if gv.alpha is not None:
                alpha = Tensor(gv.alpha.data.copy(), requires_grad=True, name=gv.alpha.name)
            eps = gv.epsilon if np.isscalar(gv.epsilon) else np.array(gv.epsilon, copy=True)
            kref = None
            if gv.kernel_ref is not None:
                consumer = g.layer(gv.sites[0])
                kref = consumer.params["kernel" if consumer.kind == "conv" else "weight"]
            g.gates.append(GateVector(gv.mode, gv.channels, gv.sites, gv.class_id,
                                      alpha=alpha, epsilon=eps, kernel_ref=kref))
        return g

    # -- execution -----------------------------------------------------------

    def _gate_tensor(self, gv: GateVector) -> Tensor:
        if gv.mode == "param":
            return ad.gate_values(gv.alpha, gv.epsilon)
        norms = ad.slice_norms(gv.kernel_ref)
        return ad.gate_values(norms, gv.epsilon)

    def forward(self, x, training: bool = False) -> Tensor:
        """Run the graph; gated layers scale their input channels first."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        values: dict[str, Tensor] = {"input": x}
        gate_cache: dict[int, Tensor] = {}
        apply_gates = self.gate_mode in ("param", "weightnorm")
        for l in self.layers:
            ins = [values[nm] for nm in l.inputs]
            if apply_gates and l.name in self.gate_sites:
                gi = self.gate_sites[l.name]
                if gi not in gate_cache:
                    gate_cache[gi] = self._gate_tensor(self.gates[gi])
                ins[0] = ad.channel_scale(ins[0], gate_cache[gi])
            values[l.name] = self._apply(l, ins, training)
        return values[self.output]

    def _apply(self, l: LayerSpec, ins, training: bool) -> Tensor:
        a = l.attrs
        if l.kind == "conv":
            return ad.conv2d(ins[0], l.params["kernel"], l.params.get("bias"),
                             stride=a.get("stride", 1), padding=a.get("padding", 0))
        if l.kind == "dwconv":
            return ad.depthwise_conv2d(ins[0], l.params["kernel"], l.params.get("bias"),
                                       stride=a.get("stride", 1), padding=a.get("padding", 0))
        if l.kind == "dense":
            return ad.dense(ins[0], l.params["weight"], l.params.get("bias"))
        if l.kind == "relu":
            return ad.relu(ins[0])
        if l.kind == "avgpool":
            return ad.avgpool2d(ins[0], a["kernel"], a.get("stride"))
        if l.kind == "gap":
            return ad.global_avgpool(ins[0])
        if l.kind == "flatten":
            return ad.flatten(ins[0])
        if l.kind == "batchnorm":
            return ad.batchnorm2d(ins[0], l.params["scale"], l.params["shift"],
                                  l.buffers["running_mean"], l.buffers["running_var"],
                                  training=training,
                                  momentum=a.get("momentum", 0.1), eps=a.get("eps", 1e-5))
        if l.kind == "add":
            return ad.add(ins[0], ins[1])
        if l.kind == "select":
            return _select_channels(ins[0], a["indices"])
        if l.kind == "bias_map":
            return _bias_map(l.params["bias"], a["height"], a["width"], ins[0])
        raise GraphInvariantError(f"cannot execute layer kind {l.kind!r}")


def _select_channels(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    axis = 0 if x.data.ndim in (1, 3) else 1
    out = Tensor(np.take(x.data, idx, axis=axis))

    def rule(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            gx[idx] = g
        else:
            gx[:, idx] = g
        return (gx,)

    return ad._record(out, (x,), rule)


def _bias_map(bias: Tensor, h: int, w: int, ref: Tensor) -> Tensor:
    # constant per-channel map left behind when a conv lost all input channels;
    # ref (usually the network input) only supplies the batch dimension
    d = bias.data.shape[0]
    batched = ref.data.ndim in (2, 4)
    if batched:
        n = ref.data.shape[0]
        out = Tensor(np.broadcast_to(bias.data[None, :, None, None], (n, d, h, w)).copy())
    else:
        out = Tensor(np.broadcast_to(bias.data[:, None, None], (d, h, w)).copy())

    def rule(g):
        gb = g.sum(axis=(0, 2, 3)) if batched else g.sum(axis=(1, 2))
        return (None, gb)

    return ad._record(out, (ref, bias), rule)


def gate_site_map(graph: NetworkGraph):
    """Compute gate sites and share groups without mutating the graph.

    Returns (sites, groups) where sites maps a consumer layer name to its
    share-group index and groups is an ordered list of
    (class_id, channel_count, [site names]).
    """
    resolved, pinned = graph.channel_classes()
    counts = graph.class_channels(resolved)
    order: list[int] = []
    members: dict[int, list[str]] = {}
    for l in graph.layers:
        if l.kind not in _GATED_KINDS:
            continue
        cid = resolved[l.inputs[0]]
        if cid in pinned:
            continue
        if cid not in members:
            members[cid] = []
            order.append(cid)
        members[cid].append(l.name)
    sites = {}
    groups = []
    for gi, cid in enumerate(order):
        for nm in members[cid]:
            sites[nm] = gi
        groups.append((cid, counts[cid], members[cid]))
    return sites, groups


def attach_gates(graph: NetworkGraph, mode: str = "param",
                 alpha_init: float = 1.0, epsilon_init: float = 0.1) -> NetworkGraph:
    """Attach one GateVector per share group; returns the same graph.

    ``param`` mode initializes every alpha to ``alpha_init`` and shares
    ``epsilon_init`` across the group.  ``weightnorm`` and ``reg`` modes use
    consumer-kernel slice norms as the gate argument and freeze each gate's
    epsilon at one tenth of the slice's initial norm; such groups must have a
    single consumer site because the argument is that consumer's kernel.
    """
    if mode not in GATE_MODES:
        raise ConfigError(f"unknown gate mode {mode!r}, expected one of {GATE_MODES}")
    if epsilon_init <= 0:
        raise ConfigError(f"epsilon_init must be > 0, got {epsilon_init}")
    sites, groups = gate_site_map(graph)
    gates: list[GateVector] = []
    for gi, (cid, channels, names) in enumerate(groups):
        if mode == "param":
            alpha = Tensor(np.full(channels, float(alpha_init)), requires_grad=True,
                           name=f"gate{gi}.alpha")
            gates.append(GateVector(mode, channels, names, cid,
                                    alpha=alpha, epsilon=epsilon_init))
        else:
            if len(names) > 1:
                raise GraphInvariantError(
                    f"gate mode {mode!r} derives gates from the consumer kernel and "
                    f"cannot share one group across sites {names}"
                )
            consumer = graph.layer(names[0])
            kref = consumer.params["kernel" if consumer.kind == "conv" else "weight"]
            kd = kref.data
            axes = (0, 2, 3) if kd.ndim == 4 else (0,)
            norms = np.sqrt((kd * kd).sum(axis=axes))
            if np.any(norms == 0.0):
                raise ConfigError(
                    f"layer {names[0]!r} has a zero-norm input slice; cannot seed "
                    f"per-gate epsilon from initial norms"
                )
            gates.append(GateVector(mode, channels, names, cid,
                                    epsilon=norms / 10.0, kernel_ref=kref))
    graph.gate_mode = mode
    graph.gates = gates
    graph.gate_sites = sites
    return graph


def init_params(graph: NetworkGraph, rng: np.random.Generator) -> NetworkGraph:
    """He-style initialization for every layer, in declaration order."""
    shapes = graph.tensor_shapes()
    for l in graph.layers:
        a = l.attrs
        if l.kind == "conv":
            c = shapes[l.inputs[0]][0]
            d, r = a["out_channels"], a["kernel"]
            std = np.sqrt(2.0 / (c * r * r))
            l.params["kernel"] = Tensor(rng.normal(0.0, std, (d, c, r, r)),
                                        requires_grad=True, name=f"{l.name}.kernel")
            if a.get("bias", True):
                l.params["bias"] = Tensor(np.zeros(d), requires_grad=True,
                                          name=f"{l.name}.bias")
        elif l.kind == "dwconv":
            c = shapes[l.inputs[0]][0]
            r = a["kernel"]
            std = np.sqrt(2.0 / (r * r))
            l.params["kernel"] = Tensor(rng.normal(0.0, std, (c, r, r)),
                                        requires_grad=True, name=f"{l.name}.kernel")
            if a.get("bias", False):
                l.params["bias"] = Tensor(np.zeros(c), requires_grad=True,
                                          name=f"{l.name}.bias")
        elif l.kind == "dense":
            m = shapes[l.inputs[0]][0]
            n = a["out_features"]
            std = np.sqrt(2.0 / m)
            l.params["weight"] = Tensor(rng.normal(0.0, std, (n, m)),
                                        requires_grad=True, name=f"{l.name}.weight")
            if a.get("bias", True):
                l.params["bias"] = Tensor(np.zeros(n), requires_grad=True,
                                          name=f"{l.name}.bias")
        elif l.kind == "batchnorm":
            c = shapes[l.inputs[0]][0]
            l.params["scale"] = Tensor(np.ones(c), requires_grad=True, name=f"{l.name}.scale")
            l.params["shift"] = Tensor(np.zeros(c), requires_grad=True, name=f"{l.name}.shift")
            l.buffers["running_mean"] = np.zeros(c)
            l.buffers["running_var"] = np.ones(c)
        elif l.kind == "bias_map":
            l.params.setdefault("bias", Tensor(np.zeros(a["channels"]),
                                               requires_grad=True, name=f"{l.name}.bias"))
    return graph
