"""Exact bilinear MAC model over gate-group channel counts.

For common CNN layers the multiply-accumulate count of the whole network is
a bilinear function of per-group channel counts,

    R(c) = sum_{l != k} a_lk c_l c_k + sum_l b_l c_l + const,

where c_l is the surviving channel count of gate group l.  A regular
convolution consuming group l and producing group k contributes
r^2 * H_out * W_out to a_lk; a depthwise convolution on group l contributes
r^2 * H_out * W_out to b_l; a dense layer contributes 1 per input-output
channel pair.  Dimensions not governed by any gate (the raw input when its
consumers are ungated, the final logits) fold in as constants: into b when
the other end of the layer is gated, into the constant term when neither end
is.  Only kernel MACs are counted; bias adds, batch norm, relu and pooling
are excluded.

All coefficients are exact integers, so evaluating the model at the full
channel counts reproduces the direct MAC count of the unpruned network
exactly, and evaluating it at the post-training zero pattern reproduces the
MAC count of the explicitly pruned network exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GraphInvariantError
from .network import GateVector, NetworkGraph, gate_site_map

__all__ = [
    "ResourceModel",
    "derive_coefficients",
    "flops_of_counts",
    "flops_of_gates",
    "direct_mac_count",
]


@dataclass
class ResourceModel:
    """Bilinear MAC coefficients indexed by gate group."""

    group_sizes: list[int]
    a: dict[tuple[int, int], int] = field(default_factory=dict)  # key l < k
    b: list[int] = field(default_factory=list)
    const: int = 0

    @property
    def num_groups(self) -> int:
        return len(self.group_sizes)

    def full_counts(self) -> list[int]:
        return list(self.group_sizes)

    def dump_csv(self, path) -> None:
        """Audit dump: one row per coefficient."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "group_l", "group_k", "coefficient"])
            for (l, k), v in sorted(self.a.items()):
                w.writerow(["bilinear", l, k, v])
            for l, v in enumerate(self.b):
                w.writerow(["linear", l, "", v])
            if self.const:
                w.writerow(["constant", "", "", self.const])


def flops_of_counts(model: ResourceModel, counts) -> int:
    """Evaluate the bilinear model at the given per-group channel counts."""
    counts = list(counts)
    if len(counts) != model.num_groups:
        raise GraphInvariantError(
            f"counts vector has length {len(counts)}, model has {model.num_groups} groups"
        )
    for c in counts:
        if c < 0:
            raise ConfigError(f"channel counts must be nonnegative, got {counts}")
    total = model.const
    for (l, k), v in model.a.items():
        total += v * counts[l] * counts[k]
    for l, v in enumerate(model.b):
        total += v * counts[l]
    return int(total)


def flops_of_gates(model: ResourceModel, gates: list[GateVector]) -> int:
    """Evaluate the model at the exact-zero L0 counts of the gate vectors."""
    if len(gates) != model.num_groups:
        raise GraphInvariantError(
            f"{len(gates)} gate vectors for a model with {model.num_groups} groups"
        )
    for gi, (gv, size) in enumerate(zip(gates, model.group_sizes)):
        if gv.channels != size:
            raise GraphInvariantError(
                f"gate group {gi} has {gv.channels} channels but the model expects {size}"
            )
    return flops_of_counts(model, [gv.l0() for gv in gates])


def derive_coefficients(graph: NetworkGraph) -> ResourceModel:
    """Build the exact MAC model for a graph with gates attached."""
    if graph.gate_mode is None:
        raise GraphInvariantError("derive_coefficients needs a graph with gates attached")
    shapes = graph.tensor_shapes()
    resolved, _pinned = graph.channel_classes()
    sites, groups = gate_site_map(graph)
    group_of_class = {cid: gi for gi, (cid, _, _) in enumerate(groups)}
    model = ResourceModel(
        group_sizes=[channels for _, channels, _ in groups],
        b=[0] * len(groups),
    )

    def dim_ref(tensor_name: str):
        """(group index, None) if gated, else (None, constant channel count)."""
        gi = group_of_class.get(resolved[tensor_name])
        if gi is not None:
            return gi, None
        return None, shapes[tensor_name][0]

    def accumulate(in_ref, out_ref, unit: int, layer_name: str):
        gi, cin = in_ref
        go, cout = out_ref
        if gi is not None and go is not None:
            if gi == go:
                raise GraphInvariantError(
                    f"layer {layer_name!r} has input and output in the same gate "
                    f"group; a bilinear model cannot represent a squared count"
                )
            key = (min(gi, go), max(gi, go))
            model.a[key] = model.a.get(key, 0) + unit
        elif gi is not None:
            model.b[gi] += unit * cout
        elif go is not None:
            model.b[go] += unit * cin
        else:
            model.const += unit * cin * cout

    for l in graph.layers:
        if l.kind == "conv":
            r = l.attrs["kernel"]
            _, ho, wo = shapes[l.name]
            accumulate(dim_ref(l.inputs[0]), dim_ref(l.name), r * r * ho * wo, l.name)
        elif l.kind == "dwconv":
            r = l.attrs["kernel"]
            _, ho, wo = shapes[l.name]
            gi, c = dim_ref(l.inputs[0])
            unit = r * r * ho * wo
            if gi is not None:
                model.b[gi] += unit
            else:
                model.const += unit * c
        elif l.kind == "dense":
            accumulate(dim_ref(l.inputs[0]), dim_ref(l.name), 1, l.name)
        elif l.kind == "bias_map":
            continue  # constant map, no kernel MACs
        # relu / pooling / batchnorm / add / flatten / select carry no kernel MACs
    return model


def direct_mac_count(graph: NetworkGraph) -> int:
    """Count kernel MACs of a concrete graph from its actual tensor shapes.

    Walks the layer list and sums c_in * c_out * r^2 * H_out * W_out per conv,
    r^2 * H_out * W_out per depthwise channel and m * n per dense layer.  Used
    as the independent side of the exactness checks; it never consults the
    bilinear coefficients.
    """
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
            m = shapes[l.inputs[0]][0]
            n = shapes[l.name][0]
            total += m * n
    return total
