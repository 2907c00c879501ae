"""Network surgery at training end.

Channels whose gate argument is exactly zero are removed; surviving gate
values are multiplied into the input slices of every consumer kernel, so the
pruned network computes identical outputs (W (g . x) = (W diag(g)) x on the
surviving support).  Shared groups are removed consistently at every site.
When a whole gate vector is zero its consumer convolution degenerates to a
constant per-channel bias map; the dead producer layers behind it are
eliminated while the bias path (and any batch-norm shift applied to it) stays
on the skip branch.

No thresholding is ever applied: an entry either is exactly zero or it
survives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import GraphInvariantError
from .network import LayerSpec, NetworkGraph, gate_site_map
from .resource import derive_coefficients, direct_mac_count, flops_of_counts, flops_of_gates

__all__ = ["PruneReport", "absorb_and_remove", "consistency_check"]


@dataclass
class PruneReport:
    """What the surgery did and what it cost."""

    groups: list[dict] = field(default_factory=list)  # name, kept, removed, gate values
    flops_before: int = 0
    flops_after: int = 0
    params_before: int = 0
    params_after: int = 0
    max_logit_dev: Optional[float] = None
    accuracy_super: Optional[float] = None
    accuracy_pruned: Optional[float] = None
    notes: list[str] = field(default_factory=list)

    @property
    def flops_ratio(self) -> float:
        return self.flops_after / self.flops_before if self.flops_before else 1.0

    def to_text(self) -> str:
        lines = ["pruning report", "=" * 40]
        lines.append(f"MACs before:   {self.flops_before}")
        lines.append(f"MACs after:    {self.flops_after}  (ratio {self.flops_ratio:.6f})")
        lines.append(f"params before: {self.params_before}")
        lines.append(f"params after:  {self.params_after}")
        if self.max_logit_dev is not None:
            lines.append(f"max |logit deviation| on probes: {self.max_logit_dev:.3e}")
        if self.accuracy_super is not None:
            lines.append(
                f"probe accuracy super-net / pruned: "
                f"{self.accuracy_super:.6f} / {self.accuracy_pruned:.6f}"
            )
        lines.append("")
        for g in self.groups:
            lines.append(
                f"group {g['group']} ({g['sites']}): kept {len(g['kept'])} of "
                f"{len(g['kept']) + len(g['removed'])}, removed {g['removed']}"
            )
        if self.notes:
            lines.append("")
            lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "channel", "kept", "gate_value"])
            for g in self.groups:
                vals = g["gate_values"]
                for i in sorted(g["kept"]):
                    w.writerow([g["group"], i, 1, repr(float(vals[i]))])
                for i in sorted(g["removed"]):
                    w.writerow([g["group"], i, 0, repr(float(vals[i]))])


def _keep_indices(mask: np.ndarray) -> np.ndarray:
    return np.flatnonzero(mask)


def absorb_and_remove(graph: NetworkGraph):
    """Absorb surviving gates into consumer kernels and delete zero channels.

    Returns ``(pruned_graph, report)``.  The pruned graph carries no gate
    state.  A graph without gates is passed through untouched (identity).
    """
    report = PruneReport()
    report.params_before = graph.num_params()
    if graph.gate_mode is None or not graph.gates:
        pruned = graph.copy()
        pruned.gate_mode = None
        pruned.gates = []
        pruned.gate_sites = {}
        n = direct_mac_count(graph)
        report.flops_before = report.flops_after = n
        report.params_after = report.params_before
        report.notes.append("no gates attached; graph returned unchanged")
        return pruned, report

    model = derive_coefficients(graph)
    report.flops_before = flops_of_counts(model, model.full_counts())
    report.flops_after = flops_of_gates(model, graph.gates)

    resolved, _ = graph.channel_classes()
    sites, groups = gate_site_map(graph)
    shapes = graph.tensor_shapes()

    # per-class masks and absorption gains (classes without gates keep all)
    class_mask: dict[int, np.ndarray] = {}
    class_gains: dict[int, np.ndarray] = {}
    for gi, (cid, channels, names) in enumerate(groups):
        gv = graph.gates[gi]
        arg = gv.argument()
        mask = arg != 0.0
        class_mask[cid] = mask
        class_gains[cid] = gv.values()
        report.groups.append({
            "group": gi,
            "sites": ",".join(names),
            "kept": _keep_indices(mask).tolist(),
            "removed": _keep_indices(~mask).tolist(),
            "gate_values": gv.values(),
        })

    def mask_of(tensor_name):
        cid = resolved[tensor_name]
        if cid in class_mask:
            return class_mask[cid], class_gains[cid]
        return None, None

    new_layers: list[LayerSpec] = []
    consumer_rewrites: dict[str, str] = {}  # tensor name -> replacement name

    # the raw input cannot shrink at its producer: select surviving channels
    in_mask, _ = mask_of("input")
    entry_name = "input"
    if in_mask is not None and not in_mask.all():
        sel = LayerSpec("input_select", "select", ["input"],
                        {"indices": _keep_indices(in_mask).tolist()})
        new_layers.append(sel)
        consumer_rewrites["input"] = "input_select"
        report.notes.append(
            f"input channels {_keep_indices(~in_mask).tolist()} removed via a select layer"
        )

    for l in graph.layers:
        nl = l.copy()
        nl.inputs = [consumer_rewrites.get(nm, nm) for nm in nl.inputs]
        imask, igains = (mask_of(l.inputs[0]) if l.inputs else (None, None))
        omask, _ = mask_of(l.name)

        if l.kind == "conv":
            kd = nl.params["kernel"].data
            if l.name in graph.gate_sites and igains is not None:
                kd = kd * igains[None, :, None, None]
            if imask is not None:
                kd = kd[:, imask, :, :]
            if omask is not None:
                kd = kd[omask]
                if "bias" in nl.params:
                    nl.params["bias"].data = nl.params["bias"].data[omask]
            nl.params["kernel"].data = kd
            nl.attrs["out_channels"] = kd.shape[0]
            if kd.shape[1] == 0:
                # every input channel was zero-gated: the conv output is its
                # bias, a constant per-channel map
                h, w = shapes[l.name][1:]
                bias = nl.params.get("bias")
                bias_data = bias.data if bias is not None else np.zeros(kd.shape[0])
                nl = LayerSpec(l.name, "bias_map", ["input"],
                               {"channels": kd.shape[0], "height": h, "width": w})
                nl.params["bias"] = Tensor(bias_data.copy(), requires_grad=True,
                                           name=f"{l.name}.bias")
                report.notes.append(
                    f"conv {l.name!r} lost all input channels; degenerated to a "
                    f"constant bias map (block removed up to its bias path)"
                )
        elif l.kind == "dwconv":
            if imask is not None:
                nl.params["kernel"].data = nl.params["kernel"].data[imask]
                if "bias" in nl.params:
                    nl.params["bias"].data = nl.params["bias"].data[imask]
        elif l.kind == "dense":
            wd = nl.params["weight"].data
            if l.name in graph.gate_sites and igains is not None:
                wd = wd * igains[None, :]
            if imask is not None:
                wd = wd[:, imask]
            if omask is not None:
                wd = wd[omask]
                if "bias" in nl.params:
                    nl.params["bias"].data = nl.params["bias"].data[omask]
            nl.params["weight"].data = wd
            nl.attrs["out_features"] = wd.shape[0]
            if wd.shape[1] == 0:
                report.notes.append(
                    f"dense {l.name!r} lost all input features; retained as a "
                    f"degenerate bias-only layer"
                )
        elif l.kind == "batchnorm":
            if imask is not None:
                for key in ("scale", "shift"):
                    nl.params[key].data = nl.params[key].data[imask]
                for key in ("running_mean", "running_var"):
                    nl.buffers[key] = nl.buffers[key][imask]
        elif l.kind == "flatten":
            fmask, _ = mask_of(l.name)
            if fmask is not None and not fmask.all():
                # flattened features cannot shrink at the producer; select them
                new_layers.append(nl)
                sel = LayerSpec(f"{l.name}_keep", "select", [l.name],
                                {"indices": _keep_indices(fmask).tolist()})
                consumer_rewrites[l.name] = sel.name
                new_layers.append(sel)
                report.notes.append(
                    f"flatten {l.name!r}: removed features selected out after the reshape"
                )
                continue
        new_layers.append(nl)

    # dead-code elimination: keep only layers reachable from the output
    needed = {graph.output}
    for l in reversed(new_layers):
        if l.name in needed:
            needed.update(l.inputs)
    kept_layers = [l for l in new_layers if l.name in needed]
    dropped = [l.name for l in new_layers if l.name not in needed]
    if dropped:
        report.notes.append(f"dead layers eliminated: {dropped}")

    pruned = NetworkGraph(graph.input_shape, kept_layers, graph.output,
                          nogate=graph.nogate)
    report.params_after = pruned.num_params()
    return pruned, report


def consistency_check(super_graph: NetworkGraph, pruned_graph: NetworkGraph, probes):
    """Compare inference outputs of the gated super-net and the pruned net.

    ``probes`` is an iterable of (inputs, labels) batches.  Returns
    (max absolute logit deviation, (accuracy of super-net, accuracy of pruned)).
    """
    max_dev = 0.0
    hits_s = hits_p = total = 0
    for xb, yb in probes:
        ls = super_graph.forward(xb, training=False).data
        lp = pruned_graph.forward(xb, training=False).data
        if ls.shape != lp.shape:
            raise GraphInvariantError(
                f"logit shapes differ between super-net {ls.shape} and pruned net {lp.shape}"
            )
        max_dev = max(max_dev, float(np.abs(ls - lp).max()))
        yb = np.asarray(yb)
        pred_s = ls.argmax(axis=-1)
        pred_p = lp.argmax(axis=-1)
        hits_s += int((pred_s == yb).sum())
        hits_p += int((pred_p == yb).sum())
        total += yb.size
    acc_s = hits_s / total if total else float("nan")
    acc_p = hits_p / total if total else float("nan")
    return max_dev, (acc_s, acc_p)
