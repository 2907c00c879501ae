"""Model persistence: JSON topology plus a flat float64 weights sidecar.

The topology document lists layers (kind, wiring, shape attributes), the
output tensor, optional no-gate markers and, for gated checkpoints, the gate
share groups with their epsilon values.  Weights live next to it in a binary
sidecar: an 8-byte magic/version tag, an unsigned 64-bit little-endian count,
then the raw little-endian float64 values of every declared array in
declaration order (layer parameters and batch-norm buffers first, then gate
alphas).  The ``arrays`` section of the JSON records each array's name and
shape so the sidecar is auditable without this package.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .network import GateVector, LayerSpec, NetworkGraph

__all__ = ["load_model", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"PGWTv1\x00\x00"

_STRUCT_KEYS = {"name", "kind", "inputs"}
_PARAM_ORDER = {
    "conv": ("kernel", "bias"),
    "dwconv": ("kernel", "bias"),
    "dense": ("weight", "bias"),
    "batchnorm": ("scale", "shift"),
    "bias_map": ("bias",),
}
_BUFFER_ORDER = {"batchnorm": ("running_mean", "running_var")}


def _layer_to_json(l: LayerSpec) -> dict:
    d = {"name": l.name, "kind": l.kind, "inputs": list(l.inputs)}
    d.update(l.attrs)
    return d


def _layer_from_json(d: dict) -> LayerSpec:
    if "name" not in d or "kind" not in d or "inputs" not in d:
        raise ConfigError(f"layer entry needs name/kind/inputs, got keys {sorted(d)}")
    attrs = {k: v for k, v in d.items() if k not in _STRUCT_KEYS}
    return LayerSpec(name=d["name"], kind=d["kind"], inputs=list(d["inputs"]), attrs=attrs)


def _ordered_arrays(graph: NetworkGraph):
    """(name, array, setter) triples in declaration order."""
    out = []
    for l in graph.layers:
        for key in _PARAM_ORDER.get(l.kind, ()):
            if key in l.params:
                t = l.params[key]
                out.append((f"{l.name}.{key}", t.data, ("param", l, key)))
        for key in _BUFFER_ORDER.get(l.kind, ()):
            if key in l.buffers:
                out.append((f"{l.name}.{key}", l.buffers[key], ("buffer", l, key)))
    for gi, gv in enumerate(graph.gates):
        if gv.mode == "param":
            out.append((f"gate{gi}.alpha", gv.alpha.data, ("alpha", gv, None)))
    return out


def save_checkpoint(graph: NetworkGraph, stem) -> Path:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns the JSON path."""
    stem = Path(stem)
    arrays = _ordered_arrays(graph)
    doc = {
        "format": "polargate-model-v1",
        "input": list(graph.input_shape),
        "output": graph.output,
        "nogate": sorted(graph.nogate),
        "layers": [_layer_to_json(l) for l in graph.layers],
        "arrays": [{"name": nm, "shape": list(arr.shape)} for nm, arr, _ in arrays],
    }
    if graph.gate_mode is not None:
        doc["gates"] = {
            "mode": graph.gate_mode,
            "groups": [
                {
                    "channels": gv.channels,
                    "sites": list(gv.sites),
                    "epsilon": (float(gv.epsilon) if np.isscalar(gv.epsilon)
                                else [float(e) for e in gv.epsilon]),
                }
                for gv in graph.gates
            ],
        }
    json_path = stem.with_suffix(".json")
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    flat = np.concatenate([arr.ravel() for _, arr, _ in arrays]) if arrays else np.empty(0)
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())
    return json_path


def _build_graph(doc: dict) -> NetworkGraph:
    if doc.get("format") != "polargate-model-v1":
        raise ConfigError(f"unsupported model format tag {doc.get('format')!r}")
    layers = [_layer_from_json(d) for d in doc.get("layers", [])]
    return NetworkGraph(doc["input"], layers, doc["output"], nogate=doc.get("nogate"))


def _attach_saved_gates(graph: NetworkGraph, doc: dict) -> None:
    from .network import gate_site_map  # local to avoid import noise at top

    gate_doc = doc.get("gates")
    if gate_doc is None:
        return
    mode = gate_doc["mode"]
    sites, groups = gate_site_map(graph)
    saved = gate_doc["groups"]
    if len(saved) != len(groups):
        raise ConfigError(
            f"checkpoint lists {len(saved)} gate groups, graph derives {len(groups)}"
        )
    gates = []
    for gi, ((cid, channels, names), g) in enumerate(zip(groups, saved)):
        if g["channels"] != channels or list(g["sites"]) != names:
            raise ConfigError(
                f"gate group {gi} mismatch: checkpoint has {g['sites']} x "
                f"{g['channels']}, graph derives {names} x {channels}"
            )
        eps = g["epsilon"]
        eps = float(eps) if np.isscalar(eps) else np.asarray(eps, dtype=np.float64)
        alpha = None
        kref = None
        if mode == "param":
            alpha = Tensor(np.ones(channels), requires_grad=True, name=f"gate{gi}.alpha")
        else:
            consumer = graph.layer(names[0])
            kref = consumer.params["kernel" if consumer.kind == "conv" else "weight"]
        gates.append(GateVector(mode, channels, names, cid, alpha=alpha,
                                epsilon=eps, kernel_ref=kref))
    graph.gate_mode = mode
    graph.gates = gates
    graph.gate_sites = sites


def load_model(path) -> NetworkGraph:
    """Load the topology only; parameters are left uninitialized."""
    with open(path) as fh:
        doc = json.load(fh)
    return _build_graph(doc)


def load_checkpoint(path) -> NetworkGraph:
    """Restore a graph with exact parameter, buffer and gate state."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    graph = _build_graph(doc)

    # materialize parameter tensors with the recorded shapes
    declared = doc.get("arrays", [])
    from .network import init_params

    init_params(graph, np.random.default_rng(0))  # allocate, then overwrite
    _attach_saved_gates(graph, doc)

    bin_path = path.with_suffix(".bin")
    with open(bin_path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ConfigError(f"{bin_path}: bad weights magic {magic!r}")
        (count,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(), dtype="<f8")
    if flat.size != count:
        raise ConfigError(
            f"{bin_path}: header promises {count} values, file holds {flat.size}"
        )
    arrays = _ordered_arrays(graph)
    if len(arrays) != len(declared):
        raise ConfigError(
            f"{path}: declares {len(declared)} arrays, graph expects {len(arrays)}"
        )
    offset = 0
    for (nm, arr, (slot, obj, key)), decl in zip(arrays, declared):
        if decl["name"] != nm or tuple(decl["shape"]) != arr.shape:
            raise ConfigError(
                f"{path}: array {decl['name']} {decl['shape']} does not match "
                f"expected {nm} {list(arr.shape)}"
            )
        n = arr.size
        chunk = flat[offset : offset + n].reshape(arr.shape)
        offset += n
        if slot == "param":
            obj.params[key].data = chunk.copy()
        elif slot == "buffer":
            obj.buffers[key] = chunk.copy()
        else:
            obj.alpha.data = chunk.copy()
    if offset != flat.size:
        raise ConfigError(f"{bin_path}: {flat.size - offset} trailing values not consumed")
    return graph
