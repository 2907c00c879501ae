"""Training orchestration: the gated training loop, fine-tuning and sweeps.

Each epoch runs minibatch SGD on the task loss followed by the proximal step
on the resource penalty (per minibatch by default, per epoch on request),
then decays the gate smoothing constant.  Per-epoch metrics go to
``metrics.csv`` (epoch, train_loss, val_loss, flops_ratio, zero_gates,
epsilon); gate-value histograms go to ``gates_epochN.csv`` at a fixed logging
interval so the polarization process can be replotted offline.  Runs are
fully reproducible from the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import softmax_cross_entropy
from .datasets import Dataset, make_dataset
from .errors import ConfigError
from .modelfile import load_checkpoint, load_model, save_checkpoint
from .network import NetworkGraph, attach_gates, init_params, zero_gate_count
from .optimizer import (
    EpsilonSchedule,
    ProxConfig,
    epsilon_step,
    loss_step,
    prox_step,
    resource_penalty,
)
from .pruner import absorb_and_remove, consistency_check
from .resource import derive_coefficients, flops_of_counts, flops_of_gates

__all__ = [
    "TrainConfig",
    "run_training",
    "run_prune",
    "run_finetune",
    "run_sweep",
    "evaluate",
    "write_gate_histogram",
]

_KNOWN_KEYS = {
    "model", "dataset", "epochs", "batch_size", "lr", "lr_schedule",
    "alpha_lr_scale", "weight_decay", "lam", "epsilon_init", "epsilon_decay",
    "seed", "prox_cadence", "prox_iters", "mode", "start", "out",
    "alpha_init", "recalc_bn_stats", "hist_interval",
    "finetune_epochs", "finetune_lr",
}


@dataclass
class TrainConfig:
    model: str = ""
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    lr_schedule: dict = field(default_factory=lambda: {"kind": "constant"})
    alpha_lr_scale: float = 0.1
    weight_decay: float = 0.0
    lam: float = 0.0
    epsilon_init: float = 0.1
    epsilon_decay: float = 0.96
    seed: int = 0
    prox_cadence: str = "batch"
    prox_iters: int = 1
    mode: str = "param"
    start: str = "scratch"
    out: str = "out"
    alpha_init: float = 1.0
    recalc_bn_stats: bool = False
    hist_interval: int = 0  # 0 -> max(1, epochs // 20)
    finetune_epochs: int = 0
    finetune_lr: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.prox_cadence not in ("batch", "epoch"):
            raise ConfigError(
                f"prox_cadence must be 'batch' or 'epoch', got {self.prox_cadence!r}"
            )
        if self.mode not in ("param", "weightnorm", "reg"):
            raise ConfigError(f"mode must be param, weightnorm or reg, got {self.mode!r}")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = set(doc) - _KNOWN_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        merged = dict(doc)
        for k, v in (overrides or {}).items():
            if v is not None:
                merged[k] = v
        return cls(**merged)


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    sched = cfg.lr_schedule or {"kind": "constant"}
    kind = sched.get("kind", "constant")
    if kind == "constant":
        return cfg.lr
    if kind == "step":
        every = int(sched.get("every", max(1, cfg.epochs // 3)))
        gamma = float(sched.get("gamma", 0.1))
        return cfg.lr * gamma ** (epoch // every)
    if kind == "cosine":
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(1, cfg.epochs)))
    raise ConfigError(f"unknown lr schedule kind {sched.get('kind')!r}")


def evaluate(graph: NetworkGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 256):
    """Mean cross-entropy loss and accuracy in inference mode."""
    losses = []
    hits = 0
    for lo in range(0, len(y), batch_size):
        xb, yb = x[lo : lo + batch_size], y[lo : lo + batch_size]
        logits = graph.forward(xb, training=False)
        losses.append(softmax_cross_entropy(logits, yb).item() * len(yb))
        hits += int((logits.data.argmax(axis=1) == yb).sum())
    return sum(losses) / len(y), hits / len(y)


def _fmt(x) -> str:
    return repr(float(x))


def _write_metrics(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,flops_ratio,zero_gates,epsilon\n")
        for r in rows:
            fh.write(
                f"{r['epoch']},{_fmt(r['train_loss'])},{_fmt(r['val_loss'])},"
                f"{_fmt(r['flops_ratio'])},{r['zero_gates']},{_fmt(r['epsilon'])}\n"
            )


def write_gate_histogram(path, gates, bins: int = 20) -> None:
    """Histogram of current gate values; exact zeros get their own row.

    The bin rows partition (0, 1] uniformly, so bin counts plus the exact-zero
    row always sum to the total number of gates.
    """
    values = np.concatenate([gv.values() for gv in gates]) if gates else np.empty(0)
    zeros = int(np.count_nonzero(values == 0.0))
    nonzero = values[values != 0.0]
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((nonzero * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        fh.write(f"exact_zero,exact_zero,{zeros}\n")
        for i in range(bins):
            fh.write(f"{_fmt(edges[i])},{_fmt(edges[i + 1])},{int(counts[i])}\n")


def _load_start_graph(cfg: TrainConfig) -> NetworkGraph:
    if cfg.start == "scratch":
        graph = load_model(cfg.model)
        init_params(graph, np.random.default_rng(cfg.seed))
        return graph
    graph = load_checkpoint(cfg.start)
    if graph.gate_mode is not None:
        raise ConfigError(
            "pretrained checkpoint already carries gates; expected an ungated model"
        )
    return graph


def _recalc_bn(graph: NetworkGraph, x, batch_size) -> None:
    # refresh running statistics by streaming training data in training mode
    for l in graph.layers:
        if l.kind == "batchnorm":
            l.buffers["running_mean"][...] = 0.0
            l.buffers["running_var"][...] = 1.0
    for lo in range(0, len(x), batch_size):
        graph.forward(x[lo : lo + batch_size], training=True)


def run_training(cfg: TrainConfig, dataset: Dataset | None = None):
    """Run the full gated training loop; returns (graph, summary dict)."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = dataset or make_dataset(cfg.dataset)
    graph = _load_start_graph(cfg)
    if data.input_shape != graph.input_shape:
        raise ConfigError(
            f"dataset produces {data.input_shape} inputs, model expects {graph.input_shape}"
        )
    attach_gates(graph, mode=cfg.mode, alpha_init=cfg.alpha_init,
                 epsilon_init=cfg.epsilon_init)
    model = derive_coefficients(graph)
    full = flops_of_counts(model, model.full_counts())
    schedule = EpsilonSchedule(cfg.epsilon_init, cfg.epsilon_decay)

    with open(out / "config.json", "w") as fh:
        json.dump({k: getattr(cfg, k) for k in sorted(_KNOWN_KEYS)}, fh, indent=2,
                  default=str)
        fh.write("\n")

    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    interval = cfg.hist_interval or max(1, cfg.epochs // 20)
    write_gate_histogram(out / "gates_epoch0.csv", graph.gates)

    reg_term = None
    if cfg.mode == "reg":
        reg_term = lambda: resource_penalty(graph, model, cfg.lam)

    n = len(data.train_y)
    for epoch in range(1, cfg.epochs + 1):
        lr = _lr_at(cfg, epoch - 1)
        prox_cfg = None
        if cfg.lam > 0 and cfg.mode in ("param", "weightnorm"):
            prox_cfg = ProxConfig(eta1=lr * cfg.alpha_lr_scale, lam=cfg.lam,
                                  inner_iters=cfg.prox_iters)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            batch = (data.train_x[sel], data.train_y[sel])
            losses.append(loss_step(graph, batch, lr, cfg.alpha_lr_scale,
                                    cfg.weight_decay, resource_term=reg_term))
            if prox_cfg is not None and cfg.prox_cadence == "batch":
                prox_step(graph.gates, model, prox_cfg)
        if prox_cfg is not None and cfg.prox_cadence == "epoch":
            prox_step(graph.gates, model, prox_cfg)
        epsilon_step(schedule, graph.gates, epoch - 1)
        if cfg.recalc_bn_stats:
            _recalc_bn(graph, data.train_x, cfg.batch_size)
        val_loss, val_acc = evaluate(graph, data.val_x, data.val_y)
        rows.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "flops_ratio": flops_of_gates(model, graph.gates) / full,
            "zero_gates": int(sum(zero_gate_count(gv) for gv in graph.gates)),
            "epsilon": schedule.value(epoch),
        })
        if epoch % interval == 0 or epoch == cfg.epochs:
            write_gate_histogram(out / f"gates_epoch{epoch}.csv", graph.gates)
    _write_metrics(out / "metrics.csv", rows)
    save_checkpoint(graph, out / "checkpoint")
    summary = {
        "final_flops_ratio": rows[-1]["flops_ratio"],
        "zero_gates": rows[-1]["zero_gates"],
        "val_loss": rows[-1]["val_loss"],
        "val_accuracy": val_acc,
        "full_macs": full,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return graph, summary


def run_prune(checkpoint_path, out_dir, dataset: Dataset | None = None,
              probe_batches: int = 4, batch_size: int = 64):
    """Surgery on a trained checkpoint; writes the pruned model and reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = load_checkpoint(checkpoint_path)
    pruned, report = absorb_and_remove(graph)
    if dataset is not None:
        probes = []
        for i in range(probe_batches):
            lo = i * batch_size
            xb = dataset.val_x[lo : lo + batch_size]
            yb = dataset.val_y[lo : lo + batch_size]
            if len(yb) == 0:
                break
            probes.append((xb, yb))
        dev, (acc_s, acc_p) = consistency_check(graph, pruned, probes)
        report.max_logit_dev = dev
        report.accuracy_super = acc_s
        report.accuracy_pruned = acc_p
    save_checkpoint(pruned, out / "pruned")
    with open(out / "prune_report.txt", "w") as fh:
        fh.write(report.to_text())
    report.to_csv(out / "prune_report.csv")
    return pruned, report


def run_finetune(cfg: TrainConfig, dataset: Dataset | None = None):
    """Plain SGD on a pruned model: no gates, no prox; returns (graph, summary)."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = dataset or make_dataset(cfg.dataset)
    graph = load_checkpoint(cfg.model)
    if graph.gate_mode is not None:
        raise ConfigError("finetune expects a pruned (ungated) model")
    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    n = len(data.train_y)
    val_loss, val_acc = evaluate(graph, data.val_x, data.val_y)
    for epoch in range(1, cfg.epochs + 1):
        lr = _lr_at(cfg, epoch - 1)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            batch = (data.train_x[sel], data.train_y[sel])
            losses.append(loss_step(graph, batch, lr, 0.0, cfg.weight_decay))
        val_loss, val_acc = evaluate(graph, data.val_x, data.val_y)
        rows.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "flops_ratio": 1.0,
            "zero_gates": 0,
            "epsilon": 0.0,
        })
    if rows:
        _write_metrics(out / "metrics.csv", rows)
    save_checkpoint(graph, out / "finetuned")
    summary = {"val_loss": val_loss, "val_accuracy": val_acc, "epochs": cfg.epochs}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return graph, summary


def run_sweep(cfg: TrainConfig, lambdas=None, epsilon_decays=None):
    """Train/prune/finetune at each sweep point; returns summary rows.

    Exactly one of ``lambdas`` or ``epsilon_decays`` must list at least two
    values.  Each point runs in its own subdirectory with its own RNG stream.
    Writes ``sweep_summary.csv`` under ``cfg.out``.
    """
    points = []
    if lambdas is not None and epsilon_decays is not None:
        raise ConfigError("sweep over lambda or epsilon decay, not both at once")
    if lambdas is not None:
        points = [("lambda", float(v)) for v in lambdas]
    elif epsilon_decays is not None:
        points = [("epsilon_decay", float(v)) for v in epsilon_decays]
    if len(points) < 2:
        raise ConfigError(f"a sweep needs at least 2 points, got {len(points)}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(cfg.dataset)
    rows = []
    for i, (kind, value) in enumerate(points):
        sub = out / f"{kind}_{value:g}"
        run_cfg = replace(cfg, out=str(sub))
        if kind == "lambda":
            run_cfg = replace(run_cfg, lam=value)
        else:
            run_cfg = replace(run_cfg, epsilon_decay=value)
        _, summary = run_training(run_cfg, dataset=data)
        pruned, report = run_prune(sub / "checkpoint.json", sub, dataset=data)
        fine_acc = report.accuracy_pruned
        if cfg.finetune_epochs > 0:
            ft_cfg = replace(
                run_cfg,
                model=str(sub / "pruned.json"),
                epochs=cfg.finetune_epochs,
                lr=cfg.finetune_lr or cfg.lr,
                out=str(sub / "finetune"),
            )
            _, ft_summary = run_finetune(ft_cfg, dataset=data)
            fine_acc = ft_summary["val_accuracy"]
        rows.append({
            "lambda": run_cfg.lam,
            "epsilon_decay": run_cfg.epsilon_decay,
            "flops_ratio": summary["final_flops_ratio"],
            "supernet_acc": summary["val_accuracy"],
            "pruned_acc": report.accuracy_pruned,
            "finetuned_acc": fine_acc,
        })
    with open(out / "sweep_summary.csv", "w") as fh:
        fh.write("lambda,epsilon_decay,flops_ratio,supernet_acc,pruned_acc,finetuned_acc\n")
        for r in rows:
            fh.write(
                f"{_fmt(r['lambda'])},{_fmt(r['epsilon_decay'])},{_fmt(r['flops_ratio'])},"
                f"{_fmt(r['supernet_acc'])},{_fmt(r['pruned_acc'])},{_fmt(r['finetuned_acc'])}\n"
            )
    return rows
