"""Command line interface.

Subcommands: ``train`` (gated training with the proximal step), ``prune``
(surgery plus the equivalence report), ``finetune`` (plain SGD on the pruned
model), ``sweep`` (lambda or epsilon-decay sweeps with a summary table),
``solve-prox`` (standalone bilinear-L0 prox instances) and ``report``
(render figures from a run directory's CSV files).  Every command exits 0 on
success and nonzero with a one-line structured message on error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .datasets import make_dataset
from .errors import ConfigError, PolargateError
from .optimizer import ProxConfig, solve_bilinear_l0
from .training import TrainConfig, run_finetune, run_prune, run_sweep, run_training

__all__ = ["main", "parse_prox_instance"]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--lambda", dest="lam", type=float, help="resource balance factor")
    p.add_argument("--epsilon-init", dest="epsilon_init", type=float)
    p.add_argument("--epsilon-decay", dest="epsilon_decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha-lr-scale", dest="alpha_lr_scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("param", "weightnorm", "reg"))
    p.add_argument("--prox-cadence", dest="prox_cadence", choices=("batch", "epoch"))
    p.add_argument("--out", help="output directory (overrides config)")


def _config_from_args(args) -> TrainConfig:
    overrides = {
        k: getattr(args, k, None)
        for k in ("lam", "epsilon_init", "epsilon_decay", "epochs", "lr",
                  "alpha_lr_scale", "seed", "mode", "prox_cadence", "out")
    }
    return TrainConfig.from_file(args.config, overrides)


def parse_prox_instance(path):
    """Parse a plain-text bilinear-L0 prox instance.

    Directives, one per line ('#' starts a comment):

        groups N
        u      <entries of the next anchor vector>
        a      <l> <k> <coefficient>        (repeatable, sparse)
        b      <N linear coefficients>
        eta1   <prox learning rate>
        lambda <balance factor>
        iters  <sweep count>
        init   <entries of the next initialization vector>   (optional)

    Returns (u vectors, a matrix, b vector, ProxConfig, init vectors or None).
    """
    groups = None
    u: list[np.ndarray] = []
    init: list[np.ndarray] = []
    a_entries = []
    b = None
    eta1, lam, iters = 1.0, 1.0, 1
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            try:
                if key == "groups":
                    groups = int(rest[0])
                elif key == "u":
                    u.append(np.array([float(v) for v in rest]))
                elif key == "init":
                    init.append(np.array([float(v) for v in rest]))
                elif key == "a":
                    a_entries.append((int(rest[0]), int(rest[1]), float(rest[2])))
                elif key == "b":
                    b = np.array([float(v) for v in rest])
                elif key == "eta1":
                    eta1 = float(rest[0])
                elif key == "lambda":
                    lam = float(rest[0])
                elif key == "iters":
                    iters = int(rest[0])
                else:
                    raise ConfigError(f"{path}:{ln}: unknown directive {key!r}")
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{path}:{ln}: cannot parse {line!r} ({exc})") from exc
    if groups is None or groups < 1:
        raise ConfigError(f"{path}: missing or invalid 'groups' directive")
    if len(u) != groups:
        raise ConfigError(f"{path}: expected {groups} 'u' vectors, found {len(u)}")
    if init and len(init) != groups:
        raise ConfigError(f"{path}: expected {groups} 'init' vectors, found {len(init)}")
    a = np.zeros((groups, groups))
    for l, k, v in a_entries:
        if not (0 <= l < groups and 0 <= k < groups) or l == k:
            raise ConfigError(f"{path}: bad coefficient index a[{l},{k}]")
        a[l, k] = v
    if b is None:
        b = np.zeros(groups)
    if b.shape != (groups,):
        raise ConfigError(f"{path}: 'b' must list {groups} values")
    cfg = ProxConfig(eta1=eta1, lam=lam, inner_iters=iters)
    return u, a, b, cfg, (init or None)


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    _, summary = run_training(cfg)
    print(
        f"trained {cfg.epochs} epochs: final MACs ratio "
        f"{summary['final_flops_ratio']:.4f}, zero gates {summary['zero_gates']}, "
        f"val accuracy {summary['val_accuracy']:.4f}"
    )
    print(f"outputs in {cfg.out}")
    return 0


def _cmd_prune(args) -> int:
    dataset = None
    if args.config:
        cfg = TrainConfig.from_file(args.config, {})
        dataset = make_dataset(cfg.dataset)
    out = args.out or str(Path(args.checkpoint).parent)
    _, report = run_prune(args.checkpoint, out, dataset=dataset)
    print(f"MACs {report.flops_before} -> {report.flops_after} "
          f"(ratio {report.flops_ratio:.4f})")
    if report.max_logit_dev is not None:
        print(f"max |logit deviation| {report.max_logit_dev:.3e}; accuracy "
              f"{report.accuracy_super:.4f} -> {report.accuracy_pruned:.4f}")
    print(f"outputs in {out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    cfg = TrainConfig(**{**cfg.__dict__, "model": args.model})
    _, summary = run_finetune(cfg)
    print(f"finetuned {cfg.epochs} epochs: val accuracy {summary['val_accuracy']:.4f}")
    print(f"outputs in {cfg.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    lambdas = [float(v) for v in args.lambdas.split(",")] if args.lambdas else None
    decays = [float(v) for v in args.epsilon_decays.split(",")] if args.epsilon_decays else None
    rows = run_sweep(cfg, lambdas=lambdas, epsilon_decays=decays)
    for r in rows:
        print(
            f"lambda={r['lambda']:g} decay={r['epsilon_decay']:g} "
            f"ratio={r['flops_ratio']:.4f} super={r['supernet_acc']:.4f} "
            f"pruned={r['pruned_acc']:.4f} finetuned={r['finetuned_acc']:.4f}"
        )
    print(f"summary in {Path(cfg.out) / 'sweep_summary.csv'}")
    return 0


def _cmd_solve_prox(args) -> int:
    u, a, b, cfg, init = parse_prox_instance(args.instance)
    x, trace, converged = solve_bilinear_l0(u, a, b, cfg, init=init, relax=args.relax)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "solution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "index", "value"])
        for l, vec in enumerate(x):
            for i, v in enumerate(vec):
                w.writerow([l, i, repr(float(v))])
    with open(out / "objective_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "objective"])
        for t, v in enumerate(trace):
            w.writerow([t, repr(float(v))])
    print(f"objective {float(trace[-1])!r} after {len(trace) - 1} sweeps "
          f"({'fixed point' if converged else 'iteration limit'})")
    print(f"outputs in {out}")
    return 0


def _cmd_report(args) -> int:
    from .reporting import render_report

    written = render_report(args.out)
    print(f"wrote {', '.join(written)} in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="polargate",
        description="Structured channel pruning with polarizing gates",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="gated training with the proximal resource step")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("prune", help="remove zero-gated channels, absorb the rest")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.json)")
    p.add_argument("--config", help="training config (enables probe-batch checks)")
    p.add_argument("--out", help="output directory (default: checkpoint directory)")
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("finetune", help="plain SGD on a pruned model")
    p.add_argument("--model", required=True, help="pruned model checkpoint (.json)")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("sweep", help="train/prune/finetune over a hyperparameter list")
    _add_train_flags(p)
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.add_argument("--epsilon-decays", dest="epsilon_decays",
                   help="comma-separated epsilon decay values")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("solve-prox", help="solve a bilinear-L0 prox instance file")
    p.add_argument("instance", help="plain-text instance file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--relax", choices=("l1", "l0"), default="l1",
                   help="l1 soft threshold (default) or the l0 comparator")
    p.set_defaults(func=_cmd_solve_prox)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--out", required=True, help="run directory holding the CSV outputs")
    p.set_defaults(func=_cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PolargateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
