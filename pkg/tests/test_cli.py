"""CLI, model files, datasets, training loop wiring and reproducibility."""

import json
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from polargate.cli import main, parse_prox_instance
from polargate.datasets import load_csv_images, load_idx, make_dataset, synthetic_blobs
from polargate.errors import ConfigError
from polargate.modelfile import load_checkpoint, load_model, save_checkpoint
from polargate.network import LayerSpec, NetworkGraph, attach_gates, init_params
from polargate.training import TrainConfig, run_sweep, run_training

MODEL_DOC = {
    "format": "polargate-model-v1",
    "input": [2, 8, 8],
    "output": "fc",
    "nogate": [],
    "layers": [
        {"name": "c1", "kind": "conv", "inputs": ["input"], "out_channels": 5,
         "kernel": 3, "padding": 1},
        {"name": "b1", "kind": "batchnorm", "inputs": ["c1"]},
        {"name": "r1", "kind": "relu", "inputs": ["b1"]},
        {"name": "c2", "kind": "conv", "inputs": ["r1"], "out_channels": 6,
         "kernel": 3, "padding": 1},
        {"name": "g", "kind": "gap", "inputs": ["c2"]},
        {"name": "fc", "kind": "dense", "inputs": ["g"], "out_features": 4},
    ],
}

DATASET = {"kind": "synthetic", "classes": 4, "train": 120, "val": 60,
           "size": 8, "channels": 2, "seed": 2}


@pytest.fixture
def workdir(tmp_path):
    with open(tmp_path / "model.json", "w") as fh:
        json.dump(MODEL_DOC, fh)
    cfg = {
        "model": str(tmp_path / "model.json"),
        "dataset": DATASET,
        "epochs": 3,
        "batch_size": 32,
        "lr": 0.05,
        "lam": 1e-5,
        "epsilon_decay": 0.9,
        "seed": 7,
        "out": str(tmp_path / "run"),
    }
    with open(tmp_path / "cfg.json", "w") as fh:
        json.dump(cfg, fh)
    return tmp_path


class TestDatasets:
    def test_synthetic_shapes_and_determinism(self):
        a = synthetic_blobs(classes=3, n_train=30, n_val=12, size=10, seed=5)
        b = synthetic_blobs(classes=3, n_train=30, n_val=12, size=10, seed=5)
        assert a.train_x.shape == (30, 3, 10, 10)
        assert a.train_x.tobytes() == b.train_x.tobytes()
        assert a.classes == 3

    def test_idx_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(20, 6, 6), dtype=np.uint8)
        labels = rng.integers(0, 3, size=20, dtype=np.uint8)
        with open(tmp_path / "imgs.idx", "wb") as fh:
            fh.write(struct.pack(">BBBB", 0, 0, 0x08, 3))
            fh.write(struct.pack(">3I", 20, 6, 6))
            fh.write(imgs.tobytes())
        with open(tmp_path / "labels.idx", "wb") as fh:
            fh.write(struct.pack(">BBBB", 0, 0, 0x08, 1))
            fh.write(struct.pack(">I", 20))
            fh.write(labels.tobytes())
        ds = load_idx(tmp_path / "imgs.idx", tmp_path / "labels.idx",
                      val_fraction=0.25, seed=1)
        assert ds.train_x.shape == (15, 1, 6, 6)
        assert ds.val_x.shape == (5, 1, 6, 6)
        assert ds.train_x.max() <= 1.0

    def test_idx_bad_magic(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(b"\x01\x02\x03\x04rest")
        with pytest.raises(ConfigError, match="magic"):
            load_idx(tmp_path / "bad.idx", tmp_path / "bad.idx")

    def test_csv_loader(self, tmp_path):
        rng = np.random.default_rng(1)
        rows = ["label," + ",".join(f"p{i}" for i in range(16))]
        for _ in range(12):
            y = rng.integers(0, 2)
            px = rng.integers(0, 256, 16)
            rows.append(",".join([str(y)] + [str(v) for v in px]))
        (tmp_path / "data.csv").write_text("\n".join(rows))
        ds = load_csv_images(tmp_path / "data.csv", val_fraction=0.25, seed=0)
        assert ds.train_x.shape == (9, 1, 4, 4)

    def test_unknown_dataset_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            make_dataset({"kind": "synthetic", "classses": 4})


class TestModelFile:
    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        g = NetworkGraph(MODEL_DOC["input"],
                         [LayerSpec(d["name"], d["kind"], d["inputs"],
                                    {k: v for k, v in d.items()
                                     if k not in ("name", "kind", "inputs")})
                          for d in MODEL_DOC["layers"]],
                         "fc")
        init_params(g, np.random.default_rng(3))
        attach_gates(g)
        g.gates[0].alpha.data[1] = 0.0
        g.gates[0].epsilon = 0.0123
        save_checkpoint(g, tmp_path / "ck")
        h = load_checkpoint(tmp_path / "ck.json")
        assert h.gate_mode == "param"
        for la, lb in zip(g.layers, h.layers):
            for key in la.params:
                assert la.params[key].data.tobytes() == lb.params[key].data.tobytes()
            for key in la.buffers:
                assert la.buffers[key].tobytes() == lb.buffers[key].tobytes()
        for ga, gb in zip(g.gates, h.gates):
            assert ga.alpha.data.tobytes() == gb.alpha.data.tobytes()
            assert ga.epsilon == gb.epsilon
        x = np.random.default_rng(0).normal(size=(2, 2, 8, 8))
        assert g.forward(x).data.tobytes() == h.forward(x).data.tobytes()

    def test_load_model_topology_only(self, tmp_path):
        with open(tmp_path / "m.json", "w") as fh:
            json.dump(MODEL_DOC, fh)
        g = load_model(tmp_path / "m.json")
        assert [l.name for l in g.layers] == ["c1", "b1", "r1", "c2", "g", "fc"]
        assert g.layer("c1").params == {}

    def test_corrupt_weights_rejected(self, tmp_path):
        g = load_model_from_doc()
        init_params(g, np.random.default_rng(0))
        save_checkpoint(g, tmp_path / "ck")
        raw = (tmp_path / "ck.bin").read_bytes()
        (tmp_path / "ck.bin").write_bytes(raw[:-8])
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "ck.json")


def load_model_from_doc():
    return NetworkGraph(
        MODEL_DOC["input"],
        [LayerSpec(d["name"], d["kind"], d["inputs"],
                   {k: v for k, v in d.items() if k not in ("name", "kind", "inputs")})
         for d in MODEL_DOC["layers"]],
        "fc",
    )


class TestTrainingLoop:
    def test_lambda_zero_keeps_full_flops(self, workdir):
        cfg = TrainConfig.from_file(workdir / "cfg.json", {"lam": 0.0})
        _, summary = run_training(cfg)
        assert summary["final_flops_ratio"] == 1.0
        assert summary["zero_gates"] == 0
        rows = (Path(cfg.out) / "metrics.csv").read_text().splitlines()
        assert rows[0] == "epoch,train_loss,val_loss,flops_ratio,zero_gates,epsilon"
        assert len(rows) == 1 + cfg.epochs

    def test_lambda_zero_matches_plain_training(self, workdir):
        # with lambda = 0 the prox is inert: metrics must be identical whether
        # the prox machinery is invoked or skipped entirely
        base = TrainConfig.from_file(workdir / "cfg.json",
                                     {"lam": 0.0, "out": str(workdir / "a")})
        run_training(base)
        again = TrainConfig.from_file(workdir / "cfg.json",
                                      {"lam": 0.0, "out": str(workdir / "b"),
                                       "prox_cadence": "epoch"})
        run_training(again)
        a = (workdir / "a" / "metrics.csv").read_bytes()
        b = (workdir / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_seed_reproducibility_byte_identical(self, workdir):
        for sub in ("r1", "r2"):
            cfg = TrainConfig.from_file(workdir / "cfg.json", {"out": str(workdir / sub)})
            run_training(cfg)
        for name in ("metrics.csv", "gates_epoch0.csv", "checkpoint.bin"):
            assert (workdir / "r1" / name).read_bytes() == (workdir / "r2" / name).read_bytes()

    def test_histograms_partition_gates(self, workdir):
        cfg = TrainConfig.from_file(workdir / "cfg.json", {})
        graph, _ = run_training(cfg)
        total = sum(gv.channels for gv in graph.gates)
        for path in Path(cfg.out).glob("gates_epoch*.csv"):
            rows = path.read_text().splitlines()[1:]
            counted = sum(int(r.split(",")[2]) for r in rows)
            assert counted == total
            assert rows[0].startswith("exact_zero,exact_zero,")

    def test_flops_ratio_logged_exactly(self, workdir):
        from polargate.resource import derive_coefficients, flops_of_counts, flops_of_gates

        cfg = TrainConfig.from_file(workdir / "cfg.json", {"lam": 3e-5, "epochs": 5})
        graph, summary = run_training(cfg)
        model = derive_coefficients(graph)
        full = flops_of_counts(model, model.full_counts())
        assert summary["final_flops_ratio"] == flops_of_gates(model, graph.gates) / full
        last = (Path(cfg.out) / "metrics.csv").read_text().splitlines()[-1]
        assert float(last.split(",")[3]) == summary["final_flops_ratio"]

    def test_weightnorm_and_reg_modes_run(self, workdir):
        for mode in ("weightnorm", "reg"):
            cfg = TrainConfig.from_file(
                workdir / "cfg.json",
                {"mode": mode, "epochs": 2, "out": str(workdir / f"m_{mode}")},
            )
            _, summary = run_training(cfg)
            assert np.isfinite(summary["val_loss"])

    def test_unknown_config_key_rejected(self, workdir):
        doc = json.loads((workdir / "cfg.json").read_text())
        doc["epohcs"] = 3
        (workdir / "bad.json").write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="unknown config"):
            TrainConfig.from_file(workdir / "bad.json", {})

    def test_sweep_requires_two_points(self, workdir):
        cfg = TrainConfig.from_file(workdir / "cfg.json", {})
        with pytest.raises(ConfigError, match="2 points"):
            run_sweep(cfg, lambdas=[1e-5])

    def test_pretrained_start(self, workdir):
        # train ungated first, then start gated training from the checkpoint
        g = load_model_from_doc()
        init_params(g, np.random.default_rng(0))
        save_checkpoint(g, workdir / "pre")
        cfg = TrainConfig.from_file(
            workdir / "cfg.json",
            {"out": str(workdir / "warm"), "epochs": 2},
        )
        cfg.start = str(workdir / "pre.json")
        _, summary = run_training(cfg)
        assert np.isfinite(summary["val_loss"])


class TestCommandLine:
    def run(self, *argv):
        return main(list(argv))

    def test_full_pipeline(self, workdir, capsys):
        rc = self.run("train", "--config", str(workdir / "cfg.json"),
                      "--epochs", "3", "--lambda", "3e-5")
        assert rc == 0
        run_dir = workdir / "run"
        assert (run_dir / "metrics.csv").exists()
        rc = self.run("prune", "--checkpoint", str(run_dir / "checkpoint.json"),
                      "--config", str(workdir / "cfg.json"),
                      "--out", str(run_dir / "pruned"))
        assert rc == 0
        assert (run_dir / "pruned" / "prune_report.txt").exists()
        assert (run_dir / "pruned" / "prune_report.csv").exists()
        rc = self.run("finetune", "--model", str(run_dir / "pruned" / "pruned.json"),
                      "--config", str(workdir / "cfg.json"), "--epochs", "1",
                      "--out", str(run_dir / "ft"))
        assert rc == 0
        rc = self.run("report", "--out", str(run_dir))
        assert rc == 0
        assert (run_dir / "loss_curves.png").exists()
        assert (run_dir / "gate_histograms.png").exists()

    def test_finetune_zero_epochs_identity(self, workdir):
        self.run("train", "--config", str(workdir / "cfg.json"), "--epochs", "2")
        run_dir = workdir / "run"
        self.run("prune", "--checkpoint", str(run_dir / "checkpoint.json"),
                 "--out", str(run_dir))
        cfg = TrainConfig.from_file(workdir / "cfg.json",
                                    {"out": str(workdir / "ft0")})
        cfg.model = str(run_dir / "pruned.json")
        cfg.epochs = 1  # dataclass forbids 0; emulate identity via lr 0
        cfg.lr = 0.0
        from polargate.training import run_finetune
        g, _ = run_finetune(cfg)
        h = load_checkpoint(run_dir / "pruned.json")
        for la, lb in zip(g.layers, h.layers):
            for key in la.params:
                assert la.params[key].data.tobytes() == lb.params[key].data.tobytes()

    def test_error_exit_code_and_message(self, workdir, capsys):
        rc = self.run("train", "--config", str(workdir / "nope.json"))
        assert rc != 0
        assert "error:" in capsys.readouterr().err

    def test_solve_prox_instance(self, tmp_path, capsys):
        inst = tmp_path / "inst.txt"
        inst.write_text(
            "# coupled two-group instance\n"
            "groups 2\n"
            "u 0.1 0.2\n"
            "u -0.3 0.5 0.6\n"
            "a 0 1 0.01\n"
            "b 0.0 0.0\n"
            "eta1 1.0\n"
            "lambda 1.0\n"
            "iters 5\n"
            "init 0.1 0.8\n"
            "init 0.7 0.3 0.8\n"
        )
        rc = self.run("solve-prox", str(inst), "--out", str(tmp_path / "sol"))
        assert rc == 0
        sol = (tmp_path / "sol" / "solution.csv").read_text().splitlines()
        assert sol[0] == "group,index,value"
        values = [float(r.split(",")[2]) for r in sol[1:]]
        np.testing.assert_allclose(values, [0.07, 0.17, -0.28, 0.48, 0.58], atol=1e-12)
        trace = (tmp_path / "sol" / "objective_trace.csv").read_text().splitlines()
        assert trace[0] == "sweep,objective"
        assert float(trace[-1].split(",")[1]) == pytest.approx(0.0615, abs=1e-12)

    def test_solve_prox_determinism(self, tmp_path):
        inst = tmp_path / "i.txt"
        inst.write_text("groups 1\nu 0.4 -0.2 0.05\nb 0.1\neta1 0.5\nlambda 1.0\niters 3\n")
        self.run("solve-prox", str(inst), "--out", str(tmp_path / "s1"))
        self.run("solve-prox", str(inst), "--out", str(tmp_path / "s2"))
        assert (tmp_path / "s1" / "solution.csv").read_bytes() == \
            (tmp_path / "s2" / "solution.csv").read_bytes()

    def test_bad_instance_file(self, tmp_path):
        inst = tmp_path / "bad.txt"
        inst.write_text("groups 2\nu 1 2\n")
        with pytest.raises(ConfigError, match="expected 2 'u' vectors"):
            parse_prox_instance(inst)

    def test_entry_point_subprocess(self, workdir):
        # exercise the installed console path end to end
        proc = subprocess.run(
            [sys.executable, "-m", "polargate.cli", "train",
             "--config", str(workdir / "cfg.json"), "--epochs", "1"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "trained 1 epochs" in proc.stdout


MODEL10 = {
    "format": "polargate-model-v1", "input": [3, 10, 10], "output": "fc",
    "nogate": ["c1"],
    "layers": [
        {"name": "c1", "kind": "conv", "inputs": ["input"], "out_channels": 10,
         "kernel": 3, "padding": 1},
        {"name": "b1", "kind": "batchnorm", "inputs": ["c1"]},
        {"name": "r1", "kind": "relu", "inputs": ["b1"]},
        {"name": "p1", "kind": "avgpool", "inputs": ["r1"], "kernel": 2},
        {"name": "c2", "kind": "conv", "inputs": ["p1"], "out_channels": 12,
         "kernel": 3, "padding": 1},
        {"name": "r2", "kind": "relu", "inputs": ["c2"]},
        {"name": "g", "kind": "gap", "inputs": ["r2"]},
        {"name": "fc", "kind": "dense", "inputs": ["g"], "out_features": 3},
    ],
}
DATASET10 = {"kind": "synthetic", "classes": 3, "train": 400, "val": 120,
             "size": 10, "seed": 4}


class TestDeskScaleRegressions:
    """Frozen qualitative baselines recorded from the configurations below."""

    def test_finetune_recovers_train_accuracy(self, tmp_path):
        from polargate.datasets import make_dataset
        from polargate.training import evaluate, run_finetune, run_prune

        with open(tmp_path / "m.json", "w") as fh:
            json.dump(MODEL10, fh)
        cfg = TrainConfig(model=str(tmp_path / "m.json"), dataset=DATASET10,
                          epochs=35, batch_size=32, lr=0.05, lam=2e-4,
                          epsilon_decay=0.96, seed=7, out=str(tmp_path / "run"))
        data = make_dataset(DATASET10)
        run_training(cfg, dataset=data)
        pruned, report = run_prune(tmp_path / "run" / "checkpoint.json",
                                   tmp_path / "run", dataset=data)
        assert report.flops_ratio < 0.5  # the run really pruned
        _, train_before = evaluate(pruned, data.train_x, data.train_y)
        ft = TrainConfig(model=str(tmp_path / "run" / "pruned.json"),
                         dataset=DATASET10, epochs=3, batch_size=32, lr=0.02,
                         seed=7, out=str(tmp_path / "ft"))
        tuned, _ = run_finetune(ft, dataset=data)
        _, train_after = evaluate(tuned, data.train_x, data.train_y)
        assert train_after >= train_before

    def test_epsilon_decay_robustness_band(self, tmp_path):
        # both decay rates prune hard yet land at close accuracies; the band
        # below was recorded from this configuration (observed 0.85 vs 0.97)
        with open(tmp_path / "m.json", "w") as fh:
            json.dump(MODEL10, fh)
        cfg = TrainConfig(model=str(tmp_path / "m.json"), dataset=DATASET10,
                          epochs=35, batch_size=32, lr=0.05, lam=2e-4,
                          epsilon_decay=0.9, seed=7, out=str(tmp_path / "sw"),
                          finetune_epochs=3, finetune_lr=0.02)
        rows = run_sweep(cfg, epsilon_decays=[0.86, 0.96])
        for r in rows:
            assert r["flops_ratio"] <= 0.5
            assert r["supernet_acc"] >= 0.8
        for key in ("supernet_acc", "finetuned_acc"):
            band = abs(rows[0][key] - rows[1][key])
            assert band <= 0.15, f"{key} band {band:.3f}"


class TestSweep:
    def test_sweep_produces_summary_and_monotone_trend(self, workdir):
        cfg = TrainConfig.from_file(
            workdir / "cfg.json",
            {"epochs": 4, "out": str(workdir / "sweep")},
        )
        rows = run_sweep(cfg, lambdas=[1e-6, 6e-5])
        assert len(rows) == 2
        assert rows[0]["flops_ratio"] >= rows[1]["flops_ratio"]
        text = (workdir / "sweep" / "sweep_summary.csv").read_text().splitlines()
        assert text[0] == "lambda,epsilon_decay,flops_ratio,supernet_acc,pruned_acc,finetuned_acc"
        assert len(text) == 3

    def test_epsilon_decay_sweep(self, workdir):
        cfg = TrainConfig.from_file(
            workdir / "cfg.json",
            {"epochs": 3, "out": str(workdir / "esweep")},
        )
        rows = run_sweep(cfg, epsilon_decays=[0.86, 0.96])
        assert len(rows) == 2
        assert {r["epsilon_decay"] for r in rows} == {0.86, 0.96}
