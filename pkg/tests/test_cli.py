"""CLI pipeline: file layout, exit codes, overrides, determinism."""

import json
import os

import pytest

from itogen.cli import cmd_evaluate, cmd_reproduce, main
from itogen.config import RunConfig
from itogen.errors import ConfigError
from itogen.sde import load_dataset


def tiny_doc(out_dir, **over):
    doc = {
        "seed": 11,
        "out_dir": out_dir,
        "sim": {"T": 0.2, "dt": 0.01, "n_paths": 60},
        "observe": {"p": 0.2},
        "train": {"scheme": "joint-instant", "epochs": 2, "batch_size": 24,
                  "latent_dim": 8, "hidden": 6},
        "generate": {"delta": 0.01, "n_paths": 15, "horizon": 0.2},
        "evaluate": {"times": [0.1, 0.2]},
    }
    doc.update(over)
    return doc


def write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


class TestConfig:
    def test_defaults_are_valid(self):
        RunConfig()

    def test_unknown_field_named(self):
        with pytest.raises(ConfigError) as err:
            RunConfig({"sim": {"n_path": 5}})
        assert "sim.n_path" in str(err.value)

    def test_invalid_value_named(self):
        with pytest.raises(ConfigError) as err:
            RunConfig({"observe": {"p": 1.5}})
        assert "observe.p" in str(err.value)

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("ITOGEN_SEED", "777")
        cfg = RunConfig().override()
        assert cfg["seed"] == 777

    def test_flag_beats_config(self, monkeypatch):
        monkeypatch.delenv("ITOGEN_SEED", raising=False)
        cfg = RunConfig({"seed": 5}).override(seed=9, scheme="base")
        assert cfg["seed"] == 9
        assert cfg["train"]["scheme"] == "base"


class TestExitCodes:
    def test_config_error_is_exit_2(self, tmp_path, capsys):
        path = write_config(tmp_path, {"observe": {"p": 2.0}})
        assert main(["simulate", "--config", path]) == 2
        assert "observe.p" in capsys.readouterr().err

    def test_missing_checkpoint_is_exit_3(self, tmp_path, capsys):
        path = write_config(tmp_path, tiny_doc(str(tmp_path / "out")))
        assert main(["generate", "--config", path]) == 3
        assert "checkpoint" in capsys.readouterr().err

    def test_missing_dataset_is_exit_3(self, tmp_path):
        path = write_config(tmp_path, tiny_doc(str(tmp_path / "out")))
        assert main(["train", "--config", path, "--quiet"]) == 3


class TestPipeline:
    def test_simulate_writes_dataset_and_manifest(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, tiny_doc(out))
        assert main(["simulate", "--config", path]) == 0
        train_ds, train_obs = load_dataset(os.path.join(out, "dataset",
                                                        "train"))
        assert train_ds.n_paths == 48
        assert train_obs is not None
        meta = json.load(open(os.path.join(out, "dataset", "train",
                                           "meta.json")))
        assert meta["observe_p"] == 0.2
        manifest = json.load(open(os.path.join(out,
                                               "simulate_manifest.json")))
        assert manifest["config"]["seed"] == 11

    def test_simulate_twice_is_byte_identical(self, tmp_path):
        out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
        pa = write_config(tmp_path, tiny_doc(out_a))
        assert main(["simulate", "--config", pa]) == 0
        pb = (tmp_path / "config_b.json")
        pb.write_text(json.dumps(tiny_doc(out_b)))
        assert main(["simulate", "--config", str(pb)]) == 0
        for rel in ("dataset/train/paths.csv", "dataset/train/obs.csv",
                    "dataset/valid/paths.csv"):
            a = open(os.path.join(out_a, rel), "rb").read()
            b = open(os.path.join(out_b, rel), "rb").read()
            assert a == b

    def test_full_pipeline_runs(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, tiny_doc(out))
        assert main(["simulate", "--config", path]) == 0
        assert main(["train", "--config", path, "--quiet"]) == 0
        model_dir = os.path.join(out, "model", "joint-instant")
        assert os.path.exists(os.path.join(model_dir, "bundle.json"))
        assert os.path.exists(os.path.join(model_dir, "train_log.csv"))
        assert main(["generate", "--config", path]) == 0
        gen_dir = os.path.join(out, "generated", "joint-instant")
        gen_meta = json.load(open(os.path.join(gen_dir, "gen_meta.json")))
        assert gen_meta["scheme"] == "joint-instant"
        assert gen_meta["delta"] == 0.01
        assert "model_checksums" in gen_meta
        assert main(["evaluate", "--config", path]) == 0
        report = json.load(open(os.path.join(out, "eval", "report.json")))
        assert "reference" in report["parameters"]
        assert "joint-instant" in report["parameters"]
        assert os.path.exists(os.path.join(out, "eval", "params.csv"))
        assert main(["plot", "--config", path]) == 0
        import xml.etree.ElementTree as ET
        for name in ("paths_overlay.svg", "marginal_t0.1.svg",
                     "coefficients.svg"):
            svg = os.path.join(out, "plots", name)
            assert os.path.exists(svg)
            root = ET.parse(svg).getroot()
            assert root.tag.endswith("svg")

    def test_evaluate_dataset_against_itself_zero_deltas(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, tiny_doc(out))
        main(["simulate", "--config", path])
        cfg = RunConfig(tiny_doc(out))
        cmd_evaluate(cfg, dataset_dirs=[os.path.join(out, "dataset",
                                                     "train")])
        report = json.load(open(os.path.join(out, "eval", "report.json")))
        for frag in report["marginals"]:
            assert frag["ks"] == 0.0
            assert frag["mean_delta"] == 0.0


class TestReproduce:
    def test_dry_run_prints_plan_without_artifacts(self, tmp_path, capsys):
        assert main(["reproduce", "--table", "table1", "--scale", "0",
                     "--out", str(tmp_path / "rep")]) == 0
        out = capsys.readouterr().out
        assert "plan" in out and "train" in out
        assert not os.path.exists(str(tmp_path / "rep"))

    def test_bad_table_rejected(self):
        with pytest.raises(ConfigError):
            cmd_reproduce("table9", 0.5)
