"""Command-line interface: workflows, determinism, exit codes."""

import json

import pytest

from mate.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

GEN_PERIODS = ('periods=[{"period_id":"peak","demand_scale":1.0,"n_samples":3},'
               '{"period_id":"off","demand_scale":0.8,"n_samples":2}]')


def run_generate(out, extra=()):
    return main(["generate", "--out", str(out), "--set", GEN_PERIODS, *extra])


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run_generate(out) == EXIT_OK
    return out


def train_args(gen, out, extra=()):
    return [
        "train", "--out", str(out),
        "--set", f"observations={gen}/observations.csv",
        "--set", f"features_z={gen}/features_z.csv",
        "--set", f"truth={gen}/ground_truth.json",
        "--set", "epochs=2",
        *extra,
    ]


class TestWorkflows:
    def test_generate_outputs(self, gen_dir):
        names = {p.name for p in gen_dir.iterdir()}
        assert names == {"observations.csv", "features_z.csv", "paths.csv",
                         "ground_truth.json", "effective_config.json",
                         "metadata.json"}
        cfg = json.loads((gen_dir / "effective_config.json").read_text())
        assert cfg["periods"][0]["n_samples"] == 3
        assert "completed_unix" in json.loads((gen_dir / "metadata.json").read_text())

    def test_train_then_report(self, gen_dir, tmp_path, capsys):
        out = tmp_path / "tr"
        assert main(train_args(gen_dir, out)) == EXIT_OK
        assert (out / "params.json").exists()
        trace = (out / "trace.csv").read_text().splitlines()
        assert trace[0].startswith("epoch,loss_total")
        assert len(trace) == 3
        assert main(["report", "--set", f"input={out}/trace.csv"]) == EXIT_OK
        text = capsys.readouterr().out
        assert "rel_gap" in text and "median" in text

    def test_equilibrium_and_infer(self, gen_dir, tmp_path):
        tr = tmp_path / "tr"
        assert main(train_args(gen_dir, tr)) == EXIT_OK
        inf = tmp_path / "inf"
        code = main([
            "infer", "--out", str(inf),
            "--set", f"observations={gen_dir}/observations.csv",
            "--set", f"features_z={gen_dir}/features_z.csv",
            "--set", f"params={tr}/params.json",
            "--set", "target_gap=0.5", "--set", "epochs=2",
        ])
        assert code == EXIT_OK
        pred = (inf / "predictions.csv").read_text().splitlines()
        assert pred[0] == "sample_id,period_id,link_id,flow,travel_time"
        assert len(pred) == 1 + 5 * 76

    def test_xval_outputs(self, gen_dir, tmp_path):
        out = tmp_path / "xv"
        code = main([
            "xval", "--out", str(out),
            "--set", f"observations={gen_dir}/observations.csv",
            "--set", f"features_z={gen_dir}/features_z.csv",
            "--set", "epochs=1", "--set", "n_folds=5",
        ])
        assert code == EXIT_OK
        assert (out / "model.csv").exists()
        assert (out / "baseline_historical_mean.csv").exists()
        assert (out / "baseline_linear_regression.csv").exists()

    def test_sweep_outputs(self, gen_dir, tmp_path):
        out = tmp_path / "sw"
        code = main([
            "sweep", "--out", str(out),
            "--set", f"observations={gen_dir}/observations.csv",
            "--set", f"features_z={gen_dir}/features_z.csv",
            "--set", "epochs=1", "--set", "grid=[0.0,1.0]",
        ])
        assert code == EXIT_OK
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "lambda,mse_out_flow,mean_train_gap"
        assert len(lines) == 3


class TestDeterminism:
    def test_byte_identical_reruns(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            gen = tmp_path / f"gen_{name}"
            assert run_generate(gen) == EXIT_OK
            tr = tmp_path / f"tr_{name}"
            assert main(train_args(gen, tr)) == EXIT_OK
            outs.append((gen, tr))
        for fname in ("observations.csv", "features_z.csv", "paths.csv",
                      "ground_truth.json", "effective_config.json"):
            assert (outs[0][0] / fname).read_bytes() == (outs[1][0] / fname).read_bytes(), fname
        assert (outs[0][1] / "params.json").read_bytes() == \
            (outs[1][1] / "params.json").read_bytes()
        # trace differs only in the wall-clock seconds column
        strip = lambda p: [ln.rsplit(",", 1)[0]
                           for ln in (p / "trace.csv").read_text().splitlines()]
        assert strip(outs[0][1]) == strip(outs[1][1])


class TestExitCodes:
    def test_unknown_config_key_is_usage(self, capsys):
        assert main(["train", "--set", "bogus=1"]) == EXIT_USAGE
        assert "unknown config key" in capsys.readouterr().err

    def test_unknown_weights_key_is_usage(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"weights": {"nope": 1}}')
        assert main(["train", "--config", str(cfg)]) == EXIT_USAGE

    def test_missing_file_is_data_error(self, capsys):
        assert main(["train", "--set", "observations=/does/not/exist.csv"]) == EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_malformed_config_is_data_error(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert main(["train", "--config", str(cfg)]) == EXIT_DATA

    def test_bad_subcommand_is_usage(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE
        capsys.readouterr()

    def test_missing_required_key_is_usage(self, capsys):
        assert main(["infer"]) == EXIT_USAGE
        capsys.readouterr()

    def test_set_without_equals_is_usage(self, capsys):
        assert main(["train", "--set", "epochs"]) == EXIT_USAGE
        capsys.readouterr()

    def test_builtin_false_without_paths_is_usage(self, gen_dir, capsys):
        code = main(["train", "--set", "builtin=false",
                     "--set", f"observations={gen_dir}/observations.csv"])
        assert code == EXIT_USAGE
        capsys.readouterr()
