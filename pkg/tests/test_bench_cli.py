import csv

import numpy as np
import pytest

from svdonet import bench
from svdonet.casegen import make_case
from svdonet.cli import main
from svdonet.exceptions import InvalidData, InvalidShape
from svdonet.persistence import load_model

SMALL = "case_options={n_train: 4, n_test: 2, n_times: 30}"
TINY_NETS = ["branch_hidden=[4]", "trunk_hidden=[4]", "lbfgs_iter=0", "batch_size=30"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train_args(out, case="tc1", arch="vanilla", *extra):
    args = ["train", "--case", case, "--arch", arch, "--epochs", "2", "--out", str(out),
            "--set", SMALL]
    for s in TINY_NETS:
        args += ["--set", s]
    return args + list(extra)


# --- rmse -----------------------------------------------------------------


def test_rmse_examples():
    assert bench.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert bench.rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(InvalidData):
        bench.rmse([], [])
    with pytest.raises(InvalidShape):
        bench.rmse([1.0], [1.0, 2.0])


# --- config ---------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = bench.preset("tc2", "flex", seed=3, case_options={"n_train": 7})
    assert bench.ExperimentConfig.from_yaml(cfg.to_yaml()) == cfg
    cfg.save(tmp_path / "c.yaml")
    assert bench.ExperimentConfig.load(tmp_path / "c.yaml") == cfg


@pytest.mark.parametrize("bad", [dict(case="tc9"), dict(arch="mlp")])
def test_config_rejects_unknown_names(bad):
    with pytest.raises(ValueError):
        bench.ExperimentConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        bench.ExperimentConfig.from_yaml("case: tc1\nwidth: 3\n")
    with pytest.raises(ValueError):
        bench.ExperimentConfig.from_yaml("- 1\n")


def test_scalar_learning_rate_is_normalised():
    assert bench.ExperimentConfig(learning_rate=0.01).learning_rate == [(0, 0.01)]


def test_parse_arch_spec():
    assert bench.parse_arch_spec("flex:p=1:epochs=10") == ("flex", {"p": 1, "epochs": 10})
    assert bench.parse_arch_spec("vanilla") == ("vanilla", {})
    assert bench.parse_arch_spec("svd:branch_hidden=[8, 8]")[1] == {"branch_hidden": [8, 8]}
    for bad in ("mlp:p=2", "flex:p"):
        with pytest.raises(ValueError):
            bench.parse_arch_spec(bad)


def test_every_architecture_builds():
    for arch in bench.ARCHITECTURES:
        est = bench.build_estimator(bench.preset("tc1", arch), 2)
        assert est.get_params()["n_branch_inputs"] == 2


# --- reports --------------------------------------------------------------


def test_report_round_trip(tmp_path):
    rows = [bench.ReportRow("vanilla", 2, 10, {"x": 0.1, "v": 0.2}, 1.5, 3.0),
            bench.ReportRow("flex", 1, 8, {"x": 0.01}, 0.5, 1.0)]
    bench.write_report(rows, tmp_path / "r.csv")
    back = bench.read_report(tmp_path / "r.csv")
    assert back[0] == rows[0]
    assert back[1].rmse["x"] == 0.01 and np.isnan(back[1].rmse["v"])
    assert "flex" in bench.format_table(back)


def test_compare_param_counts_are_exact():
    specs = [("vanilla", {"p": 3}), ("flex", {}), ("svd", {})]
    base = dict(epochs=1, branch_hidden=(4,), trunk_hidden=(4,), lbfgs_iter=0, batch_size=30)
    rows, models = bench.compare("tc2", specs, case_options={"n_train": 4, "n_test": 2,
                                                             "n_times": 30}, base=base)
    for row, est in zip(rows, models):
        nets = [n for m in est.models_ for _, _, n in m.nets()]
        extra = sum(m.b0.size for m in est.models_ if hasattr(m, "b0"))
        assert row.param_count == sum(n.param_count for n in nets) + extra
    assert [r.p for r in rows] == [3, 1, 2]


# --- CLI ------------------------------------------------------------------


def test_cli_gen_writes_files(tmp_path, capsys):
    assert main(["gen", "--case", "tc1", "--out", str(tmp_path), "--set", "n_train=3",
                 "--set", "n_test=1", "--set", "n_times=20"]) == 0
    for name in ("manifest.yaml", "train.csv", "test.csv", "train_x.csv", "train_x.meta.csv",
                 "test_v.csv"):
        assert (tmp_path / name).exists()
    rows = np.loadtxt(tmp_path / "train.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows, np.hstack([make_case("tc1", n_train=3, n_test=1,
                                                             n_times=20).train.X,
                                                   make_case("tc1", n_train=3, n_test=1,
                                                             n_times=20).train.Y]))


def test_cli_svd_tc1(tmp_path, capsys):
    assert main(["svd", "--case", "tc1", "--variable", "v", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("variable=v k=2 cumulative_energy=")
    assert float(line.split("=")[-1]) >= 0.9999
    energy = read_csv(tmp_path / "energy_v.csv")
    cum = [float(r["cumulative_energy"]) for r in energy]
    assert cum[-1] == pytest.approx(1.0) and all(b >= a for a, b in zip(cum, cum[1:]))
    shares = [float(r["energy"]) for r in energy]
    assert sum(shares) == pytest.approx(1.0)


def test_cli_svd_from_csv(tmp_path, capsys):
    main(["gen", "--case", "tc2", "--out", str(tmp_path), "--set", "n_train=10"])
    capsys.readouterr()
    assert main(["svd", "--data", str(tmp_path / "train_x.csv"), "--k", "8",
                 "--out", str(tmp_path)]) == 0
    rec = read_csv(tmp_path / "reconstruction_x.csv")
    errs = [float(r["relative_error"]) for r in rec]
    assert errs[-1] < 1e-10


def test_cli_train_eval_report(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(train_args(run, "tc2", "flex")) == 0
    for name in ("model.svdonet", "config.yaml", "history.csv", "report.csv"):
        assert (run / name).exists()
    ev = tmp_path / "eval"
    assert main(["eval", "--model", str(run), "--out", str(ev)]) == 0
    out = capsys.readouterr().out
    assert "rmse_x=" in out
    preds = read_csv(ev / "predictions.csv")
    assert len(preds) == 60 and {"x_true", "x_pred"} <= set(preds[0])
    assert len(read_csv(ev / "scenario_rmse.csv")) == 2
    est = load_model(run / "model.svdonet")
    rep = bench.read_report(ev / "report.csv")[0]
    assert rep.param_count == est.param_count_
    rp = tmp_path / "rep"
    assert main(["report", "--model", str(run), "--table", str(ev / "report.csv"),
                 "--out", str(rp)]) == 0
    for name in ("curves_x.csv", "alignment.csv", "aligned_curves.csv", "table.txt"):
        assert (rp / name).exists()


def test_cli_reruns_give_identical_model_files(tmp_path):
    for name in ("a", "b"):
        assert main(train_args(tmp_path / name, "tc1", "svd")) == 0
    assert (tmp_path / "a" / "model.svdonet").read_bytes() == \
        (tmp_path / "b" / "model.svdonet").read_bytes()


def test_cli_train_from_config_file(tmp_path):
    cfg = bench.preset("tc1", "pod", epochs=1, branch_hidden=(3,), trunk_hidden=(3,),
                       lbfgs_iter=0, case_options={"n_train": 4, "n_test": 1, "n_times": 20})
    cfg.save(tmp_path / "cfg.yaml")
    assert main(["train", "--config", str(tmp_path / "cfg.yaml"), "--out",
                 str(tmp_path / "r"), "--p", "1"]) == 0
    assert bench.ExperimentConfig.load(tmp_path / "r" / "config.yaml").p == 1


def test_cli_compare(tmp_path, capsys):
    sets = []
    for s in [SMALL, "epochs=1"] + TINY_NETS:
        sets += ["--set", s]
    assert main(["compare", "--case", "tc2", "--archs", "vanilla:p=2,flex:p=1",
                 "--out", str(tmp_path)] + sets) == 0
    rows = bench.read_report(tmp_path / "report.csv")
    assert [r.architecture for r in rows] == ["vanilla", "flex"]


def test_exit_code_unknown_case(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--case", "tc9", "--out", "x"])
    assert exc.value.code == 2


def test_exit_code_missing_model(tmp_path, capsys):
    assert main(["eval", "--model", str(tmp_path / "nope")]) == 2


def test_exit_code_case_mismatch(tmp_path, capsys):
    main(train_args(tmp_path, "tc1", "vanilla"))
    assert main(["eval", "--model", str(tmp_path), "--case", "tc2", "--out", str(tmp_path)]) == 2
    assert "trained on case 'tc1'" in capsys.readouterr().err


def test_exit_code_malformed_csv(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("t,a_0\n0,zz\n")
    (tmp_path / "a.meta.csv").write_text("column,kind,u0\na_0,scenario,1\n")
    assert main(["svd", "--data", str(tmp_path / "a.csv"), "--out", str(tmp_path)]) == 2


def test_exit_code_usage(capsys):
    assert main(["train", "--case", "tc1"]) == 2
    assert main(["report"]) == 2
    assert main(["compare", "--case", "tc1", "--archs", "mlp"]) == 2


def test_exit_code_numerical_failure(tmp_path, capsys):
    args = train_args(tmp_path, "tc1", "vanilla", "--set", "learning_rate=1e12",
                      "--set", "trunk_output_activation=exp")
    assert main(args) == 1
    assert "numerical failure" in capsys.readouterr().err
