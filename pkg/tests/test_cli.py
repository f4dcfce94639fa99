import json

import numpy as np
import pytest
import yaml

from skewbench import cli, inference

TINY = {
    "dataset": {"synthetic": {"train_per_class": 40, "val_per_class": 5, "test_per_class": 10}, "rho": 0.95},
    "strategies": ["baseline"],
    "rules": ["argmax"],
    "seeds": [0],
    "optim": {"epochs": 2},
}


def cfg(**over):
    data = json.loads(json.dumps(TINY))
    data.update(over)
    return cli.parse_config(data)


def test_config_defaults_and_hash():
    c = cfg()
    assert c.optim.lr == 0.1 and c.dataset.rhos == [0.95]
    assert c.strategy_kinds()[0].kind == "baseline"
    assert c.hash() == cfg(output_dir="elsewhere").hash()
    assert c.hash() != cfg(seeds=[1]).hash()


@pytest.mark.parametrize("patch,path", [
    ({"optim": {"lr": -1}}, "optim.lr"),
    ({"optim": {"lrr": 0.1}}, "optim.lrr"),
    ({"dataset": {"synthetic": {"sigma": 0}}}, "dataset.synthetic.sigma"),
    ({"rules": ["nope"]}, "rules"),
    ({"strategies": []}, "strategies"),
    ({"dataset": {"rho": [0.4]}}, "dataset.rho"),
    ({"bogus": 1}, "bogus"),
])
def test_config_errors_name_field(patch, path):
    data = json.loads(json.dumps(TINY))
    data.update(patch)
    with pytest.raises(cli.ConfigError) as e:
        cli.parse_config(data)
    assert path in str(e.value)


def test_load_config_yaml_and_json(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY))
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    assert cli.load_config(tmp_path / "c.yaml").hash() == cli.load_config(tmp_path / "c.json").hash()
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(cli.ConfigError):
        cli.load_config(tmp_path / "bad.yaml")


def test_single_cell_single_row(tmp_path):
    store = cli.run_matrix(cfg(), tmp_path)
    _, rows, done = cli.read_store(store)
    assert len(rows) == 1 and rows[0]["status"] == "ok" and len(done) == 1
    assert set(rows[0]["metrics"]) >= {"mean_acc", "acc_d0", "acc_d1", "bias", "probe_acc"}


def test_incompatible_pair_recorded(tmp_path):
    store = cli.run_matrix(cfg(rules=["argmax", "sum_activations"]), tmp_path)
    _, rows, _ = cli.read_store(store)
    st = {r["rule"]: r["status"] for r in rows}
    assert st == {"argmax": "ok", "sum_activations": "incompatible"}
    paths = cli.report(store)
    assert "incompatible" in paths["table"].read_text()


MATRIX = dict(strategies=["baseline", "domain_discriminative", "domain_independent"],
              rules=["argmax", "sum_joint_shifted", "sum_activations", "rba_train"], seeds=[0, 1])


def test_rerun_byte_identical(tmp_path):
    c = cfg(**MATRIX)
    a = cli.report(cli.run_matrix(c, tmp_path / "a"))
    b = cli.report(cli.run_matrix(c, tmp_path / "b"))
    assert a["csv"].read_bytes() == b["csv"].read_bytes()
    assert (tmp_path / "a" / "results.jsonl").read_bytes() == (tmp_path / "b" / "results.jsonl").read_bytes()


def test_parallel_workers_same_store(tmp_path, monkeypatch):
    c = cfg(**MATRIX)
    cli.run_matrix(c, tmp_path / "serial", workers=1)
    monkeypatch.setenv("SKEWBENCH_THREADS", "2")
    cli.run_matrix(c, tmp_path / "par")
    assert (tmp_path / "serial" / "results.jsonl").read_bytes() == (tmp_path / "par" / "results.jsonl").read_bytes()


def test_resume_equivalence(tmp_path):
    c = cfg(**MATRIX)
    full = cli.run_matrix(c, tmp_path / "full")
    part = cli.run_matrix(c, tmp_path / "part", max_cells=2)
    assert len(cli.read_store(part)[2]) == 2
    with pytest.raises(FileExistsError):
        cli.run_matrix(c, tmp_path / "part")
    cli.run_matrix(c, tmp_path / "part", resume=True)
    assert full.read_bytes() == part.read_bytes()


def test_resume_after_torn_write(tmp_path):
    c = cfg(**MATRIX)
    full = cli.run_matrix(c, tmp_path / "full")
    part = cli.run_matrix(c, tmp_path / "part", max_cells=3)
    with open(part, "a") as f:
        f.write('{"type": "cell", "rho": 0.95, "se')  # crash mid-append
    cli.run_matrix(c, tmp_path / "part", resume=True)
    assert full.read_bytes() == part.read_bytes()


def test_resume_hash_mismatch(tmp_path):
    cli.run_matrix(cfg(), tmp_path, max_cells=0)
    with pytest.raises(cli.ResumeMismatch):
        cli.run_matrix(cfg(seeds=[5]), tmp_path, resume=True)


def test_report_single_seed_and_sweep(tmp_path):
    c = cfg(strategies=["baseline", "domain_independent"], rules=["argmax", "sum_activations"],
            dataset={**TINY["dataset"], "rho": [0.5, 0.95]})
    paths = cli.report(cli.run_matrix(c, tmp_path))
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "rho,strategy,rule,metric,mean,two_sigma,n_seeds"
    assert all(l.split(",")[5] == "0.000000" for l in lines[1:])
    sweep = paths["sweep_csv"].read_text().splitlines()
    assert len(sweep) == 1 + 2 * 2
    assert "0.5,domain_independent,sum_activations" in paths["sweep_csv"].read_text()
    assert "±" in paths["table"].read_text()


def test_aggregate_two_sigma():
    rows = [{"rho": 0.95, "seed": s, "strategy": "b", "rule": "argmax", "status": "ok",
             "metrics": {"mean_acc": v}} for s, v in enumerate([80.0, 82.0, 84.0, 86.0, 88.0])]
    agg, _ = cli.aggregate(rows)
    mean, spread, n = agg[(0.95, "b", "argmax")]["mean_acc"]
    assert mean == 84.0 and n == 5 and spread == pytest.approx(2 * np.std([80, 82, 84, 86, 88], ddof=1))


def test_subcommands_end_to_end(tmp_path, capsys):
    c = dict(TINY, strategies=["domain_discriminative"], output_dir=str(tmp_path / "runs"))
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump(c))
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--seed", "1", "--out", str(data)]) == 0
    assert (data / "train.skb").exists() and (data / "test.skb").exists()
    model = tmp_path / "m" / "dd.skbm"
    assert cli.main(["train", "--config", str(cfg_path), "--strategy", "domain_discriminative",
                     "--data", str(data / "train.skb"), "--out", str(model)]) == 0
    meta = json.loads((tmp_path / "m" / "dd.skbm.json").read_text())
    assert meta["head_layout"] == "joint_ND" and len(meta["train_prior"]) == 10
    scores = tmp_path / "s.jsonl"
    assert cli.main(["score", "--model", str(model), "--data", str(data / "test.skb"), "--out", str(scores)]) == 0
    assert inference.read_scores(scores).layout == "joint_ND"
    preds = tmp_path / "p.csv"
    assert cli.main(["infer", "--scores", str(scores), "--rule", "sum_joint_shifted",
                     "--prior", str(tmp_path / "m" / "dd.skbm.json"), "--out", str(preds)]) == 0
    assert preds.read_text().startswith("id,pred\n")
    assert cli.main(["infer", "--scores", str(scores), "--rule", "rba_shifted", "--prior", "uniform",
                     "--rba-eps", "0.05", "--out", str(tmp_path / "rba.csv")]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--scores", str(scores), "--predictions", str(preds)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["mean_acc"] <= 100 and "bias" in out
    assert cli.main(["infer", "--scores", str(scores), "--rule", "sum_activations"]) == 2
    assert cli.main(["run-matrix", "--config", str(cfg_path)]) == 0
    assert cli.main(["run-matrix", "--config", str(cfg_path)]) == 2
    assert cli.main(["run-matrix", "--config", str(cfg_path), "--resume"]) == 0
    assert cli.main(["report", "--store", str(tmp_path / "runs")]) == 0
    assert "domain_discriminative" in capsys.readouterr().out


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(dict(TINY, optim={"momentum": 2})))
    assert cli.main(["run-matrix", "--config", str(p)]) == 2
    assert "optim.momentum" in capsys.readouterr().err


def test_missing_cifar_dir_reported(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(dict(TINY, dataset={"kind": "cifar10s", "cifar_dir": str(tmp_path / "nope")})))
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "data_batch_1" in capsys.readouterr().err
