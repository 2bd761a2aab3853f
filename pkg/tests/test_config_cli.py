import json

import pytest

from petl_ast import experiments as ex
from petl_ast.cli import cmd_count, main
from petl_ast.config import (
    KEYS,
    OUTPUT_ENV,
    ConfigError,
    check_values,
    dump_config,
    from_flat,
    load_config_file,
)

# Small enough for a run to take about a second.
TINY = ["--d", "16", "--L", "2", "--heads", "2", "--freq-bins", "16", "--time-bins", "16",
        "--patch-h", "4", "--patch-w", "4", "--n-classes", "3", "--samples-per-class", "12",
        "--epochs", "2", "--pretrain-classes", "3", "--pretrain-samples-per-class", "10",
        "--pretrain-epochs", "1"]


def _tiny_flat(**kw):
    flat = {"d": 16, "L": 2, "heads": 2, "freq_bins": 16, "time_bins": 16, "patch_h": 4, "patch_w": 4,
            "n_classes": 3, "samples_per_class": 12, "epochs": 2, "pretrain_classes": 3,
            "pretrain_samples_per_class": 10, "pretrain_epochs": 1}
    flat.update(kw)
    return flat


# --------------------------------------------------------------- config


def test_flat_round_trip():
    for flat in ({}, {"method": "conformer", "k": 5, "config": "houlsby"}, _tiny_flat(method="lora", r=2),
                 {"full_scale": True, "method": "bottleneck", "r": 12}):
        cfg = from_flat(flat)
        assert from_flat(cfg.to_flat()) == cfg


def test_unknown_key_and_bad_type_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        check_values({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        check_values({"epochs": "ten"})
    with pytest.raises(ConfigError):
        from_flat({"d": 10, "heads": 4})
    with pytest.raises(ConfigError):
        from_flat({"method": "conformer", "mode": "sequential"})


def test_seed_propagates_to_task():
    cfg = from_flat({"seed": 3})
    assert cfg.seed == cfg.train.seed == cfg.task.seed == 3
    assert cfg.with_seed(5).task.seed == 5


def test_method_default_learning_rate():
    assert from_flat({"method": "spt"}).train.lr == 0.01
    assert from_flat({"method": "lora"}).train.lr == 0.005
    assert from_flat({"method": "lora", "lr": 0.02}).train.lr == 0.02
    assert from_flat({"method": "lora"}).with_method(from_flat({"method": "dpt"}).method).train.lr == 0.01


def test_config_file_round_trip(tmp_path):
    cfg = from_flat(_tiny_flat(method="bottleneck", r=3))
    dump_config(cfg, tmp_path / "c.json")
    assert from_flat(load_config_file(tmp_path / "c.json")) == cfg
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "bad.json")


def test_every_key_has_a_flag(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = capsys.readouterr().out
    for key in KEYS:
        if key != "config":
            assert "--" + key.replace("_", "-") in text


# ---------------------------------------------------------------- count


def test_count_lora_full_scale(capsys):
    assert main(["count", "--method", "lora", "--r", "6", "--full-scale", "--json"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["trainable_params"] == 221_184
    assert rec["percent_of_full_str"] == "0.26%"


def test_count_houlsby_doubles_conformer():
    pf = cmd_count(from_flat({"full_scale": True, "method": "conformer", "r": 8, "k": 31}))[0]
    hb = cmd_count(from_flat({"full_scale": True, "method": "conformer", "r": 8, "k": 31,
                              "config": "houlsby"}))[0]
    assert hb.trainable_params == 2 * pf.trainable_params


def test_count_bitfit_and_table(capsys):
    assert main(["count", "--method", "bitfit", "--full-scale"]) == 0
    assert "101,376" in capsys.readouterr().out
    assert main(["count", "--all", "--full-scale"]) == 0
    table = capsys.readouterr().out
    for n in ("221,184", "230,400", "101,376", "248,976", "497,952"):
        assert n in table


def test_config_errors_exit_1(capsys):
    assert main(["count", "--method", "lora", "--r", "0"]) == 1
    assert main(["count", "--d", "10", "--heads", "4"]) == 1
    assert main(["train", "--full-scale"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["count", "--bogus"])
    assert exc.value.code == 1
    assert main(["sweep-budget", "--methods", "bitfit"] + TINY) == 1
    assert "config error" in capsys.readouterr().err


def test_unknown_config_file_key_exits_1(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 1}))
    assert main(["count", "--config", str(tmp_path / "c.json")]) == 1


# ---------------------------------------------------------------- train


def test_train_writes_run_directory(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--method", "conformer", "--r", "2", "--k", "3", "--output-dir", str(out)] + TINY) == 0
    for name in ("config.json", "metrics.csv", "petl.ckpt", "params.json"):
        assert (out / name).exists()
    rows = ex.read_csv(out / "metrics.csv", "metrics")
    assert len(rows) == 2 * 2 + 1
    assert all(r["wall_time"] == "" for r in rows)
    assert from_flat(json.loads((out / "config.json").read_text())).method.kind == "conformer"


def test_train_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--method", "lora", "--r", "2", "--output-dir", str(tmp_path / name)] + TINY) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_linear_trains_head_only(tmp_path):
    assert main(["train", "--method", "linear", "--output-dir", str(tmp_path)] + TINY) == 0
    rec = json.loads((tmp_path / "params.json").read_text())
    assert rec["trainable_params"] == 0 and rec["head_params"] == 16 * 3 + 3
    rows = ex.read_csv(tmp_path / "metrics.csv", "metrics")
    assert {r["trainable_params"] for r in rows} == {str(16 * 3 + 3)}


def test_wall_time_flag(tmp_path):
    assert main(["train", "--wall-time", "--output-dir", str(tmp_path)] + TINY) == 0
    rows = ex.read_csv(tmp_path / "metrics.csv", "metrics")
    assert all(float(r["wall_time"]) >= 0 for r in rows)


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "root"))
    assert main(["train"] + TINY) == 0
    assert (tmp_path / "root" / "train" / "metrics.csv").exists()


# ------------------------------------------------------------- gradcheck


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--method", "lora", "--r", "2", "--probes", "20",
                 "--output-dir", str(tmp_path)] + TINY) == 0
    assert "PASS lora" in capsys.readouterr().out
    rows = ex.read_csv(tmp_path / "gradcheck.csv", "gradcheck")
    assert rows[0]["n_checked"] == "20"


def test_gradcheck_failure_exits_2(tmp_path, capsys):
    code = main(["gradcheck", "--method", "lora", "--r", "2", "--probes", "20", "--corrupt-grad", "0.01",
                 "--output-dir", str(tmp_path)] + TINY)
    assert code == 2
    assert "FAIL lora" in capsys.readouterr().out


# ---------------------------------------------------------------- sweeps


def test_fewshot_command(tmp_path):
    assert main(["fewshot", "--method", "conformer", "--r", "2", "--k", "3", "--shots", "1,2",
                 "--seeds", "0,1", "--output-dir", str(tmp_path)] + TINY) == 0
    rows = ex.read_csv(tmp_path / "fewshot.csv", "fewshot")
    assert [(r["shots"], r["seed"]) for r in rows] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]
    assert len({r["trainable_params"] for r in rows}) == 1
    summary = ex.read_csv(tmp_path / "fewshot_summary.csv", "fewshot-summary")
    assert [s["n_seeds"] for s in summary] == ["2", "2"]


def test_sweep_kernel_command(tmp_path):
    assert main(["sweep-kernel", "--r", "2", "--k-list", "1,3", "--shots", "2",
                 "--output-dir", str(tmp_path)] + TINY) == 0
    rows = ex.read_csv(tmp_path / "sweep_kernel.csv", "sweep-kernel")
    assert [(r["k"], r["mode"]) for r in rows] == [("1", "full"), ("1", "fewshot"),
                                                  ("3", "full"), ("3", "fewshot")]
    assert int(rows[2]["params"]) - int(rows[0]["params"]) == 2 * 2 * 2


def test_sweep_budget_command(tmp_path, capsys):
    with pytest.warns(UserWarning, match="target 10 is below"):
        assert main(["sweep-budget", "--methods", "lora,conformer", "--targets", "10,300,600",
                     "--output-dir", str(tmp_path)] + TINY) == 0
    rows = ex.read_csv(tmp_path / "sweep_budget.csv", "sweep-budget")
    assert rows and all(int(r["params"]) <= int(r["target"]) for r in rows)
    assert "warning" in capsys.readouterr().err   # target 10 is below every minimum
