import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petl_ast import experiments as ex
from petl_ast.config import from_flat


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**6), st.floats(allow_nan=False, allow_infinity=False),
                          st.one_of(st.none(), st.floats(0, 1e4))), max_size=5))
def test_metrics_csv_round_trip(tmp_path_factory, values):
    rows = [{"epoch": e, "split": "train", "loss": loss, "accuracy": 0.5, "lr": 1e-3,
             "trainable_params": 7, "wall_time": w} for e, loss, w in values]
    path = ex.write_csv(tmp_path_factory.mktemp("csv") / "m.csv", "metrics", rows)
    back = ex.read_csv(path, "metrics")
    assert len(back) == len(rows)
    for r, b in zip(rows, back):
        assert int(b["epoch"]) == r["epoch"]
        assert float(b["loss"]) == r["loss"]               # repr round-trips floats exactly
        assert (b["wall_time"] == "") == (r["wall_time"] is None)


def test_schema_line_and_header(tmp_path):
    path = ex.write_csv(tmp_path / "g.csv", "gradcheck", [])
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema: gradcheck v1"
    assert lines[1] == "method,n_checked,no_gradient,max_rel_error,tolerance,passed"
    with pytest.raises(ValueError, match="schema"):
        ex.read_csv(path, "metrics")
    path.write_text("# schema: gradcheck v1\nmethod,oops\n")
    with pytest.raises(ValueError, match="header"):
        ex.read_csv(path, "gradcheck")


def test_metrics_header_matches_harness_contract():
    assert ex.SCHEMAS["metrics"][1] == ("epoch", "split", "loss", "accuracy", "lr",
                                        "trainable_params", "wall_time")


def test_summarize_population_std():
    rows = [{"shots": 2, "test_accuracy": a} for a in (0.5, 0.7)] + [{"shots": 8, "test_accuracy": 0.9}]
    s = ex.summarize(rows)
    assert [r["shots"] for r in s] == [2, 8]
    assert s[0]["mean_accuracy"] == pytest.approx(0.6) and s[0]["std_accuracy"] == pytest.approx(0.1)
    assert s[1]["std_accuracy"] == 0.0 and s[1]["n_seeds"] == 1


def test_mean_by():
    rows = [{"method": "a", "test_accuracy": 1.0}, {"method": "a", "test_accuracy": 0.0},
            {"method": "b", "test_accuracy": 0.25}]
    assert ex.mean_by(rows, "method") == {"a": 0.5, "b": 0.25}


def test_desk_targets_scale_with_encoder():
    full = ex.desk_targets(from_flat({"d": 768, "L": 12, "heads": 12, "freq_bins": 32, "time_bins": 32}))
    assert full[0] == 50_000 and full[-1] == 1_000_000
    desk = ex.desk_targets(from_flat({}))
    assert len(desk) == 6 and all(a < b for a, b in zip(desk, desk[1:]))
    assert desk[0] == round(50_000 * 4 * 64 / (12 * 768))
    assert math.isclose(desk[-1] / desk[0], 20, rel_tol=1e-3)
