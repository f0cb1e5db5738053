import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from trgs.cli import main
from trgs.config import parse_config
from trgs.harness import (CSV_COLUMNS, aggregate_rows, bench_vr_vs_plain, build_problem, read_trace_csv,
                          run_experiment, run_seed, write_trace_csv)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """
[problem]
kind = quartic
dim = 3
noise = additive
noise_scale = 0.1
x0 = 1, 1, 1

[algorithm]
name = fotrgs
epsilon = 0.1
schedule = manual
delta = 0.05
s1 = 16
T = 20

[run]
seeds = 0, 1, 2
"""

FAILING = """
[problem]
kind = exp
dim = 1
x0 = -1000

[algorithm]
name = fotrgs
epsilon = 0.1
schedule = manual
delta = 900
s1 = 1
T = 10

[run]
seeds = 0
"""


def _run(tmp_path, text, name="out", **kw):
    out = tmp_path / name
    code = run_experiment(parse_config(text), out, echo=lambda s: None, **kw)
    return code, out


def test_file_contract(tmp_path):
    code, out = _run(tmp_path, SMALL)
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["aggregate.csv", "summary.csv", "trace_seed0.csv", "trace_seed1.csv", "trace_seed2.csv"]
    rows = read_trace_csv(out / "trace_seed0.csv")
    assert len(rows) == 21
    assert rows[-1]["samples"] == 20 * 16
    assert rows[0]["wall_ms"] is None


def test_rerun_is_byte_identical(tmp_path):
    _, a = _run(tmp_path, SMALL, "a")
    _, b = _run(tmp_path, SMALL, "b", jobs=2)
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_smoothed_aggregate(tmp_path):
    _, out = _run(tmp_path, SMALL, smooth=5)
    text = (out / "aggregate_smooth5.csv").read_text().splitlines()
    assert len(text) == 1 + 5  # 21 records in blocks of 5


def test_failed_seed_leaves_marker(tmp_path):
    code, out = _run(tmp_path, FAILING)
    assert code == 1
    assert (out / "trace_seed0.csv.failed").exists()
    assert "NumericFailure" in (out / "trace_seed0.csv.failed").read_text()
    assert len(read_trace_csv(out / "trace_seed0.csv")) == 2


def test_csv_round_trip(tmp_path):
    res = run_seed(parse_config(SMALL), 0)
    p = tmp_path / "t.csv"
    write_trace_csv(res.trace, p)
    rows = read_trace_csv(p)
    assert [r["F"] for r in rows] == [r.F for r in res.trace.records]
    assert tuple(rows[0]) == CSV_COLUMNS


def test_aggregate_statistics():
    cfg = parse_config(SMALL)
    traces = [run_seed(cfg, s).trace for s in (0, 1)]
    rows = aggregate_rows(traces)
    F = np.array([[r.F for r in t.records] for t in traces])
    assert rows[5]["F_mean"] == pytest.approx(F[:, 5].mean())
    assert rows[5]["F_min"] == F[:, 5].min() and rows[5]["seeds"] == 2


def test_fairness_columns(tmp_path):
    text = (CONFIGS / "fairness_dro.cfg").read_text()
    text = text.replace("T = 3000", "T = 20").replace("base_per_class = 200", "base_per_class = 20")
    text = text.replace("seeds = 0, 1, 2, 3, 4", "seeds = 0")
    code, out = _run(tmp_path, text)
    assert code == 0
    header = (out / "summary.csv").read_text().splitlines()[0].split(",")
    for col in ("worst_acc", "overall_acc", "acc_0", "acc_9"):
        assert col in header


def test_classification_seeding():
    cfg = parse_config((CONFIGS / "fairness_erm.cfg").read_text())
    a, b = build_problem(cfg, 0), build_problem(cfg, 1)
    assert not np.array_equal(a.train.features, b.train.features)
    assert list(a.test.class_counts()) == [200] * 10
    dro = build_problem(parse_config((CONFIGS / "fairness_dro.cfg").read_text()), 0)
    assert dro.x0.size == a.x0.size + 1 and dro.x0[-1] == 0.0
    assert dro.params(dro.x0).flat.size == a.x0.size


def test_bench_matches_average_batch():
    text = (CONFIGS / "quartic_fotrgs_vr.cfg").read_text().replace("seeds = 0-99", "seeds = 0-4")
    res = bench_vr_vs_plain(parse_config(text))
    assert res.plain_batch == 19  # ceil((100 + 9 * 10) / 10)
    assert res.seeds == 5 and res.vr_error.size == res.plain_error.size


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    parse_config(path.read_text())


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed-override", "4"]) == 0
    assert (tmp_path / "o" / "trace_seed4.csv").exists()
    bad = tmp_path / "bad.cfg"
    bad.write_text(SMALL.replace("T = 20", "T = 20\nlearnig_rate = 1"))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "p")]) == 2
    assert "line" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "q")]) == 2
    fail = tmp_path / "fail.cfg"
    fail.write_text(FAILING)
    assert main(["run", "--config", str(fail), "--out", str(tmp_path / "r")]) == 1


def test_cli_validate_selectors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["validate", "--suite", ""])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main(["validate", "--suite", "nosuch"])
    assert main(["validate", "--suite", "corollaries"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_bench_rejects_plain_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL)
    assert main(["bench", "--config", str(cfg)]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "trgs.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "validate" in out.stdout
