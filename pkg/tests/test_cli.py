import csv
import subprocess
import sys

import pytest
import yaml

from flexp_sfl import cli
from flexp_sfl.config import load_config

SMALL = {
    "seeds": [0, 1],
    "federation": {"num_clients": 3, "samples_per_client": 60},
    "model": {"num_middle_blocks": 4},
    "plan": {"target_steps": 30, "lam": 0.25},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_metrics(cfg_path, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    for s in (0, 1):
        d = out / f"seed_{s}"
        timeline = _rows(d / "timeline.csv")
        assert list(timeline[0]) == ["sim_time_s", "step", "client_id", "train_loss", "bytes_up_total",
                                     "bytes_down_total"]
        summary = _rows(d / "summary.csv")
        assert [r["client_id"] for r in summary] == ["0", "1", "2", "all"]
        assert len(_rows(d / "crosseval.csv")) == 3
    # the written config reloads to the same experiment
    assert load_config(out / "config.yaml") == load_config(cfg_path)


def test_summary_totals_match_last_timeline_row(cfg_path, tmp_path):
    cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path), "--seed", "3"])
    d = tmp_path / "seed_3"
    last = _rows(d / "timeline.csv")[-1]
    total = _rows(d / "summary.csv")[-1]
    assert int(total["bytes_up"]) == int(last["bytes_up_total"])
    assert int(total["bytes_down"]) == int(last["bytes_down_total"])
    assert float(total["total_sim_s"]) >= float(last["sim_time_s"])


def test_same_seed_byte_identical(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", "--config", str(cfg_path), "--out", str(a), "--seed", "5"])
    cli.main(["run", "--config", str(cfg_path), "--out", str(b), "--seed", "5"])
    for name in ("timeline.csv", "summary.csv", "crosseval.csv"):
        assert (a / "seed_5" / name).read_bytes() == (b / "seed_5" / name).read_bytes()


def test_sweep_one_row_per_value(cfg_path, tmp_path, capsys):
    rc = cli.main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path), "--param", "lambda",
                   "--values", "0,0.5"])
    assert rc == 0
    rows = _rows(tmp_path / "sweep_lambda.csv")
    assert [float(r["value"]) for r in rows] == [0.0, 0.5]
    assert all(r["n_seeds"] == "2" for r in rows)
    assert "personalized_acc_mean" in rows[0] and "global_acc_std" in rows[0]
    assert "lambda=0.5" in capsys.readouterr().out


def test_sweep_with_workers_matches_serial(cfg_path, tmp_path):
    args = ["sweep", "--config", str(cfg_path), "--param", "dropout", "--values", "0,0.2", "--seed", "0"]
    cli.main(args + ["--out", str(tmp_path / "serial")])
    cli.main(args + ["--out", str(tmp_path / "pool"), "--jobs", "2"])
    assert ((tmp_path / "serial" / "sweep_dropout.csv").read_bytes()
            == (tmp_path / "pool" / "sweep_dropout.csv").read_bytes())


def test_exit_code_invalid_config(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"plan": {"clients": [{"q": 0.5}] * 4 + [{"q": 1.5}]}}))
    assert cli.main(["run", "--config", str(p)]) == 1
    assert "plan.clients[4].q" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_exit_code_sweep_value_out_of_range(cfg_path, tmp_path):
    assert cli.main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path), "--param", "q",
                     "--values", "0.5,1.5"]) == 1
    assert not (tmp_path / "sweep_q.csv").exists()


def test_exit_code_unwritable_output(cfg_path, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(blocker / "sub")]) == 2


def test_exit_code_verify_failure(monkeypatch):
    from flexp_sfl import verify

    monkeypatch.setattr(verify, "run_all", lambda: [verify.CheckResult("broken", False, 1.0, "< 0")])
    assert cli.main(["verify"]) == 3


def test_gen_data(cfg_path, tmp_path):
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path), "--seed", "2"]) == 0
    rows = _rows(tmp_path / "shards_seed_2.csv")
    assert len(rows) == 3 * 60
    assert {r["client_id"] for r in rows} == {"0", "1", "2"}


def test_console_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "flexp_sfl.cli", "print-config-reference"],
                          capture_output=True, text=True, check=True)
    assert "plan.lam" in done.stdout
    bad = subprocess.run([sys.executable, "-m", "flexp_sfl.cli", "run"], capture_output=True, text=True)
    assert bad.returncode == 1
    assert "--config" in bad.stderr
