"""Run configured experiments and sweeps; write the CSV metrics files."""

from __future__ import annotations

import csv
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig, dump_config, to_experiment, with_override
from .protocols import RunResult, run_protocol

TIMELINE_COLUMNS = ["sim_time_s", "step", "client_id", "train_loss", "bytes_up_total", "bytes_down_total"]
SUMMARY_COLUMNS = [
    "client_id", "q", "device", "personalized_acc", "global_acc", "peak_memory_bytes",
    "bytes_up", "bytes_down", "total_bytes", "steps", "dropped", "compute_s", "idle_s", "total_sim_s",
]
SWEEP_METRICS = ["personalized_acc", "global_acc", "total_sim_s", "total_bytes", "peak_memory_bytes",
                 "final_train_loss"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def summary_rows(res: RunResult, devices: Sequence[str]) -> list[list]:
    led = res.ledger
    rows = []
    for c in range(led.num_clients):
        rows.append([
            c, res.q[c], devices[c], res.personalized_acc[c], res.global_acc[c], led.peak_memory_bytes[c],
            led.bytes_up[c], led.bytes_down[c], led.bytes_up[c] + led.bytes_down[c], led.steps[c],
            led.dropped[c], led.compute_s[c], led.idle_s[c], led.total_time_s,
        ])
    rows.append([
        "all", statistics.fmean(res.q), "-", res.mean_personalized_acc, res.mean_global_acc,
        max(led.peak_memory_bytes), led.total_bytes_up, led.total_bytes_down,
        led.total_bytes_up + led.total_bytes_down, led.total_steps, sum(led.dropped),
        sum(led.compute_s), sum(led.idle_s), led.total_time_s,
    ])
    return rows


def write_run(res: RunResult, devices: Sequence[str], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "timeline.csv", TIMELINE_COLUMNS,
           ([r.sim_time_s, r.step, r.client_id, r.train_loss, r.bytes_up_total, r.bytes_down_total]
            for r in res.timeline))
    _write(out / "summary.csv", SUMMARY_COLUMNS, summary_rows(res, devices))
    n = len(res.crosseval)
    _write(out / "crosseval.csv", ["model"] + [f"shard_{j}" for j in range(n)],
           ([i, *map(float, res.crosseval[i])] for i in range(n)))


def run_experiment(cfg: ExperimentConfig, seed: int, out: str | Path | None = None) -> RunResult:
    """One run; writes ``timeline.csv``, ``summary.csv`` and ``crosseval.csv`` when ``out`` is given."""
    res = run_protocol(to_experiment(cfg), seed, keep_trace=False)
    if out is not None:
        write_run(res, [c.device for c in cfg.client_list()], Path(out))
    return res


def run_all_seeds(cfg: ExperimentConfig, seeds: Sequence[int], out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    dirs = []
    for s in seeds:
        d = out / f"seed_{s}"
        run_experiment(cfg, s, d)
        dirs.append(d)
    return dirs


def point_metrics(res: RunResult) -> dict[str, float]:
    led = res.ledger
    last = res.timeline[-1].train_loss if res.timeline else float("nan")
    return {
        "personalized_acc": res.mean_personalized_acc,
        "global_acc": res.mean_global_acc,
        "total_sim_s": led.total_time_s,
        "total_bytes": float(led.total_bytes_up + led.total_bytes_down),
        "peak_memory_bytes": float(max(led.peak_memory_bytes)),
        "final_train_loss": last,
    }


def _sweep_point(args) -> dict[str, float]:
    cfg, param, value, seed = args
    return point_metrics(run_experiment(with_override(cfg, param, value), seed))


def sweep(cfg: ExperimentConfig, param: str, values: Sequence[float], seeds: Sequence[int],
          jobs: int = 1) -> list[dict]:
    """Mean and sample std of every metric per value, over ``seeds``."""
    # validate every point before any work starts
    for v in values:
        with_override(cfg, param, v)
    tasks = [(cfg, param, v, s) for v in values for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = []
    for i, v in enumerate(values):
        chunk = results[i * len(seeds):(i + 1) * len(seeds)]
        row = {"param": param, "value": v, "n_seeds": len(chunk)}
        for m in SWEEP_METRICS:
            xs = [r[m] for r in chunk]
            row[f"{m}_mean"] = statistics.fmean(xs)
            row[f"{m}_std"] = statistics.stdev(xs) if len(xs) > 1 else 0.0
        rows.append(row)
    return rows


def write_sweep(rows: list[dict], path: str | Path) -> None:
    header = list(rows[0])
    _write(Path(path), header, ([r[k] for k in header] for r in rows))
