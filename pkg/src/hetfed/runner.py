"""Experiment cells: dispatch, output files, resumable matrices and reports.

Each cell writes into ``<out>/<cell_name>/``:

* ``metrics.csv``  method, seed, config_hash, node, round, wdp, cdp, acc
* ``ledger.json``  network messages and bytes, total and per round
* ``pca.csv``      node, sample_id, domain, label, pc1, pc2
* ``result.json``  full RunResult (written last; its presence marks the cell done)
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import traceback
from collections import defaultdict
from pathlib import Path

from .baselines import run_centralized_local, run_fedavg, run_fedmd
from .config import RunConfig
from .metrics import write_metrics_csv, write_pca_csv
from .protocol import RunResult, run_asynchronous_pairs, run_synchronous

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["method", "alpha", "E", "config_hash", "n_seeds",
                  "acc_mean", "acc_sd", "wdp_mean", "wdp_sd", "cdp_mean", "cdp_sd"]


def run_cell(cfg: RunConfig, trace: bool = False) -> RunResult:
    method = cfg.method
    if method == "mutual":
        runner = run_asynchronous_pairs if cfg.async_pairs else run_synchronous
        return runner(cfg, trace=trace)
    if method in ("ind", "agg"):
        return run_centralized_local(method, cfg, trace=trace)
    if method == "fedavg":
        return run_fedavg(cfg, 0.0, trace=trace)
    if method == "fedprox":
        return run_fedavg(cfg, cfg.fedprox_mu, trace=trace)
    if method == "fedmd":
        return run_fedmd(cfg, trace=trace)
    raise ValueError(f"unknown method {method!r}")


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def write_outputs(result: RunResult, cell_dir) -> None:
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(cell_dir / "metrics.csv", result.metrics, result.config_hash)
    _write_json(cell_dir / "ledger.json", result.ledger.to_dict())
    if result.pca_rows:
        write_pca_csv(cell_dir / "pca.csv", result.pca_rows)
    _write_json(cell_dir / "result.json", result.to_dict())


def run_matrix(cells, out_dir) -> int:
    """Run every cell not already completed under ``out_dir``; 1 if any cell failed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for cfg in cells:
        cell_dir = out / cfg.cell_name()
        if (cell_dir / "result.json").exists():
            log.info("skip %s (done)", cell_dir.name)
            continue
        log.info("run %s", cell_dir.name)
        try:
            write_outputs(run_cell(cfg), cell_dir)
        except Exception as exc:  # a failed cell must not stop the matrix
            failed += 1
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.txt").write_text(traceback.format_exc())
            log.error("cell %s failed: %s", cell_dir.name, exc)
    write_report(aggregate(out), out / "report.csv")
    return 1 if failed else 0


def _mean_sd(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else None
    return mean, sd


def aggregate(in_dir) -> list[dict]:
    """Mean and sample standard deviation over seeds of the node-averaged metrics."""
    groups = defaultdict(list)
    for path in sorted(Path(in_dir).glob("*/result.json")):
        res = json.loads(path.read_text())
        cfg = res["config"]
        key = (res["method"], cfg["alpha"], cfg["E"], res["config_hash"])
        groups[key].append(res["metrics"]["avg"])
    rows = []
    for (method, alpha, e, chash), avgs in sorted(groups.items()):
        row = {"method": method, "alpha": alpha, "E": e, "config_hash": chash, "n_seeds": len(avgs)}
        for metric in ("acc", "wdp", "cdp"):
            mean, sd = _mean_sd([a[metric] for a in avgs])
            row[f"{metric}_mean"], row[f"{metric}_sd"] = mean, sd
        rows.append(row)
    return rows


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


def format_report(rows) -> str:
    def pct(mean, sd):
        if mean is None:
            return "   -   "
        s = f"{100 * mean:6.2f}"
        return s + (f" ± {100 * sd:5.2f}" if sd is not None and not math.isnan(sd) else "        ")

    lines = [f"{'method':<28} {'alpha':>5} {'E':>3} {'n':>2}   {'ACC':<15} {'WDP':<15} {'CDP':<15}"]
    for r in rows:
        lines.append(f"{r['method']:<28} {r['alpha']:>5} {r['E']:>3} {r['n_seeds']:>2}   "
                     f"{pct(r['acc_mean'], r['acc_sd']):<15} {pct(r['wdp_mean'], r['wdp_sd']):<15} "
                     f"{pct(r['cdp_mean'], r['cdp_sd']):<15}")
    return "\n".join(lines)
