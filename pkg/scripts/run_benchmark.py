"""Run the full corruption benchmark and print the report tables.

    python scripts/run_benchmark.py --out runs/benchmark --workers 4

Stages that already ran are skipped unless --force is given, so a
crashed run can be resumed by re-invoking the same command.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

from selctl import experiment
from selctl.errors import ConfigError


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def print_table(title, rows, columns):
    print(f"\n{title}")
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in columns]
    print("  " + "  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  " + "  ".join(str(r[c]).ljust(w) for c, w in zip(columns, widths)))


def fmt(x, nd=4):
    return f"{float(x):.{nd}f}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/benchmark.json")
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    cfg = experiment.effective_config(args.config)
    stages = [
        ("generate", experiment.run_generate),
        ("train", experiment.run_train),
        ("evaluate", experiment.run_evaluate),
        ("analyze", experiment.run_analyze),
    ]
    t_total = time.time()
    for name, fn in stages:
        t0 = time.time()
        try:
            fn(cfg, args.out, force=args.force, workers=args.workers)
        except ConfigError as e:
            if "already exists" not in str(e):
                raise
            print(f"[{name}] outputs exist, skipping (use --force to redo)")
            continue
        print(f"[{name}] {time.time() - t0:.1f}s")
    print(f"total {(time.time() - t_total) / 60.0:.1f} min")

    reports = os.path.join(args.out, "reports")
    summary = read_csv(os.path.join(reports, "summary.csv"))
    for row in summary:
        row["mean_reward"] = fmt(row["mean_reward"])
        row["ci_lo"], row["ci_hi"] = fmt(row["ci_lo"]), fmt(row["ci_hi"])
    print_table(
        "mean test AUROC by strategy and K (95% bootstrap CI)",
        [r for r in summary if r["subset"] == "all"],
        ["k", "strategy", "n_tasks", "mean_reward", "ci_lo", "ci_hi"],
    )

    with open(os.path.join(reports, "analysis.json")) as f:
        report = json.load(f)["report"]
    imp = [
        {
            "vs": r["baseline"],
            "subset": r["subset"],
            "mean": fmt(r["mean"]),
            "ci": f"({fmt(r['ci_lo'])}, {fmt(r['ci_hi'])})",
        }
        for r in report["improvements"]
    ]
    print_table(f"improvement of {report['reference']}", imp, ["vs", "subset", "mean", "ci"])

    tt = [
        {
            "feature": r["feature"],
            "vs": r["strategy"],
            report["reference"]: fmt(r["mean_reference"], 3),
            "other": fmt(r["mean_strategy"], 3),
            "p": f"{float(r['p']):.2e}",
        }
        for r in report["ttests"]
    ]
    print_table("selection composition (Welch t-tests)", tt, ["feature", "vs", report["reference"], "other", "p"])

    w1 = [
        {
            "distribution": r["distribution"],
            "pair": r["pair"],
            "mean_distance": fmt(r["mean_distance"], 3),
        }
        for r in report["wasserstein"]
    ]
    print_table("Wasserstein-1 distance to the random baseline", w1, ["distribution", "pair", "mean_distance"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
