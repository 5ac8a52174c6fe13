#!/usr/bin/env python3
"""Run a method x seed grid of continual runs and aggregate the results.

Each cell is one `segreg continual` subprocess writing to its own output
directory (<out>/<method>-seed<seed>/), so cells are independent and can
run concurrently with --jobs. Finishes by writing <out>/summary.csv via
the report subcommand.

Example:
    python3 scripts/run_grid.py --preset hippocampus-like \
        --methods seq segreg rehearsal --seeds 0 1 2 --out runs/grid
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from segreg.continual import METHODS


def run_cell(config_path: Path, method: str, seed: int, out_dir: Path) -> tuple[str, int]:
    name = f"{method}-seed{seed}"
    cmd = [
        sys.executable,
        "-m",
        "segreg.cli",
        "continual",
        "--config",
        str(config_path),
        "--method",
        method,
        "--seed",
        str(seed),
        "--out",
        str(out_dir / name),
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        sys.stderr.write(f"[{name}] failed ({proc.returncode}):\n{proc.stderr}")
    else:
        sys.stdout.write(f"[{name}] {proc.stdout}")
    return name, proc.returncode


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None, help="base JSON config")
    parser.add_argument("--preset", default=None, help="preset name (overrides config tasks)")
    parser.add_argument("--methods", nargs="+", default=["seq", "segreg"], choices=METHODS)
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    parser.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    parser.add_argument("--out", required=True, help="grid output directory")
    args = parser.parse_args(argv)

    if args.config is None and args.preset is None:
        parser.error("need --config or --preset")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    base = {}
    if args.config is not None:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.preset is not None:
        base["preset"] = args.preset
        base.pop("tasks", None)
    config_path = out_dir / "base_config.json"
    config_path.write_text(json.dumps(base, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    cells = [(m, s) for m in args.methods for s in args.seeds]
    failures = 0
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futures = [pool.submit(run_cell, config_path, m, s, out_dir) for m, s in cells]
        for fut in futures:
            _, code = fut.result()
            failures += code != 0
    if failures:
        print(f"{failures}/{len(cells)} runs failed", file=sys.stderr)
        return 1

    report_cmd = [
        sys.executable,
        "-m",
        "segreg.cli",
        "report",
        *(str(out_dir / f"{m}-seed{s}") for m, s in cells),
        "--out",
        str(out_dir / "summary.csv"),
    ]
    subprocess.run(report_cmd, check=True)
    print(f"summary written to {out_dir / 'summary.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
