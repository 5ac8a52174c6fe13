"""Command-line entry points.

Subcommands: generate (write datasets), train (single task), continual
(full sequence with metrics and drift exports), report (aggregate runs
into one CSV).  Every run writes a fully resolved manifest.json that can
be fed back as --config for a byte-identical replay.

Exit codes: 0 success, 2 config/validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .continual import METHODS, MethodConfig, eval_dsc, init_state, run_sequence, train_stage
from .drift import pca_project
from .losses import SegRegWeights
from .model import save_checkpoint
from .synthdata import (
    PRESETS,
    TaskSpec,
    generate_task,
    preset_tasks,
    save_dataset,
    spec_from_dict,
    spec_to_dict,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


_CONFIG_FIELDS = {
    "preset": (str, type(None)),
    "tasks": (list, type(None)),
    "method": str,
    "seed": int,
    "lr": (int, float),
    "momentum": (int, float),
    "epochs": int,
    "batch_size": int,
    "ewc_lambda": (int, float),
    "fisher_samples": int,
    "rehearsal_per_task": int,
    "lam": (int, float),
    "seg_weight": (int, float),
    "dice_ce_mix": (int, float),
    "inv_weight": (int, float, type(None)),
    "projections": int,
    "sigreg_mode": str,
    "quad_points": int,
    "normalize_by_n": bool,
    "pixel_budget": int,
    "probe_pixels": int,
}

_DEFAULTS = {
    "preset": None,
    "tasks": None,
    "method": "seq",
    "seed": 0,
    "lr": 0.002,
    "momentum": 0.9,
    "epochs": 240,
    "batch_size": 4,
    "ewc_lambda": 100.0,
    "fisher_samples": 200,
    "rehearsal_per_task": 32,
    "lam": 0.05,
    "seg_weight": 1.0,
    "dice_ce_mix": 0.5,
    "inv_weight": None,
    "projections": 16,
    "sigreg_mode": "quadrature",
    "quad_points": 257,
    "normalize_by_n": False,
    "pixel_budget": 256,
    "probe_pixels": 512,
}


@dataclasses.dataclass
class RunConfig:
    """Resolved run configuration; `tasks` always holds concrete specs."""

    values: dict
    tasks: list[TaskSpec]

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
        unknown = set(raw) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values = dict(_DEFAULTS)
        values.update(raw)
        for key, types in _CONFIG_FIELDS.items():
            if isinstance(values[key], bool) and types is int:
                raise ConfigError(f"config key {key!r}: expected int, got bool")
            if not isinstance(values[key], types):
                raise ConfigError(
                    f"config key {key!r}: expected {types}, got {type(values[key]).__name__}"
                )
        if values["method"] not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {values['method']!r}")
        if values["tasks"] is not None:
            try:
                tasks = [spec_from_dict(t) for t in values["tasks"]]
            except (ValueError, TypeError, KeyError) as exc:
                raise ConfigError(f"bad task spec: {exc}") from exc
        elif values["preset"] is not None:
            if values["preset"] not in PRESETS:
                raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {values['preset']!r}")
            tasks = list(preset_tasks(values["preset"]))
        else:
            raise ConfigError("config needs either 'preset' or 'tasks'")
        return cls(values=values, tasks=tasks)

    def method_config(self) -> MethodConfig:
        v = self.values
        try:
            weights = SegRegWeights(
                lam=float(v["lam"]),
                seg_weight=float(v["seg_weight"]),
                dice_ce_mix=float(v["dice_ce_mix"]),
                inv_weight=None if v["inv_weight"] is None else float(v["inv_weight"]),
            )
            return MethodConfig(
                method=v["method"],
                lr=float(v["lr"]),
                momentum=float(v["momentum"]),
                epochs=v["epochs"],
                batch_size=v["batch_size"],
                run_seed=v["seed"],
                ewc_lambda=float(v["ewc_lambda"]),
                fisher_samples=v["fisher_samples"],
                rehearsal_per_task=v["rehearsal_per_task"],
                weights=weights,
                projections=v["projections"],
                sigreg_mode=v["sigreg_mode"],
                quad_points=v["quad_points"],
                normalize_by_n=v["normalize_by_n"],
                pixel_budget=v["pixel_budget"],
                probe_pixels=v["probe_pixels"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def manifest(self) -> dict:
        out = dict(self.values)
        out["tasks"] = [spec_to_dict(t) for t in self.tasks]
        return out


def _load_config(args) -> RunConfig:
    raw: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if getattr(args, "preset", None) is not None:
        raw["preset"] = args.preset
        raw.pop("tasks", None)  # an explicit preset re-resolves the task list
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        raw["method"] = args.method
    return RunConfig.from_dict(raw)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(cfg: RunConfig, out_dir: Path):
    _write_json(out_dir / "manifest.json", cfg.manifest())


def _percent(x: float) -> float:
    return float(np.round(100.0 * x, 10))


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec in cfg.tasks:
        save_dataset(generate_task(spec), out_dir / spec.task_id)
    _write_manifest(cfg, out_dir)
    print(f"wrote {len(cfg.tasks)} task datasets to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not 0 <= args.task < len(cfg.tasks):
        raise ConfigError(f"--task {args.task} out of range (have {len(cfg.tasks)} tasks)")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.tasks[args.task]
    task = generate_task(spec)
    mc = cfg.method_config()
    state = init_state(mc, num_classes=spec.num_foreground + 1)
    train_stage(state, task, stage=args.task, cfg=mc)
    test_dsc, _ = eval_dsc(state.params, task.test.images, task.test.masks)
    save_checkpoint(state.params, out_dir / "checkpoint.ckpt")
    _write_json(
        out_dir / "metrics.json",
        {
            "task_id": spec.task_id,
            "method": mc.method,
            "seed": cfg.values["seed"],
            "test_dsc_pp": _percent(test_dsc),
            "config": cfg.manifest(),
        },
    )
    _write_manifest(cfg, out_dir)
    print(f"task {spec.task_id}: test DSC {100 * test_dsc:.2f} pp")
    return EXIT_OK


def _write_scores_csv(path: Path, r: np.ndarray):
    lines = ["stage,task,dsc"]
    for i in range(r.shape[0]):
        for j in range(r.shape[1]):
            lines.append(f"{i + 1},{j + 1},{float(r[i, j])!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_latent_csvs(out_dir: Path, snapshots):
    for snap in snapshots:
        coords, _, _ = pca_project(snap.latents, k=2)
        stage = snap.stage + 1
        lines = ["pc1,pc2,class,stage"]
        for (x, y), c in zip(coords, snap.labels):
            lines.append(f"{float(x)!r},{float(y)!r},{int(c)},{stage}")
        (out_dir / f"latents_stage_{stage}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_continual(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [generate_task(s) for s in cfg.tasks]
    mc = cfg.method_config()
    result = run_sequence(tasks, mc)

    _write_scores_csv(out_dir / "scores.csv", result.r_matrix)
    _write_json(
        out_dir / "metrics.json",
        {
            "method": mc.method,
            "seed": cfg.values["seed"],
            "task_ids": list(result.task_ids),
            "mean_dsc_pp": _percent(result.mean_dsc),
            "bwt_pp": _percent(result.bwt),
            "fwt_pp": _percent(result.fwt),
            "final_dsc_per_task_pp": [_percent(x) for x in result.r_matrix[-1]],
            "baseline_dsc_per_task_pp": [_percent(x) for x in result.baselines],
            "drift_total": None if result.drift is None else result.drift.total,
            "config": cfg.manifest(),
        },
    )
    if result.drift is not None:
        _write_json(out_dir / "drift.json", result.drift.to_dict())
    _write_latent_csvs(out_dir, result.snapshots)
    for t, params in enumerate(result.stage_params, start=1):
        save_checkpoint(params, out_dir / f"checkpoint_stage_{t}.ckpt")
    _write_manifest(cfg, out_dir)
    print(
        f"{mc.method}: mean DSC {100 * result.mean_dsc:.2f} pp, "
        f"BWT {100 * result.bwt:+.2f} pp, FWT {100 * result.fwt:+.2f} pp"
        + (f", drift {result.drift.total:.4f}" if result.drift is not None else "")
    )
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.json"
        if not path.exists():
            raise ConfigError(f"no metrics.json under {run_dir}")
        m = json.loads(path.read_text(encoding="utf-8"))
        if "mean_dsc_pp" not in m:
            raise ConfigError(f"{path} is not a continual-run metrics file")
        drift = m.get("drift_total")
        rows.append(
            f"{m['method']},{m['mean_dsc_pp']!r},{m['bwt_pp']!r},{m['fwt_pp']!r},"
            + ("" if drift is None else repr(float(drift)))
        )
    text = "\n".join(["method,dsc,bwt,fwt,drift"] + rows) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--method", choices=METHODS, default=None, help="override method")
        p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="override preset")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p_gen = sub.add_parser("generate", help="write task datasets")
    common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train one task")
    common(p_train)
    p_train.add_argument("--task", type=int, default=0, help="task index within the config")
    p_train.set_defaults(func=cmd_train)

    p_cont = sub.add_parser("continual", help="run the full task sequence")
    common(p_cont)
    p_cont.set_defaults(func=cmd_continual)

    p_rep = sub.add_parser("report", help="aggregate run metrics into CSV")
    p_rep.add_argument("runs", nargs="+", help="run directories with metrics.json")
    p_rep.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
