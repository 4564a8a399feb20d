"""Experiment front end: ``train-teacher``, ``distill``, ``ablate``, ``report``.

Runs are driven by a single key-value config file (``key = value`` lines,
``#`` comments).  Every §-defaults hyperparameter is pre-filled, so a minimal
config only names the dataset and the output directory; the fully resolved
config is written next to the outputs as ``config.resolved`` and re-running
from that file reproduces the run bit for bit.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime
divergence (a loss went non-finite).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .data import DataFormatError, load_datasets
from .metrics import export, load_run, stability_from_curves
from .trainer import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    load_teacher_checkpoint,
    mask_label,
    run_ablation,
    save_teacher_checkpoint,
    train_student,
    train_teacher,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

RESOLVED_NAME = "config.resolved"

# keys a run config may carry beyond the trainer's own settings
WRAPPER_KEYS = ("output", "runs")


class ConfigError(ValueError):
    """Bad config file or bad command-line usage; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    """A TrainConfig plus the experiment wrapper: output dir and run count."""

    train: TrainConfig
    output: str = ""
    runs: int = 5

    def to_flat(self) -> dict:
        flat = self.train.to_flat()
        flat["output"] = self.output
        flat["runs"] = str(self.runs)
        return flat


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into a dict; report bad lines precisely."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def load_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = parse_config_text(path.read_text(), source=str(path))
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    wrapper = {}
    for key in WRAPPER_KEYS:
        if key in raw:
            wrapper[key] = raw.pop(key)
    try:
        train = TrainConfig.from_flat(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    runs = wrapper.get("runs", "5")
    try:
        runs = int(runs)
    except ValueError:
        raise ConfigError(f"{path}: runs must be an integer, got {runs!r}") from None
    if runs < 1:
        raise ConfigError(f"{path}: runs must be >= 1, got {runs}")
    return RunConfig(train=train, output=wrapper.get("output", ""), runs=runs)


def serialize_config(run_config: RunConfig) -> str:
    lines = ["# resolved run configuration (all defaults applied)"]
    for key, value in sorted(run_config.to_flat().items()):
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _resolve_output(run_config: RunConfig, args) -> Path:
    output = args.output or run_config.output
    if not output:
        raise ConfigError("no output directory: set 'output' in the config or pass --output")
    return Path(output)


def _prepare_output(out_dir: Path, force: bool):
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigError(
                f"output directory {out_dir} is not empty; pass --force to overwrite"
            )
    out_dir.mkdir(parents=True, exist_ok=True)


def _require_dataset(config: TrainConfig):
    if config.dataset.kind != "synth" and not Path(config.dataset.path).exists():
        raise ConfigError(f"dataset.path does not exist: {config.dataset.path!r}")


def _write_resolved(run_config: RunConfig, out_dir: Path):
    (out_dir / RESOLVED_NAME).write_text(serialize_config(run_config))


def cmd_train_teacher(args) -> int:
    run_config = load_config(args.config, overrides={"seed": args.seed,
                                                     "output": args.output})
    config = replace(run_config.train, stage="teacher")
    if config.teacher_epochs is not None:
        config = replace(config, epochs=config.teacher_epochs)
    run_config = replace(run_config, train=config)
    _require_dataset(config)
    out_dir = _resolve_output(run_config, args)
    _prepare_output(out_dir, args.force)
    _write_resolved(run_config, out_dir)
    train_data, test_data = load_datasets(config.dataset, config.seed)
    artifacts = train_teacher(config, train_data, test_data)
    save_teacher_checkpoint(out_dir / "teacher.ckpt", artifacts, config)
    export(artifacts.metrics, out_dir)
    final = artifacts.metrics.summary.get("final_test_error", float("nan"))
    print(f"teacher trained: train error {artifacts.final_train_error:.4f}, "
          f"test error {final:.4f}")
    print(f"checkpoint: {out_dir / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_distill(args) -> int:
    overrides = {"seed": args.seed, "output": args.output}
    if args.loss_mask is not None:
        overrides["loss_mask"] = args.loss_mask
    run_config = load_config(args.config, overrides=overrides)
    config = replace(run_config.train, stage="student")
    run_config = replace(run_config, train=config)
    _require_dataset(config)
    if not args.teacher:
        raise ConfigError("distill requires --teacher <checkpoint>")
    teacher_path = Path(args.teacher)
    if not teacher_path.is_file():
        raise ConfigError(f"teacher checkpoint not found: {teacher_path}")
    out_dir = _resolve_output(run_config, args)
    _prepare_output(out_dir, args.force)
    _write_resolved(run_config, out_dir)
    teacher = load_teacher_checkpoint(teacher_path, config)
    train_data, test_data = load_datasets(config.dataset, config.seed)
    result = train_student(
        config, train_data, test_data, teacher,
        checkpoint_dir=out_dir,
        run_id=f"{mask_label(config.loss_mask)}_seed{config.seed}",
    )
    export(result.metrics, out_dir)
    final = result.metrics.summary.get("final_test_error", float("nan"))
    print(f"student distilled ({mask_label(config.loss_mask)}): test error {final:.4f}")
    print(f"checkpoint: {out_dir / 'student.ckpt'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run_config = load_config(args.config, overrides={"seed": args.seed,
                                                     "output": args.output})
    config = replace(run_config.train, stage="student")
    run_config = replace(run_config, train=config)
    _require_dataset(config)
    runs = args.runs if args.runs is not None else run_config.runs
    if runs < 1:
        raise ConfigError(f"--runs must be >= 1, got {runs}")
    out_dir = _resolve_output(run_config, args)
    _prepare_output(out_dir, args.force)
    _write_resolved(replace(run_config, runs=runs), out_dir)
    result = run_ablation(config, runs=runs,
                          on_run=lambda m: export(m, out_dir / m.run_id))
    rows = ["variant,mean_error,median_error," + ",".join(
        f"seed{config.seed + r}" for r in range(runs))]
    for row in result.rows:
        errs = ",".join(repr(e) for e in row["errors"])
        rows.append(f"{row['label']},{repr(row['mean_error'])},"
                    f"{repr(row['median_error'])},{errs}")
    (out_dir / "ablation.csv").write_text("\n".join(rows) + "\n")
    print(result.table())
    print(f"per-run metrics under {out_dir}")
    return EXIT_OK


def _parse_window(text):
    if text is None:
        return None
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"--window must look like 'start:stop', got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"--window bounds must be integers, got {text!r}") from None


def cmd_report(args) -> int:
    runs_dir = Path(args.runs_dir)
    if not runs_dir.is_dir():
        raise ConfigError(f"runs directory not found: {runs_dir}")
    window = _parse_window(args.window)
    groups: dict = {}
    for child in sorted(runs_dir.iterdir()):
        if not (child / "summary.json").is_file():
            continue
        try:
            run = load_run(child)
        except (ValueError, FileNotFoundError) as exc:
            raise ConfigError(f"malformed run directory {child}: {exc}") from exc
        variant = run.summary.get("variant", "run")
        if variant == "teacher":
            continue
        groups.setdefault(variant, []).append(run)
    if not groups:
        raise ConfigError(f"no exported runs found under {runs_dir}")
    lines = ["variant,runs,mean_error,stability"]
    print(f"{'variant':<14} {'runs':>4} {'mean err':>9} {'stability':>12}")
    for variant in sorted(groups):
        runs = groups[variant]
        if len(runs) < 2:
            raise ConfigError(
                f"variant {variant!r} has {len(runs)} run(s); stability needs >= 2"
            )
        curves = [r.epoch_errors() for r in runs]
        try:
            report = stability_from_curves(curves, window=window)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        finals = [c[-1] for c in curves]
        mean_error = sum(finals) / len(finals)
        print(f"{variant:<14} {len(runs):>4} {mean_error:>9.4f} {report.variance:>12.3e}")
        lines.append(f"{variant},{len(runs)},{repr(mean_error)},{repr(report.variance)}")
    comparison = runs_dir / "comparison.csv"
    if comparison.exists() and not args.force:
        raise ConfigError(f"{comparison} exists; pass --force to overwrite")
    comparison.write_text("\n".join(lines) + "\n")
    print(f"wrote {comparison}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="squeezekd",
        description="Adversarial teacher-student compression experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, teacher=False, mask=False, runs=False):
        p.add_argument("--config", required=True, help="key=value run config file")
        p.add_argument("--seed", type=str, default=None, help="override the config seed")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite a non-empty output directory")
        if teacher:
            p.add_argument("--teacher", default=None, help="teacher checkpoint path")
        if mask:
            p.add_argument("--loss-mask", default=None,
                           help="subset of b,adv,is (e.g. 'b,is')")
        if runs:
            p.add_argument("--runs", type=int, default=None,
                           help="number of seeds per variant")

    p = sub.add_parser("train-teacher", help="stage 1: fit the teacher")
    add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="stage 2: adversarial distillation")
    add_common(p, teacher=True, mask=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="train every loss-composition variant")
    add_common(p, runs=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarize exported runs (mean error, stability)")
    p.add_argument("runs_dir", help="directory of exported run directories")
    p.add_argument("--window", default=None, help="epoch window 'start:stop'")
    p.add_argument("--force", action="store_true", help="overwrite comparison.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
