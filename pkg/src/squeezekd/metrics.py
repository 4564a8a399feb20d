"""Run metrics: top-k error, the cross-run convergence-stability statistic,
and deterministic CSV/JSON persistence.

A run directory holds ``epochs.csv`` (one row per epoch: test error plus the
mean of each logged loss component), ``steps.csv`` (one row per optimization
step), and ``summary.json``.  Floats are written with ``repr`` so re-reading
a file reproduces the in-memory values exactly and re-exporting is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

EPOCHS_FILE = "epochs.csv"
STEPS_FILE = "steps.csv"
SUMMARY_FILE = "summary.json"


@dataclass
class RunMetrics:
    """Everything logged for one training run."""

    run_id: str
    seed: int
    epoch_records: list = field(default_factory=list)  # dicts, one per epoch
    step_records: list = field(default_factory=list)  # dicts, one per step
    summary: dict = field(default_factory=dict)

    def epoch_errors(self):
        return [r["test_error"] for r in self.epoch_records]


@dataclass(frozen=True)
class StabilityReport:
    """Per-epoch max-min spread of test error across runs and its variance."""

    window: tuple  # half-open epoch range [start, stop)
    err_range: np.ndarray  # spread per epoch inside the window
    variance: float  # population variance of the spread

    @property
    def num_epochs(self):
        return len(self.err_range)


def top_k_error(logits, labels, k: int) -> float:
    """Fraction of samples whose label is missing from the k largest logits.

    Ties are broken toward the lowest class index (stable sort on the
    negated scores), so equal logits admit the smaller class first.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 2:
        raise ValueError(f"logits must be [B,C], got shape {arr.shape}")
    num_classes = arr.shape[1]
    if not 1 <= k < num_classes:
        raise ValueError(f"k must satisfy 1 <= k < {num_classes}, got {k}")
    labels = np.asarray(labels)
    order = np.argsort(-arr, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(1.0 - hits.mean())


def stability_from_curves(curves, window=None) -> StabilityReport:
    """Stability statistic from raw per-epoch error sequences."""
    curves = [np.asarray(c, dtype=np.float64) for c in curves]
    if len(curves) < 2:
        raise ValueError(f"stability needs at least 2 runs, got {len(curves)}")
    shortest = min(len(c) for c in curves)
    if window is None:
        window = (0, shortest)
    start, stop = int(window[0]), int(window[1])
    if start < 0 or stop <= start:
        raise ValueError(f"invalid window {window}")
    if stop > shortest:
        raise ValueError(
            f"window {window} exceeds the shortest run ({shortest} epochs)"
        )
    stacked = np.stack([c[start:stop] for c in curves])
    err_range = stacked.max(axis=0) - stacked.min(axis=0)
    return StabilityReport(window=(start, stop), err_range=err_range,
                           variance=float(err_range.var()))


def stability(runs, window=None) -> StabilityReport:
    """Stability across runs; accepts RunMetrics or raw error sequences."""
    curves = [r.epoch_errors() if isinstance(r, RunMetrics) else r for r in runs]
    return stability_from_curves(curves, window=window)


# -- persistence ---------------------------------------------------------------------


def _format_value(v):
    if isinstance(v, bool):
        raise TypeError("boolean metric values are not supported in CSV logs")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_value(s):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def _write_records(path: Path, records):
    if not records:
        path.write_text("")
        return
    columns = list(records[0].keys())
    lines = [",".join(columns)]
    for rec in records:
        if list(rec.keys()) != columns:
            raise ValueError("inconsistent record columns in metrics log")
        lines.append(",".join(_format_value(rec[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def _read_records(path: Path):
    text = path.read_text()
    if not text.strip():
        return []
    lines = text.splitlines()
    columns = lines[0].split(",")
    records = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(columns):
            raise ValueError(f"malformed row in {path}: {ln!r}")
        records.append({c: _parse_value(v) for c, v in zip(columns, cells)})
    return records


def export(run: RunMetrics, out_dir) -> Path:
    """Write epochs.csv, steps.csv, and summary.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_records(out / EPOCHS_FILE, run.epoch_records)
    _write_records(out / STEPS_FILE, run.step_records)
    summary = dict(run.summary)
    summary.setdefault("run_id", run.run_id)
    summary.setdefault("seed", run.seed)
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def load_run(run_dir) -> RunMetrics:
    """Rebuild a RunMetrics from an exported run directory."""
    run_dir = Path(run_dir)
    summary_path = run_dir / SUMMARY_FILE
    if not summary_path.is_file():
        raise FileNotFoundError(f"no {SUMMARY_FILE} in {run_dir}")
    try:
        summary = json.loads(summary_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed run file {summary_path}: {exc}") from exc
    try:
        epoch_records = _read_records(run_dir / EPOCHS_FILE)
    except FileNotFoundError:
        raise FileNotFoundError(f"no {EPOCHS_FILE} in {run_dir}") from None
    steps_path = run_dir / STEPS_FILE
    step_records = _read_records(steps_path) if steps_path.is_file() else []
    return RunMetrics(
        run_id=summary.get("run_id", run_dir.name),
        seed=summary.get("seed", 0),
        epoch_records=epoch_records,
        step_records=step_records,
        summary=summary,
    )


def evaluate_top1(backbone, dataset, batch_size=128, dtype=np.float32) -> float:
    """Top-1 test error of a backbone over a dataset (eval mode, no shuffle)."""
    from .data import eval_batches

    was_training = backbone.training
    backbone.eval()
    wrong = 0
    total = 0
    for x, y in eval_batches(dataset, batch_size, dtype=dtype):
        logits = backbone(Tensor(x)).logits.data
        wrong += int((logits.argmax(axis=1) != y).sum())
        total += len(y)
    if was_training:
        backbone.train()
    return wrong / total
