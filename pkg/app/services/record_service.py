# app/services/record_service.py
"""Writers for run artifacts: the versioned metrics CSV, seed summaries and report documents."""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.errors import DataError
from app.models import BoundReport, EpochRow, OvertrainEntry, RunRecord, SweepRow

logger = logging.getLogger(__name__)

METRICS_VERSION_LINE = "# moda-metrics v1"
SWEEP_COLUMNS = ["param", "value", "mean_acc", "std_acc", "n_seeds"]


def format_float(value: float) -> str:
    """Shortest repr that round-trips; identical bytes for identical floats."""
    return repr(float(value))


def metrics_columns(num_sources: int) -> List[str]:
    return (["epoch", "loss_class", "loss_disc", "loss_cons", "sparsity", "total"]
            + [f"alpha_{j}" for j in range(num_sources)]
            + ["masked_frac", "acc_target"]
            + [f"acc_src_{j}" for j in range(num_sources)])


def row_values(row: EpochRow) -> List[str]:
    floats = ([row.loss_class, row.loss_disc, row.loss_cons, row.sparsity, row.total] + list(row.alpha)
              + [row.masked_frac, row.acc_target] + list(row.acc_src))
    return [str(row.epoch)] + [format_float(v) for v in floats]


class MetricsWriter:
    """Appends one CSV row per epoch so a failed run still leaves its completed epochs on disk."""

    def __init__(self, path: Union[str, Path], num_sources: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.num_sources = num_sources
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            f.write(METRICS_VERSION_LINE + "\n")
            csv.writer(f, lineterminator="\n").writerow(metrics_columns(num_sources))

    def append(self, row: EpochRow) -> None:
        if len(row.alpha) != self.num_sources:
            raise DataError(f"epoch {row.epoch}: expected {self.num_sources} alpha components, got {len(row.alpha)}")
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(row_values(row))


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    if first != METRICS_VERSION_LINE:
        raise DataError(f"{path}: unsupported metrics file (first line {first!r})")
    return pd.read_csv(path, skiprows=1)


# --- summaries ----------------------------------------------------------------

def final_metrics(record: RunRecord) -> Dict[str, float]:
    """Last-epoch values of a run keyed by metrics-CSV column name."""
    if not record.rows:
        return {}
    row = record.rows[-1]
    columns = metrics_columns(len(row.alpha))[1:]
    values = ([row.loss_class, row.loss_disc, row.loss_cons, row.sparsity, row.total] + list(row.alpha)
              + [row.masked_frac, row.acc_target] + list(row.acc_src))
    return {name: float(v) for name, v in zip(columns, values)}


def mean_std(values: Sequence[float]) -> Dict[str, Optional[float]]:
    """Mean and sample standard deviation (ddof=1); std is None below two values."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        return {"mean": None, "std": None, "n": 0}
    std = float(np.std(array, ddof=1)) if array.size > 1 else None
    return {"mean": float(np.mean(array)), "std": std, "n": int(array.size)}


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def summarize(records: Sequence[RunRecord]) -> Dict[str, object]:
    completed = [r for r in records if r.status == "completed" and r.rows]
    finals = [final_metrics(r) for r in completed]
    names = list(finals[0]) if finals else []
    return {
        "runs": [
            {
                "run_id": r.run_id,
                "seed": r.seed,
                "mode": r.mode,
                "status": r.status,
                "failure_reason": r.failure_reason,
                "epochs": len(r.rows),
                "metrics_path": r.metrics_path,
                "checkpoint_path": r.checkpoint_path,
            }
            for r in records
        ],
        "completed": len(completed),
        "failed": len(records) - len(completed),
        "metrics": {name: mean_std([f[name] for f in finals]) for name in names},
    }


def write_json(payload: object, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_json_safe(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_summary(records: Sequence[RunRecord], path: Union[str, Path]) -> Path:
    path = write_json(summarize(records), path)
    logger.info(f"Saved summary of {len(records)} runs to {path}")
    return path


def write_bound_report(report: BoundReport, path: Union[str, Path]) -> Path:
    path = write_json(report.model_dump(mode="json"), path)
    logger.info(f"Saved bound report to {path}")
    return path


def write_sweep(rows: Sequence[SweepRow], path: Union[str, Path]) -> Path:
    table = [{"param": r.param, "value": float(r.value), "mean_acc": float(r.mean_accuracy),
              "std_acc": float(r.std_accuracy), "n_seeds": r.n_seeds} for r in rows]
    path = write_table(table, SWEEP_COLUMNS, path)
    logger.info(f"Saved sweep of {len(rows)} values to {path}")
    return path


def write_overtrain(entries: Sequence[OvertrainEntry], path: Union[str, Path]) -> Path:
    return write_json([e.model_dump(mode="json") for e in entries], path)


def write_table(rows: Sequence[Dict[str, object]], columns: Sequence[str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_float(v) if isinstance(v, float) else v for k, v in row.items()})
    return path
