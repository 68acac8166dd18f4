"""Run diagnostics and CSV/JSON persistence.

The per-epoch CSV schema is fixed:

    epoch,mse,l1,kl,di_mean,runtime_s,effective_rank,op_fro_1..op_fro_M

Floats are written with ``repr`` (shortest round-trip form, always a decimal
point), so emission is locale-independent and byte-stable across platforms.
Optional fields (kl for exact inference, effective_rank when not tracked,
runtime when timing is disabled) are written as empty cells and parsed back
as ``None``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .operators import OperatorDictionary, transport


@dataclass
class MetricsRecord:
    epoch: int
    mse: float
    l1: float
    kl: float | None
    di_mean: float
    runtime_s: float | None
    effective_rank: float | None = None
    op_fro: list[float] = field(default_factory=list)


def effective_rank(features: np.ndarray) -> float:
    """Exponential of the entropy of the normalized singular spectrum.

    The feature matrix is mean-centered first; the result is invariant to
    global scaling and bounded by min(rows - 1, cols).

    Raises:
        ValueError: fewer than 2 rows, or an (effectively) all-zero matrix.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need a 2-d matrix with >= 2 rows, got shape {X.shape}")
    Xc = X - X.mean(axis=0)
    s = np.linalg.svd(Xc, compute_uv=False)
    total = s.sum()
    if total == 0.0:
        raise ValueError("effective rank undefined for a centered all-zero matrix")
    p = s / total
    p = p[p > 0.0]
    return float(np.exp(-np.sum(p * np.log(p))))


def operator_paths(
    opdict: OperatorDictionary,
    start: np.ndarray,
    operator_index: int,
    grid: np.ndarray,
) -> np.ndarray:
    """Points obtained by applying one generator at each grid coefficient.

    Row i is transport(dict, grid[i] * e_m, start).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("coefficient grid must be non-empty")
    if not (0 <= operator_index < opdict.m):
        raise ValueError(f"operator index {operator_index} out of range [0, {opdict.m})")
    C = np.zeros((grid.size, opdict.m))
    C[:, operator_index] = grid.reshape(-1)
    start = np.broadcast_to(np.asarray(start, dtype=np.float64), (grid.size, opdict.dim))
    return transport(opdict, C, start)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_header(n_operators: int) -> list[str]:
    return ["epoch", "mse", "l1", "kl", "di_mean", "runtime_s", "effective_rank"] + [
        f"op_fro_{i + 1}" for i in range(n_operators)
    ]


def emit(
    records: list[MetricsRecord],
    csv_path: str | Path,
    json_path: str | Path | None = None,
    *,
    config: dict | None = None,
    seed: int | None = None,
    wall_clock_s: float | None = None,
) -> None:
    """Write the per-epoch CSV and, optionally, a JSON run summary.

    The summary echoes the exact config, the seed, the final record, and the
    total wall clock. An empty record list produces a header-only CSV.
    """
    n_ops = len(records[0].op_fro) if records else 0
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(n_ops))
        for r in records:
            row = [
                str(r.epoch),
                _cell(r.mse),
                _cell(r.l1),
                _cell(r.kl),
                _cell(r.di_mean),
                _cell(r.runtime_s),
                _cell(r.effective_rank),
            ] + [_cell(v) for v in r.op_fro]
            writer.writerow(row)
    if json_path is not None:
        final = None
        if records:
            r = records[-1]
            final = {
                "epoch": r.epoch,
                "mse": r.mse,
                "l1": r.l1,
                "kl": r.kl,
                "di_mean": r.di_mean,
                "runtime_s": r.runtime_s,
                "effective_rank": r.effective_rank,
                "op_fro": r.op_fro,
            }
        summary = {
            "config": config,
            "seed": seed,
            "final": final,
            "wall_clock_s": wall_clock_s,
        }
        Path(json_path).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")


def parse_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    """Inverse of ``emit`` for the CSV part."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_ops = len(header) - 7
        out = []
        for row in reader:
            out.append(
                MetricsRecord(
                    epoch=int(row[0]),
                    mse=float(row[1]),
                    l1=float(row[2]),
                    kl=float(row[3]) if row[3] else None,
                    di_mean=float(row[4]),
                    runtime_s=float(row[5]) if row[5] else None,
                    effective_rank=float(row[6]) if row[6] else None,
                    op_fro=[float(v) for v in row[7 : 7 + n_ops]],
                )
            )
    return out


def export_paths_csv(paths: dict[int, np.ndarray], grid: np.ndarray, path: str | Path) -> None:
    """Operator extrapolation paths: one row per (operator, coefficient)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        dim = next(iter(paths.values())).shape[1]
        writer.writerow(["operator", "coefficient"] + [f"x{i}" for i in range(dim)])
        for op_index in sorted(paths):
            pts = paths[op_index]
            for c_val, pt in zip(grid, pts):
                writer.writerow([str(op_index), repr(float(c_val))] + [repr(float(v)) for v in pt])
