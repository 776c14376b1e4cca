"""Trajectory tables, log min-max normalization, and accuracy metrics.

Trajectories are stored as CSV: a header row of component identifiers, then
one row per time step.  Empty cells mean missing; finite values survive a
write/load round trip exactly because they are written with full-precision
decimal reprs.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParseError


@dataclass(frozen=True)
class TrajectoryTable:
    """States over time: (steps, components) values plus a missing mask.

    ``values`` holds NaN where ``missing`` is true and finite numbers
    everywhere else.
    """

    values: np.ndarray
    missing: np.ndarray
    component_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        missing = np.asarray(self.missing, dtype=bool)
        ids = tuple(str(c) for c in self.component_ids)
        if values.ndim != 2:
            raise ValueError(f"values must be (steps, components), got {values.shape}")
        if missing.shape != values.shape:
            raise ValueError(
                f"missing mask shape {missing.shape} does not match values {values.shape}"
            )
        if len(ids) != values.shape[1]:
            raise ValueError(
                f"{len(ids)} component ids for {values.shape[1]} components"
            )
        if not np.isfinite(values[~missing]).all():
            raise DataError("non-missing entries must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)
        object.__setattr__(self, "component_ids", ids)

    @property
    def step_count(self) -> int:
        return self.values.shape[0]

    @property
    def component_count(self) -> int:
        return self.values.shape[1]


def load_trajectory(path, format: str = "csv") -> TrajectoryTable:
    """Read a trajectory table; empty cells become missing entries."""
    if format != "csv":
        raise ConfigError(f"unknown trajectory format {format!r}; only 'csv' is supported")
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if not header or any(not c.strip() for c in header):
            raise ParseError(f"{path}: header must name every component")
        width = len(header)
        rows, mask_rows = [], []
        for row_number, cells in enumerate(reader, start=2):
            if len(cells) != width:
                raise ParseError(
                    f"{path}: row {row_number} has {len(cells)} cells, expected {width}"
                )
            row = np.empty(width)
            miss = np.zeros(width, dtype=bool)
            for j, cell in enumerate(cells):
                text = cell.strip()
                if text == "":
                    row[j] = np.nan
                    miss[j] = True
                    continue
                try:
                    value = float(text)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {row_number}, column {header[j]!r}: "
                        f"non-numeric cell {cell!r}"
                    ) from None
                if not np.isfinite(value):
                    raise ParseError(
                        f"{path}: row {row_number}, column {header[j]!r}: "
                        f"non-finite cell {cell!r}"
                    )
                row[j] = value
            rows.append(row)
            mask_rows.append(miss)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return TrajectoryTable(np.array(rows), np.array(mask_rows), tuple(header))


def write_table(path, table: TrajectoryTable) -> None:
    """Write a trajectory table as CSV; missing entries become empty cells."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(table.component_ids)
        for row, miss in zip(table.values, table.missing):
            writer.writerow(
                ["" if m or not np.isfinite(v) else repr(float(v)) for v, m in zip(row, miss)]
            )


@dataclass(frozen=True)
class NormalizationStats:
    """Log-scale bounds for the log min-max transform.

    Scalars for globally fitted stats, per-component arrays otherwise.
    """

    log_min: float | np.ndarray
    log_max: float | np.ndarray
    per_component: bool

    def __post_init__(self):
        log_min = np.asarray(self.log_min, dtype=float)
        log_max = np.asarray(self.log_max, dtype=float)
        if log_min.shape != log_max.shape:
            raise ValueError("log_min and log_max must have the same shape")
        if not (np.isfinite(log_min).all() and np.isfinite(log_max).all()):
            raise DataError("normalization bounds must be finite")
        if not (log_max > log_min).all():
            raise DataError("normalization range is degenerate: max must exceed min")
        object.__setattr__(self, "log_min", log_min)
        object.__setattr__(self, "log_max", log_max)


def log_minmax_fit(table: TrajectoryTable, per_component: bool = False) -> NormalizationStats:
    """Fit bounds of log(1 + x) over the non-missing entries.

    Raises DataError if any entry is negative, if a fitted group has no
    non-missing entries, or if its range is degenerate.
    """
    present = ~table.missing
    if (table.values[present] < 0.0).any():
        raise DataError("log min-max requires nonnegative values; found negative entries")
    logged = np.where(present, np.log1p(np.where(present, table.values, 0.0)), np.nan)
    if per_component:
        counts = present.sum(axis=0)
        if (counts == 0).any():
            empty = table.component_ids[int(np.argmax(counts == 0))]
            raise DataError(f"component {empty!r} has no non-missing entries to fit")
        lo = np.nanmin(logged, axis=0)
        hi = np.nanmax(logged, axis=0)
    else:
        if not present.any():
            raise DataError("no non-missing entries to fit")
        lo = float(np.nanmin(logged))
        hi = float(np.nanmax(logged))
    return NormalizationStats(lo, hi, per_component)


def log_minmax_apply(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Map x through log(1 + x) and rescale the fitted range onto [0, 1]."""
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise DataError("log min-max input contains non-finite entries")
    if (x < 0.0).any():
        raise DataError("log min-max input contains negative entries")
    return (np.log1p(x) - stats.log_min) / (stats.log_max - stats.log_min)


def log_minmax_invert(u: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Exact inverse of ``log_minmax_apply``."""
    u = np.asarray(u, dtype=float)
    if not np.isfinite(u).all():
        raise DataError("log min-max input contains non-finite entries")
    return np.expm1(u * (stats.log_max - stats.log_min) + stats.log_min)


def compute_metrics(
    estimate: np.ndarray,
    truth: np.ndarray,
    missing: np.ndarray | None = None,
    mape_floor: float = 1e-6,
) -> tuple[float, float, float]:
    """(MAE, MAPE, RMSE) over the non-missing components.

    MAPE is in percent and averages only components with |truth| above
    ``mape_floor``; it is NaN when no component qualifies.  RMSE >= MAE
    holds by the power-mean inequality.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape or estimate.ndim != 1:
        raise ValueError(
            f"estimate and truth must be equal-length vectors, got {estimate.shape} and {truth.shape}"
        )
    if missing is None:
        keep = np.ones(truth.shape[0], dtype=bool)
    else:
        keep = ~np.asarray(missing, dtype=bool)
        if keep.shape != truth.shape:
            raise ValueError("missing mask length does not match the state length")
    if not keep.any():
        raise ValueError("all components are missing; metrics are undefined")
    err = estimate[keep] - truth[keep]
    if not np.isfinite(err).all():
        raise DataError("metrics inputs contain non-finite entries")
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    scale_ok = np.abs(truth[keep]) > mape_floor
    if scale_ok.any():
        mape = float(100.0 * np.mean(np.abs(err[scale_ok] / truth[keep][scale_ok])))
    else:
        mape = float("nan")
    return mae, mape, rmse
