"""Speed-matrix ingestion, cleaning, normalization and window generation.

Loading keeps missing markers (empty cells, NaN, negative readings) intact;
``interpolate_missing`` turns them into per-column linear fills, and the
downstream steps refuse matrices that still carry markers. Normalization is
min-max with statistics taken from the training prefix only, so the test
span never leaks into the transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .numerics import Tensor


@dataclass
class SpeedDataset:
    """[T, N] speed matrix plus normalization state."""

    matrix: Tensor
    name: str = "dataset"
    step_minutes: int = 5
    norm_min: float | None = None
    norm_max: float | None = None

    @property
    def n_steps(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[1]

    @property
    def normalized(self) -> bool:
        return self.norm_min is not None


@dataclass
class SampleWindow:
    """One training instance: contiguous input block and the block after it."""

    input: Tensor
    target: Tensor
    t_start: int


def _looks_numeric(cell: str) -> bool:
    cell = cell.strip()
    if cell == "":
        return True  # empty cell = missing marker
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_speed_csv(path, name: str | None = None) -> SpeedDataset:
    """Rows = time steps ascending, columns = nodes; one optional header row.

    Empty cells parse as NaN and survive as missing markers; ragged rows and
    non-numeric cells raise with their location.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for r, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.strip() == "":
                continue
            cells = line.split(",")
            if r == 1 and not all(_looks_numeric(c) for c in cells):
                continue  # header row; column order defines node order
            parsed = []
            for c, cell in enumerate(cells, start=1):
                cell = cell.strip()
                if cell == "":
                    parsed.append(math.nan)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise FormatError(
                        f"{path}: non-numeric cell at row {r}, column {c}: {cell!r}"
                    ) from None
            rows.append((r, parsed))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(rows[0][1])
    for r, parsed in rows:
        if len(parsed) != width:
            raise FormatError(f"{path}: row {r} has {len(parsed)} columns, expected {width}")
    matrix = np.asarray([p for _, p in rows], dtype=np.float64)
    if name is None:
        name = str(path)
    return SpeedDataset(matrix=Tensor(matrix), name=name)


def _missing_mask(matrix: np.ndarray) -> np.ndarray:
    return ~np.isfinite(matrix) | (matrix < 0.0)


def _require_clean(ds: SpeedDataset, op: str):
    if _missing_mask(ds.matrix.data).any():
        raise DataError(f"{op} requires a cleaned dataset; run missing-value interpolation first")


def interpolate_missing(ds: SpeedDataset) -> SpeedDataset:
    """Per-column linear interpolation; edges hold the nearest valid value."""
    matrix = ds.matrix.data.copy()
    missing = _missing_mask(matrix)
    idx = np.arange(matrix.shape[0])
    for col in range(matrix.shape[1]):
        bad = missing[:, col]
        if not bad.any():
            continue
        good = ~bad
        if not good.any():
            raise DataError(f"column {col} has no valid entries to interpolate from")
        matrix[bad, col] = np.interp(idx[bad], idx[good], matrix[good, col])
    return replace(ds, matrix=Tensor(matrix))


def normalize(ds: SpeedDataset, train_fraction: float = 0.8) -> SpeedDataset:
    """Min-max to [0, 1] with statistics from the leading training rows only."""
    _require_clean(ds, "normalization")
    if ds.normalized:
        raise DataError(f"dataset {ds.name} is already normalized")
    if not 0.0 < train_fraction <= 1.0:
        raise ParameterError(f"train_fraction must be in (0, 1], got {train_fraction}")
    boundary = max(int(math.floor(train_fraction * ds.n_steps)), 1)
    train_block = ds.matrix.data[:boundary]
    lo, hi = float(train_block.min()), float(train_block.max())
    if hi <= lo:
        raise DataError(f"dataset {ds.name}: training block has zero value range [{lo}, {hi}]")
    scaled = (ds.matrix.data - lo) / (hi - lo)
    return replace(ds, matrix=Tensor(scaled), norm_min=lo, norm_max=hi)


def denormalize(values: np.ndarray, ds: SpeedDataset) -> np.ndarray:
    if not ds.normalized:
        raise DataError(f"dataset {ds.name} carries no normalization statistics")
    return np.asarray(values, dtype=np.float64) * (ds.norm_max - ds.norm_min) + ds.norm_min


def sliding_windows(ds: SpeedDataset, input_len: int, horizon: int) -> list:
    """Stride-1 windows; count = T - (input_len + horizon) + 1."""
    _require_clean(ds, "window generation")
    if input_len < 1 or horizon < 1:
        raise ParameterError(f"input_len and horizon must be >= 1, got ({input_len}, {horizon})")
    total = input_len + horizon
    if total > ds.n_steps:
        raise ParameterError(
            f"window of {total} steps exceeds the {ds.n_steps}-step series"
        )
    matrix = ds.matrix.data
    windows = []
    for t in range(ds.n_steps - total + 1):
        windows.append(
            SampleWindow(
                input=Tensor(matrix[t:t + input_len]),
                target=Tensor(matrix[t + input_len:t + total]),
                t_start=t,
            )
        )
    return windows


def split_chronological(windows: list, ratio: float = 0.8) -> tuple:
    """Time-ordered split; windows straddling the boundary are dropped.

    Train windows end at or before the boundary row and test windows start
    at or after it, so no train target index can meet a test input index.
    """
    if not windows:
        raise DataError("cannot split an empty window list")
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be strictly inside (0, 1), got {ratio}")
    input_len = windows[0].input.shape[0]
    horizon = windows[0].target.shape[0]
    total_steps = max(w.t_start for w in windows) + input_len + horizon
    boundary = int(math.floor(ratio * total_steps))
    train = [w for w in windows if w.t_start + input_len + horizon <= boundary]
    test = [w for w in windows if w.t_start >= boundary]
    if not train or not test:
        raise DataError(
            f"split at row {boundary} leaves {len(train)} train / {len(test)} test windows"
        )
    return train, test


def steps_for_horizon(minutes: int, step_minutes: int = 5) -> int:
    """15/30/45/60 min map to 3/6/9/12 steps at 5-minute aggregation."""
    if minutes <= 0 or minutes % step_minutes != 0:
        raise ParameterError(
            f"horizon of {minutes} min is not a positive multiple of {step_minutes}-min steps"
        )
    return minutes // step_minutes
