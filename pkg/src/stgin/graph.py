"""Weighted road graph built from pairwise road distances.

Edge weights follow a Gaussian kernel of road length, zeroed beyond a
distance threshold; the graph keeps whatever asymmetry the distances carry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .numerics import Tensor


@dataclass
class RoadGraph:
    """Immutable weighted road graph.

    ``adjacency`` holds weights in [0, 1] with a unit diagonal; node ``b``
    belongs to ``neighborhoods[a]`` exactly when ``adjacency[a, b] > 0``,
    and every node neighbors itself.
    """

    n_nodes: int
    adjacency: Tensor
    neighborhoods: list = field(repr=False)
    sigma: float
    kappa: float

    @property
    def adj(self) -> np.ndarray:
        return self.adjacency.data

    @property
    def neighbor_mask(self) -> np.ndarray:
        """Boolean [N, N] mask, True where b may attend within a's row."""
        return self.adj > 0.0


def _neighborhoods_from(adj: np.ndarray) -> list:
    return [np.flatnonzero(adj[a] > 0.0) for a in range(adj.shape[0])]


def _check_square(mat: np.ndarray, what: str):
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(f"{what} must be square, got shape {mat.shape}")


def sigma_from_distances(distances) -> float:
    """Population standard deviation of the finite off-diagonal distances."""
    d = np.asarray(distances.data if isinstance(distances, Tensor) else distances, dtype=np.float64)
    _check_square(d, "distance matrix")
    off = d[~np.eye(d.shape[0], dtype=bool)]
    vals = off[np.isfinite(off)]
    if vals.size < 2:
        raise ValidationError("need at least two finite off-diagonal distances")
    return float(vals.std())


def kappa_from_percentile(distances, percentile: float = 5.0) -> float:
    """Distance threshold at the given percentile of finite off-diagonal lengths.

    Percentile 0 means "keep no positive-length edge": it returns a value
    strictly below the shortest positive distance, so only self-loops (and
    coincident nodes) survive the threshold.
    """
    d = np.asarray(distances.data if isinstance(distances, Tensor) else distances, dtype=np.float64)
    _check_square(d, "distance matrix")
    if not (0.0 <= percentile <= 100.0):
        raise ValidationError(f"percentile must be in [0, 100], got {percentile}")
    off = d[~np.eye(d.shape[0], dtype=bool)]
    vals = off[np.isfinite(off)]
    if vals.size == 0:
        raise ValidationError("no finite off-diagonal distances")
    if percentile == 0.0:
        positive = vals[vals > 0.0]
        if positive.size == 0:
            raise ValidationError("all off-diagonal distances are zero; no threshold below them")
        return float(positive.min()) / 2.0
    return float(np.percentile(vals, percentile))


def build_adjacency(distances, sigma: float, kappa: float) -> RoadGraph:
    """Gaussian-kernel weights exp(-len^2 / sigma^2) for len <= kappa, else 0."""
    d = np.asarray(distances.data if isinstance(distances, Tensor) else distances, dtype=np.float64)
    _check_square(d, "distance matrix")
    if np.isnan(d).any():
        raise ValidationError("distance matrix contains NaN")
    if (d[np.isfinite(d)] < 0.0).any():
        raise ValidationError("distances must be nonnegative")
    if np.diagonal(d).any():
        raise ValidationError("distance matrix diagonal must be zero")
    if not sigma > 0.0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    if not kappa > 0.0:
        raise ValidationError(f"kappa must be positive, got {kappa}")
    with np.errstate(over="ignore"):
        weights = np.exp(-(d * d) / (sigma * sigma))
    adj = np.where(d <= kappa, weights, 0.0)
    np.fill_diagonal(adj, 1.0)
    return RoadGraph(
        n_nodes=d.shape[0],
        adjacency=Tensor(adj),
        neighborhoods=_neighborhoods_from(adj),
        sigma=float(sigma),
        kappa=float(kappa),
    )


def read_matrix_csv(path) -> np.ndarray:
    """Square numeric CSV, no header; errors carry 1-based row/column."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for r, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            parsed = []
            for c, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise FormatError(f"{path}: non-numeric cell at row {r}, column {c}: {cell!r}") from None
            rows.append(parsed)
    if not rows:
        raise FormatError(f"{path}: empty file")
    width = len(rows[0])
    for r, row in enumerate(rows, start=1):
        if len(row) != width:
            raise FormatError(f"{path}: row {r} has {len(row)} columns, expected {width}")
    mat = np.asarray(rows, dtype=np.float64)
    if mat.shape[0] != mat.shape[1]:
        raise FormatError(f"{path}: matrix is {mat.shape[0]}x{mat.shape[1]}, expected square")
    return mat


def load_prebuilt_adjacency(path, sigma: float = 0.0, kappa: float = 0.0) -> RoadGraph:
    """Load an already-weighted adjacency CSV and validate its invariants."""
    adj = read_matrix_csv(path)
    bad = np.argwhere((adj < 0.0) | (adj > 1.0) | ~np.isfinite(adj))
    if bad.size:
        r, c = bad[0]
        raise FormatError(
            f"{path}: weight {adj[r, c]} out of [0, 1] at row {r + 1}, column {c + 1}"
        )
    diag = np.diagonal(adj)
    if not np.all(diag == 1.0):
        warnings.warn(f"{path}: coercing {int((diag != 1.0).sum())} diagonal entries to 1")
        adj = adj.copy()
        np.fill_diagonal(adj, 1.0)
    return RoadGraph(
        n_nodes=adj.shape[0],
        adjacency=Tensor(adj),
        neighborhoods=_neighborhoods_from(adj),
        sigma=float(sigma),
        kappa=float(kappa),
    )


def save_adjacency(graph: RoadGraph, path):
    """Write weights so that a reload reproduces them bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in graph.adj:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
