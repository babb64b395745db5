"""Training loop, evaluation metrics, and naive reference baselines.

Training runs a fixed number of adaptive-moment parameter updates over
minibatches of windows and is bit-deterministic under a fixed seed. Metrics
are the root-mean-square error, mean absolute error, and the Frobenius
accuracy 1 - ||Y - Yhat||_F / ||Y||_F, reported on both the normalized and
the de-normalized scale. The baselines are deliberately naive references:
persistence, historical average, and a per-node linear autoregression.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import SpeedDataset, denormalize
from .errors import DataError, ParameterError, ShapeError, TrainingError
from .graph import RoadGraph
from .model import StginModel
from .numerics import Tensor


@dataclass
class TrainConfig:
    batch_size: int = 32
    heads: int = 4
    hidden_d: int = 32
    iterations: int = 500
    learning_rate: float = 1e-3
    seed: int = 0
    input_len: int = 24
    horizon: int = 12
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.batch_size, self.heads, self.hidden_d, self.iterations,
               self.input_len, self.horizon) < 1:
            raise ParameterError(f"all counts must be positive: {self}")
        if self.learning_rate < 0.0:
            raise ParameterError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.hidden_d % self.heads != 0:
            raise ParameterError(
                f"heads ({self.heads}) must divide hidden_d ({self.hidden_d})"
            )


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared elementwise differences, on the tape."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes disagree: {pred.shape} vs {target.shape}")
    diff = nm.sub(pred, target)
    return nm.mean_all(nm.mul(diff, diff))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def rmse(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"metric shapes disagree: {y.shape} vs {y_hat.shape}")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"metric shapes disagree: {y.shape} vs {y_hat.shape}")
    return float(np.mean(np.abs(y - y_hat)))


def accuracy(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"metric shapes disagree: {y.shape} vs {y_hat.shape}")
    norm = float(np.linalg.norm(y))
    if norm == 0.0:
        raise DataError("accuracy is undefined on a zero-norm ground truth")
    return 1.0 - float(np.linalg.norm(y - y_hat)) / norm


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _batch_order(n_windows: int, batch_size: int, iterations: int, rng) -> list:
    """Deterministic minibatch index lists: reshuffle each epoch, chunk in order."""
    batches = []
    while len(batches) < iterations:
        order = rng.permutation(n_windows)
        for lo in range(0, n_windows, batch_size):
            batches.append(order[lo:lo + batch_size])
            if len(batches) == iterations:
                break
    return batches


def train(model: StginModel, train_windows: list, graph: RoadGraph,
          cfg: TrainConfig, on_update=None) -> tuple:
    """Run exactly ``cfg.iterations`` adaptive-moment updates; returns (model, loss trace).

    Divergence (non-finite loss or gradients) raises before the offending
    update is applied, so the model keeps its last finite parameters.
    ``on_update(step, loss, model)``, when given, fires after each update.
    """
    if not train_windows:
        raise DataError("training needs a nonempty window list")
    rng = np.random.default_rng(cfg.seed)
    named = model.parameters()
    m_state = [np.zeros_like(t.data) for _, t in named]
    v_state = [np.zeros_like(t.data) for _, t in named]
    trace = []
    batches = _batch_order(len(train_windows), cfg.batch_size, cfg.iterations, rng)
    for step, batch in enumerate(batches, start=1):
        model.zero_grads()
        nm.clear_tape()
        total = None
        for idx in batch:
            window = train_windows[idx]
            forecast = model.forward(window.input, graph)
            loss = mse_loss(forecast.values, window.target)
            total = loss if total is None else nm.add(total, loss)
        batch_loss = nm.mul(total, 1.0 / len(batch))
        value = batch_loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"loss became non-finite at update {step}", trace)
        nm.backward(batch_loss)
        grads = []
        for _, t in named:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.isfinite(g).all():
                raise TrainingError(f"gradients became non-finite at update {step}", trace)
            grads.append(g)
        bc1 = 1.0 - cfg.beta1 ** step
        bc2 = 1.0 - cfg.beta2 ** step
        for (name, t), m, v, g in zip(named, m_state, v_state, grads):
            m[:] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[:] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
            t.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        trace.append(value)
        if on_update is not None:
            on_update(step, value, model)
    return model, trace


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def persistence_forecast(window) -> np.ndarray:
    """Repeat the last observed step across the horizon."""
    last = window.input.data[-1]
    return np.tile(last, (window.target.shape[0], 1))


def historical_average_forecast(window) -> np.ndarray:
    """Repeat the per-node mean of the input block across the horizon."""
    avg = window.input.data.mean(axis=0)
    return np.tile(avg, (window.target.shape[0], 1))


class LinearARBaseline:
    """Per-node least squares from the input window to every future step."""

    def __init__(self, ridge: float = 1e-6):
        self.ridge = ridge
        self.coef = None  # [N, E+1, F']

    def fit(self, train_windows: list) -> "LinearARBaseline":
        if not train_windows:
            raise DataError("linear autoregression needs training windows")
        inputs = np.stack([w.input.data for w in train_windows])    # [W, E, N]
        targets = np.stack([w.target.data for w in train_windows])  # [W, F', N]
        n_win, input_len, n_nodes = inputs.shape
        horizon = targets.shape[1]
        self.coef = np.zeros((n_nodes, input_len + 1, horizon))
        fell_back = 0
        for n in range(n_nodes):
            x = np.hstack([inputs[:, :, n], np.ones((n_win, 1))])
            y = targets[:, :, n]
            solution, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
            if rank < x.shape[1]:
                fell_back += 1
                gram = x.T @ x + self.ridge * np.eye(x.shape[1])
                solution = np.linalg.solve(gram, x.T @ y)
            self.coef[n] = solution
        if fell_back:
            warnings.warn(
                f"linear autoregression: singular system on {fell_back} node(s), "
                f"ridge fallback (lambda={self.ridge}) applied"
            )
        return self

    def forecast(self, window) -> np.ndarray:
        if self.coef is None:
            raise DataError("linear autoregression used before fitting")
        x = np.concatenate([window.input.data, np.ones((1, window.input.shape[1]))])
        horizon = window.target.shape[0]
        out = np.empty((horizon, self.coef.shape[0]))
        for n in range(self.coef.shape[0]):
            out[:, n] = x[:, n] @ self.coef[n]
        return out


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    dataset: str
    horizon_min: int
    method: str
    scale: str
    mae: float
    rmse: float
    accuracy: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("dataset,horizon_min,method,scale,mae,rmse,accuracy\n")
            for r in self.rows:
                fh.write(
                    f"{r.dataset},{r.horizon_min},{r.method},{r.scale},"
                    f"{repr(r.mae)},{repr(r.rmse)},{repr(r.accuracy)}\n"
                )

    def lines(self) -> list:
        return [
            f"{r.dataset} horizon={r.horizon_min}min method={r.method} scale={r.scale} "
            f"mae={r.mae:.6f} rmse={r.rmse:.6f} accuracy={r.accuracy:.6f}"
            for r in self.rows
        ]


def predict_windows(model, windows: list, graph: RoadGraph) -> np.ndarray:
    """Stacked forecasts [n_windows, horizon, nodes] without gradient recording."""
    outs = []
    with nm.no_grad():
        for w in windows:
            outs.append(model.forward(w.input, graph).values.data)
    return np.stack(outs)


def _metric_rows(dataset_name, method, truths, preds, horizons_min, ds, step_minutes):
    rows = []
    for minutes in horizons_min:
        steps = minutes // step_minutes
        y = truths[:, :steps, :]
        y_hat = preds[:, :steps, :]
        pairs = [("normalized", y, y_hat)]
        if ds is not None and ds.normalized:
            pairs.append(("raw", denormalize(y, ds), denormalize(y_hat, ds)))
        for scale, yy, hh in pairs:
            rows.append(
                EvalRow(
                    dataset=dataset_name,
                    horizon_min=minutes,
                    method=method,
                    scale=scale,
                    mae=mae(yy, hh),
                    rmse=rmse(yy, hh),
                    accuracy=accuracy(yy, hh),
                )
            )
    return rows


def resolve_horizons(horizon_steps: int, step_minutes: int, horizons_min) -> list:
    if horizons_min is None:
        horizons_min = [m for m in (15, 30, 45, 60) if m // step_minutes <= horizon_steps]
        if not horizons_min:
            horizons_min = [horizon_steps * step_minutes]
    for minutes in horizons_min:
        if minutes % step_minutes != 0 or minutes // step_minutes > horizon_steps:
            raise ParameterError(
                f"horizon {minutes}min is not reachable with {horizon_steps} forecast steps"
            )
    return list(horizons_min)


def evaluate(model, test_windows: list, graph: RoadGraph, ds: SpeedDataset | None = None,
             horizons_min=None, method: str = "stgin") -> EvalReport:
    """Forecast every test window and aggregate the three metrics per horizon."""
    if not test_windows:
        raise DataError("evaluation needs a nonempty window list")
    horizon_steps = test_windows[0].target.shape[0]
    step_minutes = ds.step_minutes if ds is not None else 5
    horizons_min = resolve_horizons(horizon_steps, step_minutes, horizons_min)
    preds = predict_windows(model, test_windows, graph)
    truths = np.stack([w.target.data for w in test_windows])
    name = ds.name if ds is not None else "dataset"
    return EvalReport(rows=_metric_rows(name, method, truths, preds, horizons_min, ds, step_minutes))


def baselines(test_windows: list, train_windows: list, ds: SpeedDataset | None = None,
              horizons_min=None) -> EvalReport:
    """Persistence, historical-average and linear-AR reference rows."""
    if not test_windows:
        raise DataError("baseline evaluation needs a nonempty window list")
    horizon_steps = test_windows[0].target.shape[0]
    step_minutes = ds.step_minutes if ds is not None else 5
    horizons_min = resolve_horizons(horizon_steps, step_minutes, horizons_min)
    truths = np.stack([w.target.data for w in test_windows])
    name = ds.name if ds is not None else "dataset"
    ar = LinearARBaseline().fit(train_windows)
    methods = [
        ("persistence", persistence_forecast),
        ("historical_average", historical_average_forecast),
        ("linear_ar", ar.forecast),
    ]
    report = EvalReport()
    for method, fn in methods:
        preds = np.stack([fn(w) for w in test_windows])
        report.rows += _metric_rows(name, method, truths, preds, horizons_min, ds, step_minutes)
    return report
