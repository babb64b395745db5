"""Spatial layer: per-node feature convolution, then multi-head graph attention.

The aggregator runs one shared 1-D convolution over each node's time series
(speed channel plus any external-factor channels). The attention layer scores
every neighbor pair through a learned vector, normalizes over each node's
neighborhood, and averages the heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ParameterError, ShapeError, ValidationError
from .graph import RoadGraph
from .numerics import Tensor


@dataclass
class FcaConfig:
    kernel_width: int = 3
    out_channels: int = 32

    def __post_init__(self):
        if self.kernel_width % 2 == 0 or self.kernel_width < 1:
            raise ParameterError(f"kernel_width must be odd and positive, got {self.kernel_width}")
        if self.out_channels < 1:
            raise ParameterError(f"out_channels must be >= 1, got {self.out_channels}")


class FcaParams:
    """Shared-across-nodes convolution kernels and bias."""

    def __init__(self, kernels: Tensor, bias: Tensor):
        self.kernels = kernels
        self.bias = bias

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, config: FcaConfig, in_channels: int = 1) -> "FcaParams":
        fan_in = in_channels * config.kernel_width
        bound = (1.0 / fan_in) ** 0.5
        kernels = rng.uniform(-bound, bound, size=(config.out_channels, in_channels, config.kernel_width))
        return cls(Tensor(kernels, requires_grad=True), Tensor(np.zeros(config.out_channels), requires_grad=True))

    def parameters(self):
        return [("fca.kernels", self.kernels), ("fca.bias", self.bias)]


class GatLayer:
    """One multi-head attention layer over the road graph.

    ``w`` is [heads, f_in, f_out] (each head applied as x @ w[c]) and
    ``att`` is [heads, 2 * f_out], split into the query-side and key-side
    halves of the scoring vector.
    """

    def __init__(self, w: Tensor, att: Tensor, leaky_slope: float = 0.2):
        if w.data.ndim != 3 or att.data.ndim != 2:
            raise ShapeError(f"expected w [C, F, F'] and att [C, 2F'], got {w.shape} and {att.shape}")
        if att.shape[0] != w.shape[0] or att.shape[1] != 2 * w.shape[2]:
            raise ShapeError(f"head shapes disagree: w {w.shape} vs att {att.shape}")
        self.w = w
        self.att = att
        self.leaky_slope = leaky_slope

    @property
    def heads(self) -> int:
        return self.w.shape[0]

    @property
    def f_in(self) -> int:
        return self.w.shape[1]

    @property
    def f_out(self) -> int:
        return self.w.shape[2]

    @classmethod
    def init(cls, rng: np.random.Generator, f_in: int, f_out: int, heads: int = 4,
             leaky_slope: float = 0.2) -> "GatLayer":
        if heads < 1 or f_out < 1:
            raise ParameterError(f"heads and f_out must be >= 1, got ({heads}, {f_out})")
        wb = (1.0 / f_in) ** 0.5
        ab = (1.0 / (2 * f_out)) ** 0.5
        w = rng.uniform(-wb, wb, size=(heads, f_in, f_out))
        att = rng.uniform(-ab, ab, size=(heads, 2 * f_out))
        return cls(Tensor(w, requires_grad=True), Tensor(att, requires_grad=True), leaky_slope)

    def parameters(self):
        return [("gat.w", self.w), ("gat.att", self.att)]


def fca_aggregate(speed_window: Tensor, params: FcaParams, externals: Tensor | None = None) -> Tensor:
    """Per-node time convolution over stacked [speed || externals] channels.

    ``speed_window`` is [E, N]; ``externals``, when given, is [E, N, k]
    aligned step for step. Returns [E, N, out_channels].
    """
    speed_window = speed_window if isinstance(speed_window, Tensor) else Tensor(speed_window)
    if speed_window.data.ndim != 2:
        raise ShapeError(f"speed window must be [E, N], got {speed_window.shape}")
    steps, n_nodes = speed_window.shape
    if externals is not None:
        externals = externals if isinstance(externals, Tensor) else Tensor(externals)
        if externals.data.ndim != 3 or externals.shape[:2] != (steps, n_nodes):
            raise ValidationError(
                f"externals must be [E, N, k] aligned with speeds {speed_window.shape}, got {externals.shape}"
            )
    expected_in = 1 + (externals.shape[2] if externals is not None else 0)
    if params.in_channels != expected_in:
        raise ShapeError(
            f"aggregator expects {params.in_channels} input channels, window provides {expected_in}"
        )
    # one batched convolution: series become [N, E, channels]
    series = nm.reshape(nm.transpose(speed_window), (n_nodes, steps, 1))
    if externals is not None:
        series = nm.concat([series, nm.permute(externals, (1, 0, 2))], axis=-1)
    features = nm.add(nm.conv1d_time(series, params.kernels), params.bias)
    return nm.permute(features, (1, 0, 2))  # back to [E, N, F]


def _head_scores(h: Tensor, layer: GatLayer, graph: RoadGraph) -> Tensor:
    """Neighborhood-masked attention weights [C, N, N] from projected features."""
    f_out = layer.f_out
    att_src = nm.reshape(layer.att[:, :f_out], (layer.heads, f_out, 1))
    att_dst = nm.reshape(layer.att[:, f_out:], (layer.heads, f_out, 1))
    f1 = nm.matmul(h, att_src)  # [C, N, 1] query-side contribution
    f2 = nm.matmul(h, att_dst)
    e = nm.leaky_relu(nm.add(f1, nm.transpose(f2)), layer.leaky_slope)
    return nm.softmax_rows(e, mask=graph.neighbor_mask[None, :, :])


def attention_coefficients(x: Tensor, layer: GatLayer, graph: RoadGraph) -> Tensor:
    """Per-head attention over each node's neighborhood; zeros elsewhere."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[0] != graph.n_nodes:
        raise ShapeError(f"features must be [{graph.n_nodes}, F], got {x.shape}")
    if x.shape[1] != layer.f_in:
        raise ShapeError(f"feature dim {x.shape[1]} does not match layer f_in {layer.f_in}")
    return _head_scores(nm.matmul(x, layer.w), layer, graph)


def gat_forward(x: Tensor, layer: GatLayer, graph: RoadGraph) -> Tensor:
    """Head-averaged neighborhood aggregation, ELU on the way out: [N, F']."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[0] != graph.n_nodes:
        raise ShapeError(f"features must be [{graph.n_nodes}, F], got {x.shape}")
    if x.shape[1] != layer.f_in:
        raise ShapeError(f"feature dim {x.shape[1]} does not match layer f_in {layer.f_in}")
    h = nm.matmul(x, layer.w)  # [C, N, F']
    alpha = _head_scores(h, layer, graph)
    mixed = nm.matmul(alpha, h)
    return nm.elu(nm.mean_axis0(mixed))


def gat_forward_sequence(x_seq: Tensor, layer: GatLayer, graph: RoadGraph) -> Tensor:
    """Apply the shared layer to every time step of [E, N, F] in one pass."""
    x_seq = x_seq if isinstance(x_seq, Tensor) else Tensor(x_seq)
    if x_seq.data.ndim != 3 or x_seq.shape[1] != graph.n_nodes or x_seq.shape[2] != layer.f_in:
        raise ShapeError(
            f"expected [E, {graph.n_nodes}, {layer.f_in}] features, got {x_seq.shape}"
        )
    steps = x_seq.shape[0]
    x4 = nm.reshape(x_seq, (steps, 1, graph.n_nodes, layer.f_in))
    h = nm.matmul(x4, layer.w)  # [E, C, N, F']
    f_out = layer.f_out
    att_src = nm.reshape(layer.att[:, :f_out], (layer.heads, f_out, 1))
    att_dst = nm.reshape(layer.att[:, f_out:], (layer.heads, f_out, 1))
    e = nm.leaky_relu(
        nm.add(nm.matmul(h, att_src), nm.transpose(nm.matmul(h, att_dst))), layer.leaky_slope
    )
    alpha = nm.softmax_rows(e, mask=graph.neighbor_mask)
    mixed = nm.matmul(alpha, h)  # [E, C, N, F']
    averaged = nm.mean_axis0(nm.permute(mixed, (1, 0, 2, 3)))  # heads out front, then mean
    return nm.elu(averaged)
