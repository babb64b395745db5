"""Full forecasting model: aggregator -> per-step graph attention -> per-node
temporal units -> scalar projection, assembled into a [horizon, nodes] block.

One temporal unit is shared across all node sequences by default, with a
learned per-node additive embedding so sequences stay distinguishable;
``share_informer=False`` switches to fully independent per-node units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import gat as gt
from . import informer as inf
from . import numerics as nm
from .errors import CheckpointError, ContractError, ParameterError
from .graph import RoadGraph
from .informer import TopUPlan
from .numerics import Tensor


@dataclass
class ModelDims:
    """Every size the model needs; validated on construction."""

    n_nodes: int
    input_len: int
    horizon: int
    fca_channels: int = 32
    fca_kernel: int = 3
    embed: int = 32
    gat_heads: int = 4
    informer_heads: int = 4
    enc_layers: int = 3
    replicas: int = 1
    ffn_mult: int = 4
    c_factor: float = 5.0
    l_token: int = 0  # 0 means input_len // 2, floored at 1
    leaky_slope: float = 0.2
    n_externals: int = 0
    step_minutes: int = 5
    share_informer: bool = True
    gat_enabled: bool = True

    def __post_init__(self):
        if min(self.n_nodes, self.input_len, self.horizon, self.fca_channels, self.embed) < 1:
            raise ParameterError(f"all core dims must be positive: {self}")
        if self.embed % self.informer_heads != 0:
            raise ParameterError(
                f"informer heads ({self.informer_heads}) must divide embed ({self.embed})"
            )
        div = 2 ** (self.enc_layers - 1)
        if self.input_len % div != 0:
            raise ParameterError(
                f"input_len ({self.input_len}) must be divisible by {div} for {self.enc_layers} encoder layers"
            )
        if not self.gat_enabled and self.fca_channels != self.embed:
            raise ParameterError(
                "with the graph layer bypassed the aggregator must emit embed-sized features "
                f"(fca_channels={self.fca_channels}, embed={self.embed})"
            )
        if self.l_token == 0:
            self.l_token = max(self.input_len // 2, 1)
        if not 1 <= self.l_token <= self.input_len:
            raise ParameterError(f"l_token ({self.l_token}) must lie in [1, {self.input_len}]")


@dataclass
class Forecast:
    """Normalized-scale predictions, [horizon, nodes]."""

    values: Tensor
    horizon_minutes: int


class StginModel:
    def __init__(self, dims: ModelDims, seed: int, fca, gat, node_emb, units, out_w, out_b):
        self.dims = dims
        self.seed = seed
        self.fca = fca
        self.gat = gat
        self.node_emb = node_emb
        self.units = units
        self.out_w = out_w
        self.out_b = out_b

    def unit_for(self, node: int) -> inf.InformerUnit:
        return self.units[0] if self.dims.share_informer else self.units[node]

    def parameters(self):
        out = [("fca." + n.split(".", 1)[1], t) for n, t in self.fca.parameters()]
        if self.gat is not None:
            out += self.gat.parameters()
        out.append(("node_emb", self.node_emb))
        for i, unit in enumerate(self.units):
            prefix = "unit." if self.dims.share_informer else f"unit{i}."
            out += [(prefix + n, t) for n, t in unit.parameters()]
        out += [("out.w", self.out_w), ("out.b", self.out_b)]
        return out

    def zero_grads(self):
        for _, p in self.parameters():
            p.zero_grad()

    def forward(self, window, graph: RoadGraph, externals=None,
                plan: TopUPlan | None = None) -> Forecast:
        """[input_len, nodes] speed window -> Forecast of [horizon, nodes]."""
        window = window if isinstance(window, Tensor) else Tensor(window)
        d = self.dims
        if window.shape != (d.input_len, d.n_nodes):
            raise ContractError(
                f"input stage: window shape {window.shape} does not match "
                f"(input_len={d.input_len}, nodes={d.n_nodes})"
            )
        if graph.n_nodes != d.n_nodes:
            raise ContractError(
                f"graph stage: graph has {graph.n_nodes} nodes, model expects {d.n_nodes}"
            )
        feats = gt.fca_aggregate(window, self.fca, externals)  # [E, N, F]
        if self.gat is not None:
            feats = gt.gat_forward_sequence(feats, self.gat, graph)  # [E, N, d]
        per_node = nm.permute(feats, (1, 0, 2))  # [N, E, d]
        sequences = nm.add(per_node, nm.reshape(self.node_emb, (d.n_nodes, 1, d.embed)))
        if d.share_informer:
            decoded = self.units[0].forward(sequences, plan)  # [N, F', d]
            projected = nm.linear(decoded, self.out_w, self.out_b)  # [N, F', 1]
            values = nm.transpose(nm.reshape(projected, (d.n_nodes, d.horizon)))
        else:
            columns = []
            for n in range(d.n_nodes):
                decoded = self.units[n].forward(sequences[n], plan)  # [F', d]
                columns.append(nm.linear(decoded, self.out_w, self.out_b))
            values = nm.concat(columns, axis=1)  # [F', N]
        return Forecast(values=values, horizon_minutes=d.horizon * d.step_minutes)


def init_params(dims: ModelDims, seed: int) -> StginModel:
    """Deterministic construction: same seed, bit-identical parameters."""
    rng = np.random.default_rng(seed)
    fca = gt.FcaParams.init(
        rng, gt.FcaConfig(dims.fca_kernel, dims.fca_channels), in_channels=1 + dims.n_externals
    )
    gat = None
    if dims.gat_enabled:
        gat = gt.GatLayer.init(rng, dims.fca_channels, dims.embed, dims.gat_heads, dims.leaky_slope)
    emb_bound = (1.0 / dims.embed) ** 0.5
    node_emb = Tensor(
        rng.uniform(-emb_bound, emb_bound, size=(dims.n_nodes, dims.embed)), requires_grad=True
    )
    n_units = 1 if dims.share_informer else dims.n_nodes
    units = [
        inf.InformerUnit.init(
            rng,
            d_in=dims.embed,
            d=dims.embed,
            heads=dims.informer_heads,
            input_len=dims.input_len,
            horizon=dims.horizon,
            l_token=dims.l_token,
            n_layers=dims.enc_layers,
            n_replicas=dims.replicas,
            ffn_mult=dims.ffn_mult,
            c_factor=dims.c_factor,
        )
        for _ in range(n_units)
    ]
    out_bound = (1.0 / dims.embed) ** 0.5
    out_w = Tensor(rng.uniform(-out_bound, out_bound, size=(dims.embed, 1)), requires_grad=True)
    out_b = Tensor(np.zeros(1), requires_grad=True)
    return StginModel(dims, seed, fca, gat, node_emb, units, out_w, out_b)


# ---------------------------------------------------------------------------
# checkpoints: versioned JSON, byte-stable across runs
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "stgin-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: StginModel, path):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "dims": asdict(model.dims),
        "params": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for name, t in model.parameters()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path, expect_dims: ModelDims | None = None) -> StginModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    dims = ModelDims(**payload["dims"])
    if expect_dims is not None and asdict(dims) != asdict(expect_dims):
        raise CheckpointError(
            f"{path}: checkpoint dims {asdict(dims)} do not match requested {asdict(expect_dims)}"
        )
    model = init_params(dims, int(payload["seed"]))
    stored = payload["params"]
    for name, tensor in model.parameters():
        if name not in stored:
            raise CheckpointError(f"{path}: missing parameter {name}")
        entry = stored[name]
        if tuple(entry["shape"]) != tensor.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {entry['shape']}, expected {tensor.shape}"
            )
        tensor.data = np.asarray(entry["data"], dtype=np.float64).reshape(tensor.shape)
    extra = set(stored) - {name for name, _ in model.parameters()}
    if extra:
        raise CheckpointError(f"{path}: unknown parameters {sorted(extra)}")
    return model
