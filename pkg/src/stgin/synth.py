"""Synthetic road-speed data with a known generating process.

Nodes sit on a ring; each node's speed is a shared daily profile (two
sinusoid harmonics) plus a per-node offset, a regional disturbance that
propagates around the ring with a fixed per-hop delay, white observation
noise, and optional incident dips. The propagation delay makes upstream
neighbors genuinely informative about a node's near future, so spatial
models have something real to extract. Ground-truth parameters land in a
sidecar file next to the CSVs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError

STEPS_PER_DAY = 288  # 5-minute aggregation


@dataclass
class SynthConfig:
    n_nodes: int = 20
    days: int = 14
    seed: int = 0
    base_speed: float = 50.0
    daily_amplitude: float = 6.0
    half_day_amplitude: float = 2.0
    node_offset_scale: float = 3.0
    regional_std: float = 8.0
    regional_phi: float = 0.85
    noise_std: float = 0.6
    propagation_steps: int = 3  # delay between ring-adjacent nodes
    ring_spacing_m: float = 500.0
    incident_rate_per_day: float = 0.0
    incident_depth: float = 0.35
    incident_duration_steps: int = 12
    min_speed: float = 0.5

    def __post_init__(self):
        if self.n_nodes < 1 or self.days < 1:
            raise ParameterError(f"need at least one node and one day, got {self}")
        if not 0.0 <= self.incident_depth < 1.0:
            raise ParameterError(f"incident depth must be in [0, 1), got {self.incident_depth}")
        if not 0.0 <= self.regional_phi < 1.0:
            raise ParameterError(f"regional phi must be in [0, 1), got {self.regional_phi}")


def ring_distances(n_nodes: int, spacing_m: float) -> np.ndarray:
    idx = np.arange(n_nodes)
    hops = np.minimum((idx[None, :] - idx[:, None]) % n_nodes, (idx[:, None] - idx[None, :]) % n_nodes)
    return hops * spacing_m


def generate(cfg: SynthConfig) -> tuple:
    """Returns (speeds [T, N], distances [N, N], ground-truth dict)."""
    rng = np.random.default_rng(cfg.seed)
    total = cfg.days * STEPS_PER_DAY
    n = cfg.n_nodes
    t = np.arange(total)

    offsets = rng.uniform(-cfg.node_offset_scale, cfg.node_offset_scale, size=n)
    day_phase = 2.0 * math.pi * (t % STEPS_PER_DAY) / STEPS_PER_DAY  # bit-exact daily period
    profile = (
        cfg.base_speed
        + cfg.daily_amplitude * np.sin(day_phase - 0.5 * math.pi)
        + cfg.half_day_amplitude * np.sin(2.0 * day_phase + 0.9)
    )

    delays = np.arange(n) * cfg.propagation_steps
    max_delay = int(delays.max()) if n > 1 else 0
    if cfg.regional_std > 0.0:
        innov_std = cfg.regional_std * math.sqrt(1.0 - cfg.regional_phi ** 2)
        shocks = rng.normal(scale=innov_std, size=total + max_delay)
        z = np.empty(total + max_delay)
        z[0] = rng.normal(scale=cfg.regional_std)
        for i in range(1, z.size):
            z[i] = cfg.regional_phi * z[i - 1] + shocks[i]
    else:
        z = np.zeros(total + max_delay)

    speeds = np.empty((total, n))
    for node in range(n):
        regional = z[max_delay - delays[node] + t]
        speeds[:, node] = profile + offsets[node] + regional
    if cfg.noise_std > 0.0:
        speeds += rng.normal(scale=cfg.noise_std, size=speeds.shape)

    incidents = []
    if cfg.incident_rate_per_day > 0.0:
        for node in range(n):
            for _ in range(int(rng.poisson(cfg.incident_rate_per_day * cfg.days))):
                start = int(rng.integers(0, max(total - cfg.incident_duration_steps, 1)))
                length = cfg.incident_duration_steps
                ramp = 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(length) / length)
                speeds[start:start + length, node] *= 1.0 - cfg.incident_depth * ramp
                incidents.append({"node": node, "start": start, "duration": length})

    np.clip(speeds, cfg.min_speed, None, out=speeds)
    distances = ring_distances(n, cfg.ring_spacing_m)
    truth = {
        "config": asdict(cfg),
        "steps_per_day": STEPS_PER_DAY,
        "total_steps": total,
        "node_offsets": offsets.tolist(),
        "propagation_delays_steps": delays.tolist(),
        "incidents": incidents,
    }
    return speeds, distances, truth


def write_synth_files(cfg: SynthConfig, out_dir) -> dict:
    """Emit speeds.csv, distances.csv and truth.json; byte-stable per seed."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    speeds, distances, truth = generate(cfg)
    paths = {
        "speeds": out / "speeds.csv",
        "distances": out / "distances.csv",
        "truth": out / "truth.json",
    }
    with open(paths["speeds"], "w", encoding="utf-8") as fh:
        for row in speeds:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(paths["distances"], "w", encoding="utf-8") as fh:
        for row in distances:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True, indent=1)
    return paths
