"""Synthetic multi-domain spatiotemporal data plus CSV ingestion and splits.

Every domain observes one shared latent system through its own affine lens
and mixes in a private process; the mixing weight controls how much the
domains have in common. The shared latent is a graph diffusion driven by a
daily sinusoid with per-node offsets, so related domains inherit both the
spatial mean profile and the daily rhythm. Private processes are driven by
white noise only, which makes fully private domains decorrelate.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import GraphSpec, WindowBatch

GRAPH_MODELS = ("ring", "stochastic-block", "random-geometric")

DIFFUSION = 0.6  # spectral radius bound for the latent recurrence
AFFINE_SCALE_RANGE = (0.5, 2.0)
AFFINE_SHIFT_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class SyntheticConfig:
    node_count: int = 8
    timesteps: int = 2000
    domain_count: int = 3
    rho: float = 0.9
    sigma: float = 0.1
    graph_model: str = "ring"
    seed: int = 0
    steps_per_day: int = 24
    t_in: int = 12
    t_out: int = 12
    # extra domains generated with rho = 0 (independent private process only);
    # handy for gate-rejection experiments
    unrelated_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.graph_model not in GRAPH_MODELS:
            raise ValueError(f"unknown graph model {self.graph_model!r}, pick one of {GRAPH_MODELS}")
        for name in ("node_count", "timesteps", "domain_count", "steps_per_day", "t_in", "t_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.unrelated_count < 0:
            raise ValueError("unrelated_count must be nonnegative")


@dataclass
class DomainGroup:
    group_id: str
    source: str
    series: np.ndarray  # (T, N)
    mask: np.ndarray  # (T, N) observation mask
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    provenance: dict = field(default_factory=dict)


def gen_graph(config: SyntheticConfig) -> GraphSpec:
    n = config.node_count
    adj = np.zeros((n, n))
    if config.graph_model == "ring":
        for i in range(n):
            j = (i + 1) % n
            if i != j:
                adj[i, j] = adj[j, i] = 1.0
    elif config.graph_model == "stochastic-block":
        rng = np.random.default_rng([config.seed, 101])
        block = np.arange(n) < (n + 1) // 2
        for i in range(n):
            for j in range(i + 1, n):
                p = 0.6 if block[i] == block[j] else 0.15
                if rng.random() < p:
                    adj[i, j] = adj[j, i] = 1.0
    else:  # random-geometric
        rng = np.random.default_rng([config.seed, 103])
        pts = rng.random((n, 2))
        radius = min(1.0, 1.5 * math.sqrt(1.0 / n))
        for i in range(n):
            for j in range(i + 1, n):
                if np.hypot(*(pts[i] - pts[j])) < radius:
                    adj[i, j] = adj[j, i] = 1.0
    return GraphSpec.from_adjacency(adj)


def _shared_latent(config: SyntheticConfig, graph: GraphSpec) -> np.ndarray:
    """Graph diffusion forced by daily and weekly sinusoids per node.

    The weekly harmonic moves the local level well beyond the cross-domain
    offset spread, so predictors have to read the level from the input
    window instead of memorizing one constant per domain.
    """
    rng = np.random.default_rng([config.seed, 3])
    n = config.node_count
    amp_day = rng.uniform(0.5, 1.5, size=n)
    phase_day = rng.uniform(0.0, 2.0 * np.pi, size=n)
    amp_week = rng.uniform(1.0, 3.0, size=n)
    phase_week = rng.uniform(0.0, 2.0 * np.pi, size=n)
    a_hat = graph.normalized_adjacency
    state = np.zeros(n)
    out = np.empty((config.timesteps, n))
    week = 7.0 * config.steps_per_day
    for t in range(config.timesteps):
        forcing = amp_day * np.sin(2.0 * np.pi * t / config.steps_per_day + phase_day)
        forcing = forcing + amp_week * np.sin(2.0 * np.pi * t / week + phase_week)
        state = DIFFUSION * (a_hat @ state) + forcing
        out[t] = state
    return out


def _private_process(config: SyntheticConfig, graph: GraphSpec, rng: np.random.Generator) -> np.ndarray:
    """Noise-driven diffusion with a per-domain constant node profile.

    White-noise dynamics keep fully private domains pairwise decorrelated;
    the constant profile gives each one a distinctive spatial mean.
    """
    level = rng.uniform(-2.0, 2.0, size=config.node_count)
    a_hat = graph.normalized_adjacency
    state = np.zeros(config.node_count)
    out = np.empty((config.timesteps, config.node_count))
    for t in range(config.timesteps):
        state = DIFFUSION * (a_hat @ state) + level + rng.standard_normal(config.node_count)
        out[t] = state
    return out


def gen_series(config: SyntheticConfig, graph: GraphSpec) -> list[tuple[str, np.ndarray]]:
    """Raw (group_id, series) pairs before any windowing."""
    shared = _shared_latent(config, graph)
    shared_scale = float(shared.std()) or 1.0
    out = []
    for c in range(config.domain_count + config.unrelated_count):
        unrelated = c >= config.domain_count
        rho = 0.0 if unrelated else config.rho
        rng = np.random.default_rng([config.seed, 7, c])
        private = _private_process(config, graph, rng)
        private *= shared_scale / (float(private.std()) or 1.0)
        scale = rng.uniform(*AFFINE_SCALE_RANGE)
        shift = rng.uniform(*AFFINE_SHIFT_RANGE)
        series = scale * (rho * shared + (1.0 - rho) * private) + shift
        if config.sigma > 0:
            series = series + config.sigma * rng.standard_normal(series.shape)
        gid = f"u{c - config.domain_count}" if unrelated else f"d{c}"
        out.append((gid, series))
    return out


def gen_domains(config: SyntheticConfig, graph: GraphSpec) -> list[DomainGroup]:
    groups = []
    for gid, series in gen_series(config, graph):
        train, val, test = window_and_split(series, config.t_in, config.t_out)
        groups.append(
            DomainGroup(
                group_id=gid,
                source="synthetic",
                series=series,
                mask=np.ones_like(series),
                train=train,
                val=val,
                test=test,
                provenance={"seed": config.seed, "rho": config.rho if gid.startswith("d") else 0.0},
            )
        )
    return groups


def _build_windows(series, mask, t_in, t_out, starts):
    t_idx = np.asarray(starts)[:, None] + np.arange(t_in)[None, :]
    y_idx = np.asarray(starts)[:, None] + t_in + np.arange(t_out)[None, :]
    inputs = np.nan_to_num(series)[t_idx][..., None]
    targets = np.nan_to_num(series)[y_idx]
    target_mask = mask[y_idx]
    return WindowBatch(inputs, targets, target_mask)


def all_windows(series, t_in: int, t_out: int, mask=None) -> WindowBatch:
    """Every sliding window as one batch, no splitting."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError(f"series must be (timesteps, nodes), got shape {series.shape}")
    t = series.shape[0]
    if t < t_in + t_out:
        raise ValueError(f"series too short: {t} steps < t_in + t_out = {t_in + t_out}")
    if mask is None:
        mask = np.ones_like(series)
    starts = np.arange(t - t_in - t_out + 1)
    target_sums = np.array([mask[s + t_in : s + t_in + t_out].sum() for s in starts])
    starts = starts[target_sums > 0]
    if len(starts) == 0:
        raise ValueError("no window has an observed target entry")
    return _build_windows(series, mask, t_in, t_out, starts)


def window_and_split(series, t_in: int, t_out: int, ratios=(0.7, 0.1, 0.2), mask=None):
    """Sliding windows (stride 1) split chronologically by start index.

    Train/val counts are rounded half-up from the ratios, the remainder
    goes to test. Windows whose target is fully missing are dropped.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError(f"series must be (timesteps, nodes), got shape {series.shape}")
    t = series.shape[0]
    if t < t_in + t_out:
        raise ValueError(f"series too short: {t} steps < t_in + t_out = {t_in + t_out}")
    if mask is None:
        mask = np.ones_like(series)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != series.shape:
            raise ValueError("mask must match series shape")
    starts = np.arange(t - t_in - t_out + 1)
    target_sums = np.array([mask[s + t_in : s + t_in + t_out].sum() for s in starts])
    starts = starts[target_sums > 0]
    w = len(starts)
    if w == 0:
        raise ValueError("no window has an observed target entry")
    n_train = min(max(int(math.floor(ratios[0] * w + 0.5)), 1), w)
    n_val = min(int(math.floor(ratios[1] * w + 0.5)), w - n_train)
    parts = (starts[:n_train], starts[n_train : n_train + n_val], starts[n_train + n_val :])
    return tuple(_build_windows(series, mask, t_in, t_out, p) if len(p) else _empty_batch(t_in, t_out, series.shape[1]) for p in parts)


def _empty_batch(t_in, t_out, n):
    return WindowBatch(
        np.zeros((0, t_in, n, 1)), np.zeros((0, t_out, n)), np.zeros((0, t_out, n))
    )


def temporal_domain_split(series, steps_per_day: int, periods_per_day: int = 4, holdout_period: int = -1):
    """Partition each day into equal periods; hold one period out.

    Returns (training series, holdout series), each concatenated over days.
    """
    series = np.asarray(series, dtype=np.float64)
    if periods_per_day < 2:
        raise ValueError("periods_per_day must be >= 2 so one period can be held out")
    if steps_per_day % periods_per_day != 0:
        raise ValueError(f"steps_per_day={steps_per_day} not divisible by periods_per_day={periods_per_day}")
    t = series.shape[0]
    days = t // steps_per_day
    if days == 0:
        raise ValueError("series shorter than one day")
    hold = holdout_period % periods_per_day
    period_len = steps_per_day // periods_per_day
    used = series[: days * steps_per_day].reshape(days, periods_per_day, period_len, -1)
    keep = [p for p in range(periods_per_day) if p != hold]
    train = used[:, keep].reshape(days * (periods_per_day - 1) * period_len, -1)
    holdout = used[:, hold].reshape(days * period_len, -1)
    return train, holdout


@dataclass(frozen=True)
class CsvSchema:
    layout: str = "long"  # "long": timestamp,node_id,value ; "wide": timestamp,<node>...
    t_in: int = 12
    t_out: int = 12
    group_id: str | None = None

    def __post_init__(self):
        if self.layout not in ("long", "wide"):
            raise ValueError(f"unknown csv layout {self.layout!r}")


def _parse_float(text, line_no, what):
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"line {line_no}: malformed {what} {text!r}") from None


def _read_long(rows):
    timestamps: list[float] = []
    ts_index: dict[float, int] = {}
    node_index: dict[str, int] = {}
    cells: dict[tuple[int, int], float | None] = {}
    for line_no, row in rows:
        if len(row) != 3:
            raise ValueError(f"line {line_no}: expected 3 columns, got {len(row)}")
        ts = _parse_float(row[0], line_no, "timestamp")
        node = row[1]
        if not timestamps or ts > timestamps[-1]:
            ts_index[ts] = len(timestamps)
            timestamps.append(ts)
        elif ts != timestamps[-1]:
            raise ValueError(f"line {line_no}: timestamps must arrive in increasing blocks, got {ts}")
        if node not in node_index:
            node_index[node] = len(node_index)
        key = (ts_index[ts], node_index[node])
        if key in cells:
            raise ValueError(f"line {line_no}: duplicate entry for timestamp {ts}, node {node!r}")
        cells[key] = None if row[2].strip() == "" else _parse_float(row[2], line_no, "value")
    series = np.full((len(timestamps), len(node_index)), np.nan)
    for (i, j), value in cells.items():
        if value is not None:
            series[i, j] = value
    return np.array(timestamps), list(node_index), series


def _read_wide(header, rows):
    nodes = header[1:]
    timestamps: list[float] = []
    values: list[list[float]] = []
    for line_no, row in rows:
        if len(row) != len(header):
            raise ValueError(f"line {line_no}: expected {len(header)} columns, got {len(row)}")
        ts = _parse_float(row[0], line_no, "timestamp")
        if timestamps and ts <= timestamps[-1]:
            raise ValueError(f"line {line_no}: timestamps must be strictly increasing, got {ts}")
        timestamps.append(ts)
        values.append([np.nan if c.strip() == "" else _parse_float(c, line_no, "value") for c in row[1:]])
    return np.array(timestamps), nodes, np.array(values, dtype=np.float64)


def load_csv(path, schema: CsvSchema = CsvSchema()) -> DomainGroup:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty csv file") from None
        rows = [(i, row) for i, row in enumerate(reader, start=2) if row]
    if schema.layout == "long":
        expected = ["timestamp", "node_id", "value"]
        if [h.strip() for h in header] != expected:
            raise ValueError(f"long layout needs header {expected}, got {header}")
        _, nodes, series = _read_long(rows)
    else:
        if header[0].strip() != "timestamp":
            raise ValueError("wide layout needs a leading 'timestamp' column")
        _, nodes, series = _read_wide(header, rows)
    mask = np.isfinite(series).astype(np.float64)
    train, val, test = window_and_split(series, schema.t_in, schema.t_out, mask=mask)
    gid = schema.group_id or str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return DomainGroup(
        group_id=gid,
        source=str(path),
        series=series,
        mask=mask,
        train=train,
        val=val,
        test=test,
        provenance={"path": str(path), "layout": schema.layout, "nodes": nodes},
    )


def export_csv(series, path, layout: str = "long", mask=None):
    """Write a series back out in the ingestion schema (timestamps 0..T-1)."""
    series = np.asarray(series, dtype=np.float64)
    t, n = series.shape
    observed = np.ones_like(series) if mask is None else np.asarray(mask)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if layout == "long":
            writer.writerow(["timestamp", "node_id", "value"])
            for i in range(t):
                for j in range(n):
                    value = repr(series[i, j]) if observed[i, j] else ""
                    writer.writerow([i, f"n{j}", value])
        elif layout == "wide":
            writer.writerow(["timestamp"] + [f"n{j}" for j in range(n)])
            for i in range(t):
                row = [i] + [repr(series[i, j]) if observed[i, j] else "" for j in range(n)]
                writer.writerow(row)
        else:
            raise ValueError(f"unknown csv layout {layout!r}")
