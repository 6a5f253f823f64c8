"""Experiment configuration, metrics, and the runnable pipelines.

Runners are pure functions of (config, seed) up to the wall-clock metadata
tucked under the report's "meta" key. Each pipeline stage is phase-tagged
so CLI failures say which part of the system gave up.
"""
from __future__ import annotations

import contextlib
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import coupler, datagen
from .backbone import (
    ArchitectureConfig,
    ConvergenceConfig,
    GraphSpec,
    ModelParams,
    OptimizerConfig,
    WindowBatch,
    forward,
    init_params,
    save_params,
    train_to_convergence,
)
from .container import save_container
from .coupler import EvolveConfig, EvolutionState, write_evolution_log
from .curriculum import ProbeConfig, reorder
from .datagen import CsvSchema, DomainGroup, SyntheticConfig, gen_graph, gen_series, load_csv
from .info_audit import EntropyReport, HistogramEstimator, build_entropy_report

VARIANTS = ("full", "REO", "Ela", "PE", "H2E", "IL", "DER")

P0_GRID = (0.1, 0.3, 0.5, 0.7, 1.0)
LAMBDA0_GRID = (0.01, 0.03, 0.05, 0.07, 0.1)
KAPPA_GRID = (1e3, 1e4, 1e5, 1e6)


class PipelineError(RuntimeError):
    """Failure tagged with the pipeline phase it came from."""

    def __init__(self, phase: str, message: str):
        super().__init__(message)
        self.phase = phase


@contextlib.contextmanager
def _phase(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as err:
        raise PipelineError(name, str(err)) from err


@dataclass
class Metrics:
    mae: float
    rmse: float
    mape: float | None

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape}


def metrics(pred, target, mask) -> Metrics:
    """Masked MAE / RMSE / MAPE; MAPE skips zero targets and is None if none remain."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError("pred, target and mask must share one shape")
    denom = mask.sum()
    if denom <= 0:
        raise ValueError("mask selects no entries")
    err = pred - target
    mae = float((np.abs(err) * mask).sum() / denom)
    rmse = float(math.sqrt((err * err * mask).sum() / denom))
    mape_mask = mask * (np.abs(target) > 1e-8)
    mape_denom = mape_mask.sum()
    if mape_denom > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(mape_mask > 0, np.abs(err) / np.abs(target), 0.0)
        mape = float(ratio.sum() / mape_denom)
    else:
        mape = None
    return Metrics(mae, rmse, mape)


@dataclass
class ExperimentConfig:
    dataset: SyntheticConfig = SyntheticConfig()
    csv_paths: list = field(default_factory=list)  # overrides synthetic data when set
    csv_layout: str = "long"
    hidden_graph: int = 16
    hidden_mix: int = 16
    p_0: float = 0.5
    lambda_0: float = 0.05
    kappa: float = 20.0
    margin: float = 1.0
    embed_dim: int = 16
    probe_max_epochs: int = 100
    epochs_per_group: int = 30
    extractor_epochs: int = 60
    pairs_per_epoch: int = 256
    batch_size: int = 64
    container_lr: float = 0.01
    probe_lr: float = 0.01
    probe_weight_decay: float = 0.001
    periods_per_day: int = 4
    holdout_period: int = -1
    cycles: int = 1
    seed: int = 0
    variant: str = "full"
    eval_domains: list | None = None
    keep_snapshots: bool = False

    def __post_init__(self):
        if not 0.0 < self.p_0 <= 1.0:
            raise ValueError("p_0 must lie in (0, 1]")
        if not 0.0 < self.lambda_0 < 1.0:
            raise ValueError("lambda_0 must lie in (0, 1)")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, pick one of {VARIANTS}")

    def arch(self, node_count: int | None = None) -> ArchitectureConfig:
        return ArchitectureConfig(
            node_count=node_count if node_count is not None else self.dataset.node_count,
            t_in=self.dataset.t_in,
            t_out=self.dataset.t_out,
            hidden_graph=self.hidden_graph,
            hidden_mix=self.hidden_mix,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = asdict(self.dataset)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "dataset" in data and isinstance(data["dataset"], dict):
            data["dataset"] = SyntheticConfig(**data["dataset"])
        return cls(**data)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


@dataclass
class PreparedData:
    graph: GraphSpec
    groups: list  # DomainGroup over the training temporal periods
    holdouts: dict  # group_id -> WindowBatch over the held-out period


def prepare_domains(config: ExperimentConfig) -> PreparedData:
    """Generate or load domains and carve out the temporal holdout."""
    ds = config.dataset
    with _phase("datagen"):
        if config.csv_paths:
            schema = CsvSchema(layout=config.csv_layout, t_in=ds.t_in, t_out=ds.t_out)
            raw = [load_csv(p, replace(schema, group_id=None)) for p in config.csv_paths]
            node_count = raw[0].series.shape[1]
            graph = gen_graph(replace(ds, node_count=node_count))
            named = [(g.group_id, g.series) for g in raw]
        else:
            graph = gen_graph(ds)
            named = gen_series(ds, graph)
        groups, holdouts = [], {}
        for gid, series in named:
            train_series, holdout_series = datagen.temporal_domain_split(
                series, ds.steps_per_day, config.periods_per_day, config.holdout_period
            )
            train, val, test = datagen.window_and_split(train_series, ds.t_in, ds.t_out)
            groups.append(
                DomainGroup(
                    group_id=gid,
                    source="synthetic" if not config.csv_paths else "csv",
                    series=train_series,
                    mask=np.ones_like(train_series),
                    train=train,
                    val=val,
                    test=test,
                    provenance={"holdout_period": config.holdout_period},
                )
            )
            try:
                holdouts[gid] = datagen.all_windows(holdout_series, ds.t_in, ds.t_out)
            except ValueError:
                holdouts[gid] = datagen._empty_batch(ds.t_in, ds.t_out, holdout_series.shape[1])
    return PreparedData(graph, groups, holdouts)


def _evolve_config(config: ExperimentConfig, node_count: int) -> EvolveConfig:
    variant = config.variant
    return EvolveConfig(
        arch=config.arch(node_count),
        kappa=config.kappa,
        p_0=config.p_0,
        lambda_0=config.lambda_0,
        epochs_per_group=config.epochs_per_group,
        batch_size=config.batch_size,
        container_lr=config.container_lr,
        cycles=config.cycles,
        seed=config.seed,
        probe_optimizer=OptimizerConfig(config.probe_lr, config.probe_weight_decay),
        probe_convergence=ConvergenceConfig(max_epochs=config.probe_max_epochs, batch_size=config.batch_size),
        margin=config.margin,
        embed_dim=config.embed_dim,
        extractor_epochs=config.extractor_epochs,
        pairs_per_epoch=config.pairs_per_epoch,
        order_mode={"REO": "random", "H2E": "reverse"}.get(variant, "curriculum"),
        schedule_mode={"Ela": "static", "DER": "der"}.get(variant, "elastic"),
        gate_mode="always" if variant == "PE" else "normal",
        keep_snapshots=config.keep_snapshots,
    )


def evaluate_params(params: ModelParams, batch: WindowBatch, graph: GraphSpec) -> Metrics:
    pred = forward(params, batch, graph)
    return metrics(pred, batch.targets, batch.mask)


def _eval_ids(config: ExperimentConfig, groups) -> list:
    ids = [g.group_id for g in groups]
    if config.eval_domains:
        ids = [gid for gid in ids if gid in set(config.eval_domains)]
    return ids


def _aggregate(per_domain: dict) -> dict:
    maes = [m["mae"] for m in per_domain.values()]
    rmses = [m["rmse"] for m in per_domain.values()]
    return {
        "mae": float(np.mean(maes)) if maes else None,
        "rmse": float(np.mean(rmses)) if rmses else None,
    }


@dataclass
class RunResult:
    config: ExperimentConfig
    report: dict
    state: EvolutionState | None = None
    isolated_params: dict = field(default_factory=dict)  # IL variant
    prepared: PreparedData | None = None


def _evaluate_container(config, prepared, params_by_group) -> tuple[dict, dict]:
    source_eval, temporal_eval = {}, {}
    by_id = {g.group_id: g for g in prepared.groups}
    for gid in _eval_ids(config, prepared.groups):
        params = params_by_group(gid)
        if params is None:
            continue
        group = by_id[gid]
        if group.test.size:
            source_eval[gid] = evaluate_params(params, group.test, prepared.graph).to_dict()
        holdout = prepared.holdouts.get(gid)
        if holdout is not None and holdout.size:
            temporal_eval[gid] = evaluate_params(params, holdout, prepared.graph).to_dict()
    return source_eval, temporal_eval


def _run_isolated(config: ExperimentConfig, prepared: PreparedData) -> RunResult:
    """IL variant: one fresh model per group, nothing shared."""
    started = time.time()
    arch = config.arch(prepared.graph.node_count)
    isolated = {}
    with _phase("backbone"):
        for i, group in enumerate(prepared.groups):
            params0 = init_params(arch, np.random.default_rng([config.seed, 47, i]))
            result = train_to_convergence(
                params0,
                group.train,
                prepared.graph,
                OptimizerConfig(learning_rate=config.container_lr),
                ConvergenceConfig(max_epochs=config.epochs_per_group, batch_size=config.batch_size),
                seed=config.seed,
            )
            isolated[group.group_id] = result.params
    with _phase("harness"):
        source_eval, temporal_eval = _evaluate_container(config, prepared, isolated.get)
        report = {
            "variant": config.variant,
            "seed": config.seed,
            "order": [g.group_id for g in prepared.groups],
            "bench": None,
            "d_max": None,
            "gate_decisions": 0,
            "absorbed": [],
            "isolated": list(isolated),
            "source_eval": source_eval,
            "temporal_eval": temporal_eval,
            "aggregate": {
                "source": _aggregate(source_eval),
                "temporal": _aggregate(temporal_eval),
            },
            "meta": {"wallclock_s": time.time() - started},
        }
    return RunResult(config, report, None, isolated, prepared)


def execute(config: ExperimentConfig, prepared: PreparedData | None = None) -> RunResult:
    """Run the configured variant end to end and evaluate it."""
    started = time.time()
    if prepared is None:
        prepared = prepare_domains(config)
    if config.variant == "IL":
        return _run_isolated(config, prepared)
    cfg = _evolve_config(config, prepared.graph.node_count)
    with _phase("coupler"):
        state = coupler.evolve(prepared.groups, prepared.graph, cfg)
    with _phase("harness"):
        container_params = state.container.params

        def params_for(gid):
            return state.isolated.get(gid, container_params)

        source_eval, temporal_eval = _evaluate_container(config, prepared, params_for)
        gate_count = sum(1 for rec in state.log if rec.d_min is not None)
        report = {
            "variant": config.variant,
            "seed": config.seed,
            "order": list(state.order),
            "bench": state.bench_profile.group_id,
            "d_max": state.d_max,
            "gate_decisions": gate_count,
            "absorbed": [rec.group_id for rec in state.container.absorbed],
            "isolated": list(state.isolated),
            "schedules": {
                rec.group_id: {"p": rec.schedule.p, "lambda": rec.schedule.lam, "length": rec.schedule.length}
                for rec in state.container.absorbed
            },
            "source_eval": source_eval,
            "temporal_eval": temporal_eval,
            "aggregate": {
                "source": _aggregate(source_eval),
                "temporal": _aggregate(temporal_eval),
            },
            "meta": {"wallclock_s": time.time() - started},
        }
    return RunResult(config, report, state, {}, prepared)


def run_full(config: ExperimentConfig) -> RunResult:
    return execute(config)


def run_ablation(config: ExperimentConfig) -> RunResult:
    if config.variant == "full":
        raise ValueError("run_ablation needs a non-full variant")
    return execute(config)


def run_zero_shot(config: ExperimentConfig) -> dict:
    """Evolved container vs. one single-domain backbone on the unseen period.

    Neither model sees a single gradient step on the holdout. The baseline
    trains on the first source domain alone with the same total epoch
    budget the container spent absorbing groups.
    """
    prepared = prepare_domains(config)
    if not any(b.size for b in prepared.holdouts.values()):
        raise PipelineError("harness", "no holdout temporal domain to evaluate on")
    if config.variant == "IL":
        raise PipelineError("harness", "zero-shot comparison needs a shared container variant")
    result = execute(config, prepared)
    state = result.state
    absorb_events = len(state.container.absorbed)
    budget = config.epochs_per_group * max(absorb_events, 1)
    baseline_group = prepared.groups[0]
    with _phase("backbone"):
        arch = config.arch(prepared.graph.node_count)
        params0 = init_params(arch, np.random.default_rng([config.seed, 53]))
        baseline = train_to_convergence(
            params0,
            baseline_group.train,
            prepared.graph,
            OptimizerConfig(learning_rate=config.container_lr, weight_decay=config.probe_weight_decay),
            # no early stopping: spend the same budget the container spent
            ConvergenceConfig(max_epochs=budget, batch_size=config.batch_size, patience=budget + 1),
            seed=config.seed,
        ).params
    with _phase("harness"):
        evolved_eval, baseline_eval = {}, {}
        for gid in _eval_ids(config, prepared.groups):
            holdout = prepared.holdouts.get(gid)
            if holdout is None or holdout.size == 0:
                continue
            evolved_eval[gid] = evaluate_params(state.container.params, holdout, prepared.graph).to_dict()
            baseline_eval[gid] = evaluate_params(baseline, holdout, prepared.graph).to_dict()
        report = {
            "evolved": {"per_domain": evolved_eval, "aggregate": _aggregate(evolved_eval)},
            "baseline": {
                "per_domain": baseline_eval,
                "aggregate": _aggregate(baseline_eval),
                "trained_on": baseline_group.group_id,
                "budget_epochs": budget,
            },
            "full_run": result.report,
        }
    return report


def snapshot_holdout_curve(state: EvolutionState, prepared: PreparedData,
                           config: ExperimentConfig) -> list:
    """Zero-shot holdout MAE after each absorption (needs keep_snapshots)."""
    curve = []
    for cycle, gid, params in state.snapshots:
        per_domain = {}
        for eval_gid in _eval_ids(config, prepared.groups):
            holdout = prepared.holdouts.get(eval_gid)
            if holdout is None or holdout.size == 0:
                continue
            per_domain[eval_gid] = evaluate_params(params, holdout, prepared.graph).to_dict()
        curve.append({"cycle": cycle, "group_id": gid, "mae": _aggregate(per_domain)["mae"]})
    return curve


def sweep(config: ExperimentConfig, p0_grid=P0_GRID, lambda0_grid=LAMBDA0_GRID,
          kappa_grid=KAPPA_GRID) -> list:
    """Cartesian hyperparameter sweep; failures are recorded, not raised."""
    if not (len(p0_grid) and len(lambda0_grid) and len(kappa_grid)):
        raise ValueError("sweep grids must be nonempty")
    prepared = prepare_domains(config)
    rows = []
    for p0 in p0_grid:
        for lam0 in lambda0_grid:
            for kappa in kappa_grid:
                cell = replace(config, p_0=p0, lambda_0=lam0, kappa=kappa)
                row = {"p_0": p0, "lambda_0": lam0, "kappa": kappa}
                try:
                    result = execute(cell, prepared)
                    agg = result.report["aggregate"]
                    row.update(
                        source_mae=agg["source"]["mae"],
                        temporal_mae=agg["temporal"]["mae"],
                        gate_open=len(result.report["absorbed"]),
                        gate_closed=len(result.report["isolated"]),
                        error="",
                    )
                except Exception as err:  # keep sweeping
                    row.update(source_mae=None, temporal_mae=None, gate_open=None,
                               gate_closed=None, error=str(err))
                rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    fields = ["p_0", "lambda_0", "kappa", "source_mae", "temporal_mae",
              "gate_open", "gate_closed", "error"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def audit(config: ExperimentConfig, estimator: HistogramEstimator | None = None) -> EntropyReport:
    with _phase("info_audit"):
        ds = config.dataset
        graph = gen_graph(ds)
        named = gen_series(ds, graph)
        return build_entropy_report(named, estimator or HistogramEstimator())


def ordering_report(config: ExperimentConfig) -> dict:
    prepared = prepare_domains(config)
    with _phase("curriculum"):
        probe = ProbeConfig(
            config.arch(prepared.graph.node_count),
            OptimizerConfig(config.probe_lr, config.probe_weight_decay),
            ConvergenceConfig(max_epochs=config.probe_max_epochs, batch_size=config.batch_size),
            config.seed,
        )
        return reorder(prepared.groups, prepared.graph, probe).to_report()


def write_artifacts(result: RunResult, out_dir) -> dict:
    """report.json, losses.csv, evolution.jsonl and checkpoints under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json"}
    with open(paths["report"], "w") as fh:
        json.dump(result.report, fh, indent=2, default=float)
    if result.state is not None:
        paths["evolution"] = out / "evolution.jsonl"
        write_evolution_log(result.state.log, paths["evolution"])
        paths["losses"] = out / "losses.csv"
        _write_losses(result.state, paths["losses"])
        paths["container"] = out / "container.json"
        save_container(result.state.container, paths["container"])
        for gid, params in result.state.isolated.items():
            p = out / f"isolated_{gid}.json"
            save_params(params, p)
            paths[f"isolated_{gid}"] = p
    for gid, params in result.isolated_params.items():
        p = out / f"isolated_{gid}.json"
        save_params(params, p)
        paths[f"isolated_{gid}"] = p
    return {k: str(v) for k, v in paths.items()}


def _write_losses(state: EvolutionState, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "group_id", "loss"])
        for rec in state.log:
            for epoch, loss in enumerate(rec.trace):
                writer.writerow([epoch, rec.group_id, loss])
