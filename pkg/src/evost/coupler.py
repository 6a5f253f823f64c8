"""Distance-gated absorption of new sample groups into the shared container.

A new group's signature is compared against every absorbed group; the gate
opens only when the closest stored signature is strictly between 0 and the
threshold. Absorbed groups train the shared container under their elastic
schedule; rejected groups get a fresh isolated model and trigger a
warm-started re-instantiation of the extractor, leaving the container
untouched. The evolve loop runs the whole pipeline: reorder, bootstrap the
container on the first group, then gate everything that follows, optionally
cycling over the same ordered stream several times.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import (
    ArchitectureConfig,
    GraphSpec,
    ModelParams,
    OptimizerConfig,
    init_params,
    train_to_convergence,
    ConvergenceConfig,
)
from .container import (
    CommonContainerState,
    ElasticSchedule,
    schedule,
    train_on_group,
)
from .curriculum import (
    DifficultyScore,
    GradientProfile,
    ProbeConfig,
    difficulty,
    profile_group,
    reorder,
)
from .datagen import DomainGroup
from .personality import (
    Extractor,
    PairSamplingConfig,
    distance,
    embed,
    init_extractor,
    reinstantiate,
    train_extractor,
)


@dataclass
class DistanceRegistry:
    entries: list  # (group_id, distance) over the absorbed groups
    d_min: float
    kappa: float


def build_registry(new_embedding, stored_embeddings, kappa: float) -> DistanceRegistry:
    stored = list(stored_embeddings)
    if not stored:
        raise ValueError("registry needs at least one stored embedding")
    entries = [(e.group_id, distance(new_embedding.vector, e.vector)) for e in stored]
    return DistanceRegistry(entries, min(d for _, d in entries), kappa)


@dataclass(frozen=True)
class GateDecision:
    h: int
    d_min: float
    kappa: float
    branch: str  # "absorb" | "isolate"
    zero_distance: bool = False


def gate(d_min: float, kappa: float) -> GateDecision:
    """Open (h=1) only for 0 < d_min < kappa, both bounds strict."""
    if d_min < 0:
        raise ValueError("d_min must be nonnegative")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    h = 1 if 0.0 < d_min < kappa else 0
    return GateDecision(h, d_min, kappa, "absorb" if h else "isolate", zero_distance=d_min == 0.0)


def assemble_loss(decision: GateDecision, container_loss: float, lam: float,
                  theta_norm_sq: float, isolated_loss: float) -> float:
    """Gated objective: absorbed branch with L2 penalty vs. isolated branch."""
    if container_loss < 0 or isolated_loss < 0:
        raise ValueError("losses must be nonnegative")
    h = decision.h
    return h * (container_loss + lam * theta_norm_sq) + (1 - h) * isolated_loss


@dataclass
class EvolutionRecord:
    group_id: str
    cycle: int
    h: int
    branch: str
    d_min: float | None
    kappa: float
    p: float | None
    lam: float | None
    length: float | None
    final_loss: float | None
    eval_metrics: dict | None = None
    flags: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # per-epoch losses, kept out of the wire format

    def to_json_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "cycle": self.cycle,
            "h": self.h,
            "branch": self.branch,
            "d_min": self.d_min,
            "kappa": self.kappa,
            "p": self.p,
            "lambda": self.lam,
            "length": self.length,
            "final_loss": self.final_loss,
            "eval_metrics": self.eval_metrics,
            "flags": list(self.flags),
        }


def write_evolution_log(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")


@dataclass(frozen=True)
class EvolveConfig:
    arch: ArchitectureConfig
    kappa: float
    p_0: float = 0.5
    lambda_0: float = 0.05
    epochs_per_group: int = 30
    batch_size: int = 64
    container_lr: float = 0.01
    cycles: int = 1
    seed: int = 0
    probe_optimizer: OptimizerConfig = OptimizerConfig(learning_rate=0.01, weight_decay=0.001)
    probe_convergence: ConvergenceConfig = ConvergenceConfig()
    margin: float = 1.0
    embed_dim: int = 16
    extractor_epochs: int = 60
    pairs_per_epoch: int = 256
    extractor_lr: float = 0.01
    order_mode: str = "curriculum"  # curriculum | random | reverse
    schedule_mode: str = "elastic"  # elastic | static | der
    static_p: float = 0.1
    static_lambda: float = 0.001
    gate_mode: str = "normal"  # normal | always
    keep_snapshots: bool = False

    def probe(self) -> ProbeConfig:
        return ProbeConfig(self.arch, self.probe_optimizer, self.probe_convergence, self.seed)

    def __post_init__(self):
        if self.order_mode not in ("curriculum", "random", "reverse"):
            raise ValueError(f"unknown order_mode {self.order_mode!r}")
        if self.schedule_mode not in ("elastic", "static", "der"):
            raise ValueError(f"unknown schedule_mode {self.schedule_mode!r}")
        if self.gate_mode not in ("normal", "always"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")


@dataclass
class EvolutionState:
    container: CommonContainerState
    extractor: Extractor
    bench_profile: GradientProfile
    d_max: float
    embeddings: dict = field(default_factory=dict)  # absorbed group_id -> DomainEmbedding
    profiles: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    isolated: dict = field(default_factory=dict)  # rejected group_id -> ModelParams
    log: list = field(default_factory=list)
    order: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (cycle, group_id, ModelParams)
    isolated_count: int = 0


def _score_for(state: EvolutionState, group: DomainGroup, graph, cfg: EvolveConfig) -> DifficultyScore:
    profile = state.profiles.get(group.group_id)
    if profile is None:
        profile = profile_group(group, graph, cfg.probe())
        state.profiles[group.group_id] = profile
    score = state.scores.get(group.group_id)
    if score is None:
        score = difficulty(profile, state.bench_profile)
        state.scores[group.group_id] = score
    return score


def _schedule_for(state: EvolutionState, group: DomainGroup, graph, cfg: EvolveConfig,
                  flags: list) -> ElasticSchedule:
    score = _score_for(state, group, graph, cfg)
    length = score.length
    if cfg.schedule_mode == "static":
        return ElasticSchedule(group.group_id, length, state.d_max, cfg.static_p, cfg.static_lambda)
    elastic = schedule(length, state.d_max, cfg.p_0, cfg.lambda_0, group.group_id, clamp=True)
    if elastic.clamped:
        flags.append("clamped")
    if cfg.schedule_mode == "der":
        # expansion rate p0 / l, guarded where the quotient would exceed p0
        if length > 1.0:
            p = cfg.p_0 / length
        else:
            p = cfg.p_0
            flags.append("der-guard")
        return replace(elastic, p=p)
    return elastic


def _absorb(state: EvolutionState, group: DomainGroup, graph, cfg: EvolveConfig,
            cycle: int, decision: GateDecision | None, flags: list, new_embedding):
    sched = _schedule_for(state, group, graph, cfg, flags)
    trace = train_on_group(state.container, group, graph, sched, cfg.epochs_per_group, cfg.batch_size)
    state.embeddings[group.group_id] = new_embedding if new_embedding is not None else embed(
        state.extractor, group
    )
    if cfg.keep_snapshots:
        state.snapshots.append((cycle, group.group_id, state.container.params.copy()))
    state.log.append(
        EvolutionRecord(
            group_id=group.group_id,
            cycle=cycle,
            h=1,
            branch="absorb",
            d_min=decision.d_min if decision else None,
            kappa=cfg.kappa,
            p=sched.p,
            lam=sched.lam,
            length=sched.length,
            final_loss=trace[-1] if trace else None,
            flags=flags,
            trace=trace,
        )
    )


def _isolate(state: EvolutionState, group: DomainGroup, graph, cfg: EvolveConfig,
             cycle: int, decision: GateDecision, flags: list):
    params0 = init_params(cfg.arch, np.random.default_rng([cfg.seed, 47, state.isolated_count]))
    state.isolated_count += 1
    result = train_to_convergence(
        params0,
        group.train,
        graph,
        OptimizerConfig(learning_rate=cfg.container_lr),
        ConvergenceConfig(max_epochs=cfg.epochs_per_group, batch_size=cfg.batch_size),
        seed=cfg.seed,
    )
    state.isolated[group.group_id] = result.params
    state.extractor = reinstantiate(state.extractor)
    state.log.append(
        EvolutionRecord(
            group_id=group.group_id,
            cycle=cycle,
            h=0,
            branch="isolate",
            d_min=decision.d_min,
            kappa=cfg.kappa,
            p=None,
            lam=None,
            length=None,
            final_loss=result.trace[-1] if result.trace else None,
            flags=flags,
            trace=list(result.trace),
        )
    )


def incorporate(state: EvolutionState, group: DomainGroup, graph: GraphSpec,
                cfg: EvolveConfig, cycle: int = 0) -> GateDecision | None:
    """Gate one group into the container or train it in isolation.

    Bootstraps unconditionally while the container is empty (gating needs
    trained domains to compare against). Returns the gate decision, or
    None when no gate was consulted.
    """
    flags: list = []
    if not state.container.absorbed:
        flags.append("bootstrap")
        _absorb(state, group, graph, cfg, cycle, None, flags, None)
        return None
    new_embedding = embed(state.extractor, group)
    stored = [e for gid, e in state.embeddings.items() if gid != group.group_id]
    if not stored:
        # the only absorbed domain is this group itself (k=1 re-fed): nothing
        # to compare against, keep absorbing
        flags.append("self-only")
        _absorb(state, group, graph, cfg, cycle, None, flags, new_embedding)
        return None
    registry = build_registry(new_embedding, stored, cfg.kappa)
    decision = gate(registry.d_min, cfg.kappa)
    if decision.zero_distance:
        flags.append("zero-distance")
    if cfg.gate_mode == "always" and decision.h == 0:
        flags.append("forced-absorb")
        decision = replace(decision, h=1, branch="absorb")
    if decision.h == 1:
        _absorb(state, group, graph, cfg, cycle, decision, flags, new_embedding)
    else:
        _isolate(state, group, graph, cfg, cycle, decision, flags)
    return decision


def evolve(groups, graph: GraphSpec, cfg: EvolveConfig) -> EvolutionState:
    """Full pipeline: reorder, bootstrap, then gate every group in order."""
    if not groups:
        raise ValueError("need at least one group to evolve")
    by_id = {g.group_id: g for g in groups}
    result = reorder(groups, graph, cfg.probe())
    if cfg.order_mode == "curriculum":
        order = list(result.sequence.ids)
    elif cfg.order_mode == "reverse":
        order = list(reversed(result.sequence.ids))
    else:
        order = [g.group_id for g in groups]
        np.random.default_rng([cfg.seed, 41]).shuffle(order)
    input_dim = cfg.arch.t_in * cfg.arch.node_count * cfg.arch.feature_count
    extractor = init_extractor(input_dim, cfg.embed_dim, cfg.margin, cfg.seed)
    if len(groups) > 1 or groups[0].train.size > 1:
        extractor, _ = train_extractor(
            extractor,
            groups,
            PairSamplingConfig(cfg.pairs_per_epoch, 0.5, cfg.extractor_lr, cfg.seed),
            cfg.extractor_epochs,
        )
    state = EvolutionState(
        container=CommonContainerState.fresh(cfg.arch, cfg.seed, cfg.container_lr),
        extractor=extractor,
        bench_profile=result.profiles[result.bench_id],
        d_max=result.d_max,
        profiles=dict(result.profiles),
        scores=dict(result.scores),
        order=order,
    )
    for cycle in range(cfg.cycles):
        for gid in order:
            incorporate(state, by_id[gid], graph, cfg, cycle)
    return state
