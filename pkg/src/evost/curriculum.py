"""Easy-to-hard ordering of sample groups via probe-model gradients.

Each group gets a fresh probe model trained from one shared seed; the
gradient of the full training split at the converged parameters is the
group's signature. Groups are ranked by how far that signature sits from
the quietest group (the bench), measured as the norm of the flattened
gradient difference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import (
    ArchitectureConfig,
    ConvergenceConfig,
    DivergenceError,
    GraphSpec,
    OptimizerConfig,
    init_params,
    split_flat,
    train_to_convergence,
)
from .datagen import DomainGroup


class ProbeDivergenceError(RuntimeError):
    def __init__(self, group_id, message):
        super().__init__(f"group {group_id}: {message}")
        self.group_id = group_id


@dataclass(frozen=True)
class ProbeConfig:
    arch: ArchitectureConfig
    optimizer: OptimizerConfig = OptimizerConfig(learning_rate=0.01, weight_decay=0.001)
    convergence: ConvergenceConfig = ConvergenceConfig()
    init_seed: int = 0


@dataclass
class GradientProfile:
    group_id: str
    sum_sq: float  # sum over layers of the squared L2 gradient norm
    cat: np.ndarray  # per-layer gradients flattened and concatenated, fixed order


@dataclass
class DifficultyScore:
    group_id: str
    d: np.ndarray  # elementwise difference to the bench signature
    length: float  # L2 norm of d


@dataclass
class OrderedSequence:
    ids: list
    lengths: list


@dataclass
class ReorderResult:
    sequence: OrderedSequence
    scores: dict
    d_max: float
    bench_id: str
    profiles: dict

    def to_report(self) -> dict:
        return {
            "bench": self.bench_id,
            "d_max": self.d_max,
            "order": list(self.sequence.ids),
            "groups": {
                gid: {"sum_sq": self.profiles[gid].sum_sq, "length": self.scores[gid].length}
                for gid in self.sequence.ids
            },
        }


def build_profile(group_id, layer_grads) -> GradientProfile:
    """Profile from per-layer gradient tensors (row-major flatten, fixed order)."""
    arrays = [np.asarray(g, dtype=np.float64).ravel() for g in layer_grads]
    sum_sq = float(sum(float(a @ a) for a in arrays))
    cat = np.concatenate(arrays) if arrays else np.zeros(0)
    return GradientProfile(group_id, sum_sq, cat)


def profile_group(group: DomainGroup, graph: GraphSpec, probe: ProbeConfig) -> GradientProfile:
    if group.train.size == 0:
        raise ValueError(f"group {group.group_id} has no training windows")
    params0 = init_params(probe.arch, np.random.default_rng(probe.init_seed))
    try:
        result = train_to_convergence(
            params0, group.train, graph, probe.optimizer, probe.convergence, seed=probe.init_seed
        )
    except DivergenceError as err:
        raise ProbeDivergenceError(group.group_id, str(err)) from err
    layer_grads = split_flat(probe.arch, result.final_grad)
    return build_profile(group.group_id, layer_grads)


def select_bench(profiles) -> str:
    if not profiles:
        raise ValueError("no profiles to choose a bench from")
    return min(profiles, key=lambda p: (p.sum_sq, p.group_id)).group_id


def difficulty(profile: GradientProfile, bench_profile: GradientProfile) -> DifficultyScore:
    if profile.cat.shape != bench_profile.cat.shape:
        raise ValueError(
            f"gradient signatures differ in length: {profile.cat.shape} vs {bench_profile.cat.shape}"
        )
    d = profile.cat - bench_profile.cat
    return DifficultyScore(profile.group_id, d, float(np.linalg.norm(d)))


def order_from_profiles(profiles) -> ReorderResult:
    bench_id = select_bench(profiles)
    by_id = {p.group_id: p for p in profiles}
    scores = {p.group_id: difficulty(p, by_id[bench_id]) for p in profiles}
    ranked = sorted(scores.values(), key=lambda s: (s.length, s.group_id))
    sequence = OrderedSequence([s.group_id for s in ranked], [s.length for s in ranked])
    d_max = max(s.length for s in ranked)
    return ReorderResult(sequence, scores, d_max, bench_id, by_id)


def reorder(groups, graph: GraphSpec, probe: ProbeConfig) -> ReorderResult:
    if not groups:
        raise ValueError("need at least one group to reorder")
    profiles = [profile_group(g, graph, probe) for g in groups]
    return order_from_profiles(profiles)
