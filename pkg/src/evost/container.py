"""Shared model trained across ordered groups with elastic regularization.

Capacity is released per group: dropout probability and weight decay both
follow p0 * (1 - exp(l - d_max)), so the hardest group (largest gradient
difference l) trains the fully active model while easy groups see a heavily
regularized one. Dropout acts on parameters, not activations: a binary
activeness mask multiplies the flat parameter vector, with inverted
scaling 1/(1-p) at train time so evaluation needs no correction. Dropped
coordinates receive no update at all on that step.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import (
    ArchitectureConfig,
    DivergenceError,
    GraphSpec,
    ModelParams,
    OptimizerState,
    adam_step,
    backward,
    init_params,
)
from .datagen import DomainGroup


def release_probability(p_0: float, tau: float) -> float:
    """Saturating release law P_0 * (1 - exp(-tau))."""
    if not 0.0 < p_0 <= 1.0:
        raise ValueError("p_0 must lie in (0, 1]")
    if tau < 0.0:
        raise ValueError("tau must be nonnegative")
    return p_0 * (1.0 - math.exp(-tau))


@dataclass(frozen=True)
class ElasticSchedule:
    group_id: str | None
    length: float
    d_max: float
    p: float
    lam: float
    clamped: bool = False


def schedule(length: float, d_max: float, p_0: float, lambda_0: float,
             group_id: str | None = None, clamp: bool = False) -> ElasticSchedule:
    """Dropout probability and weight decay released by difficulty.

    ``length`` beyond ``d_max`` is an error unless ``clamp`` is set, in
    which case the exponent is clamped at 0 (fully active model) and a
    warning is emitted; the law is not defined past the observed maximum.
    """
    if not 0.0 < p_0 <= 1.0:
        raise ValueError("p_0 must lie in (0, 1]")
    if not 0.0 < lambda_0 < 1.0:
        raise ValueError("lambda_0 must lie in (0, 1)")
    if length < 0.0 or d_max < 0.0:
        raise ValueError("length and d_max must be nonnegative")
    clamped = False
    if length > d_max:
        if not clamp:
            raise ValueError(f"length {length} exceeds d_max {d_max}; schedule undefined")
        warnings.warn(
            f"group {group_id}: difficulty {length} exceeds observed maximum {d_max}; "
            "clamping to the fully active schedule",
            stacklevel=2,
        )
        clamped = True
        factor = 0.0
    else:
        factor = 1.0 - math.exp(length - d_max)
    return ElasticSchedule(group_id, length, d_max, p_0 * factor, lambda_0 * factor, clamped)


@dataclass
class ActivenessMatrix:
    mask: np.ndarray  # {0, 1} over the flat parameter vector
    keep_fraction: float


def sample_activeness(param_count: int, p: float, rng: np.random.Generator) -> ActivenessMatrix:
    if param_count < 1:
        raise ValueError("param_count must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    mask = (rng.random(param_count) >= p).astype(np.float64)
    return ActivenessMatrix(mask, float(mask.mean()))


@dataclass
class AbsorbedRecord:
    group_id: str
    schedule: ElasticSchedule


@dataclass
class CommonContainerState:
    params: ModelParams
    optimizer: OptimizerState
    absorbed: list[AbsorbedRecord]
    rng_seed: int
    rng: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng([self.rng_seed, 13])

    @classmethod
    def fresh(cls, arch: ArchitectureConfig, seed: int, learning_rate: float = 0.01):
        params = init_params(arch, np.random.default_rng([seed, 11]))
        opt = OptimizerState.fresh(arch.param_count, learning_rate)
        return cls(params, opt, [], seed)


def train_on_group(
    container: CommonContainerState,
    group: DomainGroup,
    graph: GraphSpec,
    sched: ElasticSchedule,
    epochs: int,
    batch_size: int = 64,
) -> list:
    """Masked-MAE training with per-step activeness masks; returns epoch losses.

    The group is appended to the absorbed registry even for epochs=0. On a
    non-finite loss the step is not applied, so the container keeps its
    last finite state.
    """
    if group.train.size == 0:
        raise ValueError(f"group {group.group_id} has no training windows")
    container.absorbed.append(AbsorbedRecord(group.group_id, sched))
    arch = container.params.arch
    flat = container.params.flat
    # fresh moments per group session: stale second moments from the previous
    # domain's scale would mis-size every step of the new one
    state = OptimizerState.fresh(arch.param_count, container.optimizer.learning_rate, sched.lam)
    trace = []
    data = group.train
    for _ in range(epochs):
        order = container.rng.permutation(data.size)
        total, seen = 0.0, 0
        for start in range(0, data.size, batch_size):
            idx = order[start : start + batch_size]
            mb = data.take(idx)
            act = sample_activeness(arch.param_count, sched.p, container.rng)
            if sched.p >= 1.0:
                # fully dropped model: the step contributes no update
                loss, _ = backward(ModelParams(arch, flat), mb, graph)
                total += loss * len(idx)
                seen += len(idx)
                continue
            multiplier = act.mask / (1.0 - sched.p)
            loss, grad = backward(ModelParams(arch, flat), mb, graph, activeness=multiplier)
            if not np.isfinite(loss):
                container.params = ModelParams(arch, flat)
                container.optimizer = state
                raise DivergenceError(
                    f"container diverged while training group {group.group_id}", trace
                )
            new_flat, new_state = adam_step(flat, grad, state)
            keep = act.mask == 1.0
            flat = np.where(keep, new_flat, flat)
            state = replace(
                new_state,
                first_moment=np.where(keep, new_state.first_moment, state.first_moment),
                second_moment=np.where(keep, new_state.second_moment, state.second_moment),
            )
            total += loss * len(idx)
            seen += len(idx)
        trace.append(total / seen)
    container.params = ModelParams(arch, flat)
    container.optimizer = state
    return trace


CHECKPOINT_VERSION = 1


def save_container(container: CommonContainerState, path):
    arch = container.params.arch
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": {
            "node_count": arch.node_count,
            "t_in": arch.t_in,
            "t_out": arch.t_out,
            "feature_count": arch.feature_count,
            "hidden_graph": arch.hidden_graph,
            "hidden_mix": arch.hidden_mix,
        },
        "params": container.params.flat.tolist(),
        "absorbed": [
            {
                "group_id": rec.group_id,
                "length": rec.schedule.length,
                "d_max": rec.schedule.d_max,
                "p": rec.schedule.p,
                "lambda": rec.schedule.lam,
                "clamped": rec.schedule.clamped,
            }
            for rec in container.absorbed
        ],
        "seed": container.rng_seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_container(path) -> CommonContainerState:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    arch = ArchitectureConfig(**payload["arch"])
    params = ModelParams(arch, np.array(payload["params"], dtype=np.float64))
    absorbed = [
        AbsorbedRecord(
            rec["group_id"],
            ElasticSchedule(
                rec["group_id"], rec["length"], rec["d_max"], rec["p"], rec["lambda"], rec["clamped"]
            ),
        )
        for rec in payload["absorbed"]
    ]
    state = CommonContainerState(
        params, OptimizerState.fresh(arch.param_count), absorbed, payload["seed"]
    )
    return state
