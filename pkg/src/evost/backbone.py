"""Small graph-temporal predictor with hand-rolled exact gradients.

The network is deliberately tiny: a graph convolution over the normalized
adjacency, a hidden mixing layer, and a linear readout that emits the whole
forecast horizon at once. The input window is folded into the feature axis,
so no recurrence is needed. All parameters live in one flat float64 vector;
every other part of the system (optimizer, dropout masks, gradient
profiles) treats the model as that single coordinate space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LAYER_NAMES = (
    "graph_weight",
    "graph_bias",
    "mix_weight",
    "mix_bias",
    "readout_weight",
    "readout_bias",
)


class ShapeError(ValueError):
    """A tensor does not match the architecture it is used with."""


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss. ``trace`` holds the losses seen so far."""

    def __init__(self, message: str, trace=()):
        super().__init__(message)
        self.trace = list(trace)


def normalize_adjacency(adjacency) -> np.ndarray:
    """Return D^{-1/2} (A + I) D^{-1/2} for a symmetric nonnegative A."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise ShapeError("adjacency must be symmetric")
    if np.any(a < 0):
        raise ValueError("adjacency entries must be nonnegative")
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    out = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    if not np.all(np.isfinite(out)):
        raise ValueError("normalized adjacency has non-finite entries")
    return out


@dataclass(frozen=True)
class GraphSpec:
    node_count: int
    adjacency: np.ndarray
    normalized_adjacency: np.ndarray

    @classmethod
    def from_adjacency(cls, adjacency) -> "GraphSpec":
        a = np.asarray(adjacency, dtype=np.float64)
        return cls(a.shape[0], a, normalize_adjacency(a))


@dataclass(frozen=True)
class ArchitectureConfig:
    node_count: int
    t_in: int = 12
    t_out: int = 12
    feature_count: int = 1
    hidden_graph: int = 16
    hidden_mix: int = 16

    def __post_init__(self):
        for name in ("node_count", "t_in", "t_out", "feature_count", "hidden_graph", "hidden_mix"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def window_features(self) -> int:
        # features per node after the input window is folded into one axis
        return self.t_in * self.feature_count

    def layer_shapes(self) -> list[tuple[int, ...]]:
        f = self.window_features
        return [
            (f, self.hidden_graph),
            (self.hidden_graph,),
            (self.hidden_graph, self.hidden_mix),
            (self.hidden_mix,),
            (self.hidden_mix, self.t_out),
            (self.t_out,),
        ]

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes())


def split_flat(arch: ArchitectureConfig, flat: np.ndarray) -> list[np.ndarray]:
    """Views of a flat vector, one per layer, in the fixed layer order."""
    flat = np.asarray(flat)
    if flat.shape != (arch.param_count,):
        raise ShapeError(
            f"flat vector has length {flat.shape}, architecture needs {arch.param_count}"
        )
    out, offset = [], 0
    for shape in arch.layer_shapes():
        size = int(np.prod(shape))
        out.append(flat[offset : offset + size].reshape(shape))
        offset += size
    return out


@dataclass
class ModelParams:
    arch: ArchitectureConfig
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.param_count,):
            raise ShapeError(
                f"parameter vector length {self.flat.shape[0]} != {self.arch.param_count}"
            )

    def layers(self) -> list[np.ndarray]:
        return split_flat(self.arch, self.flat)

    @classmethod
    def from_layers(cls, arch: ArchitectureConfig, layers) -> "ModelParams":
        expected = arch.layer_shapes()
        arrays = []
        for name, shape, layer in zip(LAYER_NAMES, expected, layers):
            a = np.asarray(layer, dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"layer {name} has shape {a.shape}, expected {shape}")
        # second pass so the error above fires before any copying work
        for layer in layers:
            arrays.append(np.asarray(layer, dtype=np.float64).ravel())
        return cls(arch, np.concatenate(arrays))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.flat.copy())


def init_params(arch: ArchitectureConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-normal weights, zero biases."""
    parts = []
    for shape in arch.layer_shapes():
        if len(shape) == 1:
            parts.append(np.zeros(shape))
        else:
            scale = np.sqrt(2.0 / (shape[0] + shape[1]))
            parts.append(rng.normal(0.0, scale, size=shape))
    return ModelParams.from_layers(arch, parts)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (batch, t_in, node, feature)
    targets: np.ndarray  # (batch, t_out, node)
    mask: np.ndarray  # same shape as targets, entries in {0, 1}

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.inputs.ndim != 4:
            raise ShapeError(f"inputs must be 4-d (batch, t_in, node, feature), got {self.inputs.shape}")
        if self.targets.ndim != 3:
            raise ShapeError(f"targets must be 3-d (batch, t_out, node), got {self.targets.shape}")
        if self.mask.shape != self.targets.shape:
            raise ShapeError("mask must match targets shape")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError("inputs and targets disagree on batch size")
        if self.inputs.shape[2] != self.targets.shape[2]:
            raise ShapeError("inputs and targets disagree on node count")
        if self.inputs.shape[1] < 1 or self.targets.shape[1] < 1:
            raise ShapeError("window lengths must be >= 1")
        bad = (self.mask != 0.0) & (self.mask != 1.0)
        if np.any(bad):
            raise ValueError("mask entries must be 0 or 1")
        if self.size and np.any(self.mask.reshape(self.size, -1).sum(axis=1) == 0):
            raise ValueError("every sample needs at least one unmasked target entry")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def take(self, indices) -> "WindowBatch":
        return WindowBatch(self.inputs[indices], self.targets[indices], self.mask[indices])


def masked_mae_loss(pred, target, mask) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError("pred, target and mask must share one shape")
    denom = mask.sum()
    if denom <= 0:
        raise ValueError("mask selects no entries")
    return float((np.abs(pred - target) * mask).sum() / denom)


def _check_batch(arch: ArchitectureConfig, batch: WindowBatch, graph: GraphSpec):
    if graph.node_count != arch.node_count:
        raise ShapeError(f"graph has {graph.node_count} nodes, architecture expects {arch.node_count}")
    if batch.inputs.shape[1] != arch.t_in:
        raise ShapeError(f"graph_weight expects t_in={arch.t_in}, batch has {batch.inputs.shape[1]}")
    if batch.inputs.shape[2] != arch.node_count:
        raise ShapeError(f"graph_weight expects {arch.node_count} nodes, batch has {batch.inputs.shape[2]}")
    if batch.inputs.shape[3] != arch.feature_count:
        raise ShapeError(f"graph_weight expects {arch.feature_count} features, batch has {batch.inputs.shape[3]}")
    if batch.targets.shape[1] != arch.t_out:
        raise ShapeError(f"readout_weight expects t_out={arch.t_out}, batch has {batch.targets.shape[1]}")


def _effective_flat(params: ModelParams, activeness) -> np.ndarray:
    if activeness is None:
        return params.flat
    act = np.asarray(activeness, dtype=np.float64)
    if act.shape != params.flat.shape:
        raise ShapeError(f"activeness length {act.shape} != parameter vector {params.flat.shape}")
    return params.flat * act


def _forward_pass(params: ModelParams, batch: WindowBatch, graph: GraphSpec, activeness):
    arch = params.arch
    _check_batch(arch, batch, graph)
    flat = _effective_flat(params, activeness)
    w1, b1, w2, b2, w3, b3 = split_flat(arch, flat)
    b = batch.size
    # (batch, t_in, node, feature) -> (batch, node, t_in * feature)
    x = np.transpose(batch.inputs, (0, 2, 1, 3)).reshape(b, arch.node_count, arch.window_features)
    z0 = np.einsum("ij,bjf->bif", graph.normalized_adjacency, x)
    s1 = z0 @ w1 + b1
    h1 = np.maximum(s1, 0.0)
    s2 = h1 @ w2 + b2
    h2 = np.maximum(s2, 0.0)
    s3 = h2 @ w3 + b3
    pred = np.transpose(s3, (0, 2, 1))  # (batch, t_out, node)
    return pred, (z0, s1, h1, s2, h2, w2, w3)


def forward(params: ModelParams, batch: WindowBatch, graph: GraphSpec, activeness=None) -> np.ndarray:
    pred, _ = _forward_pass(params, batch, graph, activeness)
    return pred


def backward(params: ModelParams, batch: WindowBatch, graph: GraphSpec, activeness=None):
    """Loss and its exact gradient w.r.t. the flat parameter vector.

    Entries multiplied away by ``activeness`` get a zero gradient. The
    subgradient of |.| at 0 is taken as 0, likewise for relu at 0.
    """
    pred, (z0, s1, h1, s2, h2, w2, w3) = _forward_pass(params, batch, graph, activeness)
    mask = batch.mask
    denom = mask.sum()
    if denom <= 0:
        raise ValueError("mask selects no entries")
    diff = pred - batch.targets
    loss = float((np.abs(diff) * mask).sum() / denom)
    dpred = np.sign(diff) * mask / denom
    ds3 = np.transpose(dpred, (0, 2, 1))
    dw3 = np.einsum("bnh,bnt->ht", h2, ds3)
    db3 = ds3.sum(axis=(0, 1))
    dh2 = ds3 @ w3.T
    ds2 = dh2 * (s2 > 0.0)
    dw2 = np.einsum("bnh,bnk->hk", h1, ds2)
    db2 = ds2.sum(axis=(0, 1))
    dh1 = ds2 @ w2.T
    ds1 = dh1 * (s1 > 0.0)
    dw1 = np.einsum("bnf,bnh->fh", z0, ds1)
    db1 = ds1.sum(axis=(0, 1))
    grad = np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3])
    if activeness is not None:
        grad = grad * np.asarray(activeness, dtype=np.float64)
    return loss, grad


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    learning_rate: float
    weight_decay: float

    @classmethod
    def fresh(cls, param_count: int, learning_rate: float = 0.01, weight_decay: float = 0.0):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        return cls(np.zeros(param_count), np.zeros(param_count), 0, learning_rate, weight_decay)


def adam_step(flat: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """One bias-corrected adaptive-moment update.

    Weight decay enters as grads + 2 * weight_decay * flat, i.e. the exact
    gradient of a lambda * ||theta||^2 penalty.
    """
    flat = np.asarray(flat, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if flat.shape != grads.shape or flat.shape != state.first_moment.shape:
        raise ShapeError("parameter, gradient and moment vectors must share one length")
    g = grads + 2.0 * state.weight_decay * flat
    t = state.step_count + 1
    m = ADAM_BETA1 * state.first_moment + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    new_flat = flat - state.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_flat, replace(state, first_moment=m, second_moment=v, step_count=t)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0


@dataclass(frozen=True)
class ConvergenceConfig:
    rel_tol: float = 1e-4
    patience: int = 5
    max_epochs: int = 100
    batch_size: int = 64


@dataclass
class TrainResult:
    params: ModelParams
    trace: list
    final_grad: np.ndarray
    epochs_run: int
    converged: bool


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_to_convergence(
    params_init: ModelParams,
    data: WindowBatch,
    graph: GraphSpec,
    optimizer: OptimizerConfig = OptimizerConfig(),
    convergence: ConvergenceConfig = ConvergenceConfig(),
    seed: int = 0,
) -> TrainResult:
    """Minibatch training until the epoch mean loss stops improving.

    Stops once the relative improvement stays below ``rel_tol`` for
    ``patience`` consecutive epochs, or at ``max_epochs``. The returned
    gradient is taken over the full training set at the final parameters.
    """
    if data.size == 0:
        raise ValueError("training data is empty")
    flat = params_init.flat.copy()
    arch = params_init.arch
    state = OptimizerState.fresh(arch.param_count, optimizer.learning_rate, optimizer.weight_decay)
    rng = np.random.default_rng(seed)
    trace: list[float] = []
    streak = 0
    converged = False
    epochs_run = 0
    for _ in range(convergence.max_epochs):
        total, seen = 0.0, 0
        for idx in _epoch_batches(data.size, convergence.batch_size, rng):
            mb = data.take(idx)
            loss, grad = backward(ModelParams(arch, flat), mb, graph)
            if not np.isfinite(loss):
                raise DivergenceError("training loss is not finite", trace)
            flat, state = adam_step(flat, grad, state)
            total += loss * len(idx)
            seen += len(idx)
        epoch_loss = total / seen
        epochs_run += 1
        if trace:
            prev = trace[-1]
            improvement = (prev - epoch_loss) / max(abs(prev), 1e-12)
            streak = streak + 1 if improvement < convergence.rel_tol else 0
        trace.append(epoch_loss)
        if streak >= convergence.patience:
            converged = True
            break
    final = ModelParams(arch, flat)
    _, final_grad = backward(final, data, graph)
    return TrainResult(final, trace, final_grad, epochs_run, converged)


def save_params(params: ModelParams, path):
    """JSON vector with a layer-layout header; round-trips exactly."""
    payload = {
        "arch": {
            "node_count": params.arch.node_count,
            "t_in": params.arch.t_in,
            "t_out": params.arch.t_out,
            "feature_count": params.arch.feature_count,
            "hidden_graph": params.arch.hidden_graph,
            "hidden_mix": params.arch.hidden_mix,
        },
        "layer_shapes": [list(s) for s in params.arch.layer_shapes()],
        "flat": params.flat.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_params(path) -> ModelParams:
    with open(path) as fh:
        payload = json.load(fh)
    arch = ArchitectureConfig(**payload["arch"])
    expected = [list(s) for s in arch.layer_shapes()]
    if payload["layer_shapes"] != expected:
        raise ShapeError("layer layout in file does not match architecture header")
    return ModelParams(arch, np.array(payload["flat"], dtype=np.float64))
