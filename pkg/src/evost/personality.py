"""Linear domain-signature extractor trained with a contrastive margin loss.

Sample windows are flattened and mapped by a single weight matrix; a
group's signature is the mean of its sample embeddings. Training pulls
same-domain sample pairs together and pushes cross-domain pairs apart
until their distance clears the margin. The extractor can be
re-instantiated (warm started) when an unrelated domain shows up, so the
old weights survive as the starting point for adaptation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import DivergenceError, OptimizerState, WindowBatch, adam_step
from .datagen import DomainGroup


@dataclass
class Extractor:
    weights: np.ndarray  # (embed_dim, input_dim)
    margin: float = 1.0
    generation: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.margin <= 0:
            raise ValueError("margin must be positive")


def init_extractor(input_dim: int, embed_dim: int = 16, margin: float = 1.0, seed: int = 0) -> Extractor:
    if embed_dim < 1 or input_dim < 1:
        raise ValueError("embed_dim and input_dim must be >= 1")
    rng = np.random.default_rng([seed, 21])
    weights = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(embed_dim, input_dim))
    return Extractor(weights, margin, 0)


def distance(a, b, aggregate: str = "mean") -> float:
    """Squared-difference distance between two vectors (mean over elements).

    ``aggregate="sum"`` switches to the plain sum of squares for
    sensitivity studies.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vectors differ in length: {a.shape} vs {b.shape}")
    d = a - b
    sq = float(d @ d)
    if aggregate == "mean":
        return sq / a.size
    if aggregate == "sum":
        return sq
    raise ValueError(f"unknown aggregate {aggregate!r}")


@dataclass
class DomainEmbedding:
    group_id: str
    vector: np.ndarray
    sample_count: int


def flatten_windows(batch: WindowBatch) -> np.ndarray:
    """(batch, t_in, node, feature) -> (batch, t_in * node * feature)."""
    return batch.inputs.reshape(batch.inputs.shape[0], -1)


def embed(extractor: Extractor, group: DomainGroup) -> DomainEmbedding:
    x = flatten_windows(group.train)
    if x.shape[0] == 0:
        raise ValueError(f"group {group.group_id} has no training windows")
    if x.shape[1] != extractor.weights.shape[1]:
        raise ValueError(
            f"window dimension {x.shape[1]} != extractor input dimension {extractor.weights.shape[1]}"
        )
    vector = (x @ extractor.weights.T).mean(axis=0)
    return DomainEmbedding(group.group_id, vector, x.shape[0])


def contrastive_loss(e_i, e_j, same_domain: int, m: float) -> float:
    if m <= 0:
        raise ValueError("margin must be positive")
    d = distance(e_i, e_j)
    return float(same_domain * d + (1 - same_domain) * max(0.0, m - d))


@dataclass(frozen=True)
class PairSamplingConfig:
    pairs_per_epoch: int = 256
    positive_fraction: float = 0.5
    learning_rate: float = 0.01
    seed: int = 0


def _sample_pairs(feats, config: PairSamplingConfig, rng: np.random.Generator):
    """Flattened-sample pairs with same-domain labels, vectorized per epoch."""
    k = len(feats)
    multi = [g for g in range(k) if feats[g].shape[0] >= 2]
    xi, xj, labels = [], [], []
    for _ in range(config.pairs_per_epoch):
        positive = k < 2 or (bool(multi) and rng.random() < config.positive_fraction)
        if positive and multi:
            g = multi[rng.integers(len(multi))]
            i, j = rng.choice(feats[g].shape[0], size=2, replace=False)
            xi.append(feats[g][i])
            xj.append(feats[g][j])
            labels.append(1.0)
        else:
            ga, gb = rng.choice(k, size=2, replace=False)
            xi.append(feats[ga][rng.integers(feats[ga].shape[0])])
            xj.append(feats[gb][rng.integers(feats[gb].shape[0])])
            labels.append(0.0)
    return np.array(xi), np.array(xj), np.array(labels)


def extractor_loss_and_grad(weights: np.ndarray, xi, xj, labels, margin: float):
    """Mean contrastive loss over pairs and its exact gradient in W.

    With e = W (x_i - x_j) and D = ||e||^2 / E the chain rule gives
    dD/dW = (2 / E) e (x_i - x_j)^T; the hinge contributes -dD/dW while
    D < m and nothing at or past the margin.
    """
    delta = xi - xj  # (P, D)
    e = delta @ weights.T  # (P, E)
    embed_dim = weights.shape[0]
    d = (e * e).sum(axis=1) / embed_dim
    hinge = np.maximum(0.0, margin - d)
    losses = labels * d + (1.0 - labels) * hinge
    loss = float(losses.mean())
    coeff = labels - (1.0 - labels) * (d < margin)  # dLoss/dD per pair
    weighted = e * (coeff / len(d))[:, None]
    grad = (2.0 / embed_dim) * weighted.T @ delta
    return loss, grad


def train_extractor(
    extractor: Extractor,
    groups,
    pairs: PairSamplingConfig = PairSamplingConfig(),
    epochs: int = 50,
):
    """Returns a new trained Extractor and the per-epoch loss trace."""
    feats = [flatten_windows(g.train) for g in groups]
    if not feats:
        raise ValueError("no groups to train on")
    if len(feats) < 2 and all(f.shape[0] < 2 for f in feats):
        raise ValueError("a single one-sample group cannot form any pair")
    rng = np.random.default_rng([pairs.seed, 31])
    weights = extractor.weights.copy()
    opt = OptimizerState.fresh(weights.size, pairs.learning_rate)
    trace = []
    for _ in range(epochs):
        xi, xj, labels = _sample_pairs(feats, pairs, rng)
        loss, grad = extractor_loss_and_grad(weights, xi, xj, labels, extractor.margin)
        if not np.isfinite(loss):
            raise DivergenceError("extractor loss is not finite", trace)
        flat, opt = adam_step(weights.ravel(), grad.ravel(), opt)
        weights = flat.reshape(weights.shape)
        trace.append(loss)
    return Extractor(weights, extractor.margin, extractor.generation), trace


def reinstantiate(extractor: Extractor) -> Extractor:
    """Warm-started copy with the generation counter bumped."""
    return Extractor(extractor.weights.copy(), extractor.margin, extractor.generation + 1)
