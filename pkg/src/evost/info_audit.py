"""Plug-in histogram entropy and mutual information for audit reports.

Everything here is built from integer bin counts so that the identities
I(x, x) = H(x) and I >= 0 hold exactly, not just approximately. Domains
are condensed to pooled scalar summaries before estimation; the joint of
"one domain vs. everything before it" is kept 2-dimensional by projecting
the prior block onto its first principal axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

BINNINGS = ("equal-frequency", "equal-width")


@dataclass(frozen=True)
class HistogramEstimator:
    bin_count: int = 16
    binning: str = "equal-frequency"

    def __post_init__(self):
        if self.bin_count < 2:
            raise ValueError("bin_count must be >= 2")
        if self.binning not in BINNINGS:
            raise ValueError(f"unknown binning {self.binning!r}, pick one of {BINNINGS}")

    def edges(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size == 0:
            raise ValueError("no samples")
        lo, hi = float(x.min()), float(x.max())
        if lo == hi:
            return np.array([lo, hi])
        if self.binning == "equal-width":
            return np.linspace(lo, hi, self.bin_count + 1)
        edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, self.bin_count + 1)))
        if edges.size < 2:
            return np.array([lo, hi])
        return edges


def _require_samples(x, estimator):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < estimator.bin_count:
        raise ValueError(f"need at least bin_count={estimator.bin_count} samples, got {x.size}")
    return x


def _digitize(x, edges) -> np.ndarray:
    # interior edges only; everything at or past the last edge lands in the top bin
    return np.searchsorted(edges[1:-1], x, side="right")


def _entropy_from_counts(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(np.sum(-(p * np.log(p))))


def entropy(samples, estimator: HistogramEstimator = HistogramEstimator()) -> float:
    """Plug-in entropy in nats."""
    x = _require_samples(samples, estimator)
    edges = estimator.edges(x)
    counts = np.bincount(_digitize(x, edges), minlength=len(edges) - 1)
    return _entropy_from_counts(counts, x.size)


def _joint_counts(x, y, estimator):
    ex, ey = estimator.edges(x), estimator.edges(y)
    ix, iy = _digitize(x, ex), _digitize(y, ey)
    kx, ky = len(ex) - 1, len(ey) - 1
    joint = np.bincount(ix * ky + iy, minlength=kx * ky).reshape(kx, ky)
    return joint


def mutual_information(x, y, estimator: HistogramEstimator = HistogramEstimator()) -> float:
    """Plug-in mutual information in nats, nonnegative by construction."""
    x = _require_samples(x, estimator)
    y = _require_samples(y, estimator)
    if x.size != y.size:
        raise ValueError(f"sample lengths differ: {x.size} vs {y.size}")
    joint = _joint_counts(x, y, estimator)
    n = x.size
    pj = joint / n
    px = joint.sum(axis=1) / n
    py = joint.sum(axis=0) / n
    nz = pj > 0
    px_b = np.broadcast_to(px[:, None], pj.shape)
    py_b = np.broadcast_to(py[None, :], pj.shape)
    terms = pj[nz] * (np.log(pj[nz]) - np.log(px_b[nz]) - np.log(py_b[nz]))
    return max(float(np.sum(terms)), 0.0)


def conditional_entropy(x, y, estimator: HistogramEstimator = HistogramEstimator()) -> float:
    """H(x | y) = H(x, y) - H(y) on the shared joint histogram."""
    x = _require_samples(x, estimator)
    y = _require_samples(y, estimator)
    if x.size != y.size:
        raise ValueError(f"sample lengths differ: {x.size} vs {y.size}")
    joint = _joint_counts(x, y, estimator)
    n = x.size
    return _entropy_from_counts(joint.ravel(), n) - _entropy_from_counts(joint.sum(axis=0), n)


def domain_summary(series) -> np.ndarray:
    """Pooled scalar summary of one domain: mean over nodes per timestep."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError("series must be (timesteps, nodes)")
    return series.mean(axis=1)


def _first_principal_projection(columns: np.ndarray) -> np.ndarray:
    centered = columns - columns.mean(axis=0)
    if centered.shape[1] == 1:
        return centered[:, 0]
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[0]


def conditional_entropy_chain(summaries, estimator: HistogramEstimator = HistogramEstimator()):
    """[H(X_1), H(X_2 | X_1), H(X_3 | X_1, X_2), ...] over scalar summaries."""
    summaries = [np.asarray(s, dtype=np.float64).ravel() for s in summaries]
    if len(summaries) < 2:
        raise ValueError("need at least 2 domains for a conditional chain")
    chain = [entropy(summaries[0], estimator)]
    for i in range(1, len(summaries)):
        prior = np.column_stack(summaries[:i])
        proj = _first_principal_projection(prior)
        chain.append(conditional_entropy(summaries[i], proj, estimator))
    return chain


def ib_objective(i_xz: float, i_zy: float, beta: float) -> float:
    """Information-bottleneck value I(X;Z) - beta * I(Z;Y)."""
    if i_xz < 0 or i_zy < 0:
        raise ValueError("mutual information inputs must be nonnegative")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return i_xz - beta * i_zy


@dataclass
class EntropyReport:
    per_domain: dict  # group_id -> H
    pairwise_mi: dict  # "a|b" -> I
    conditional_chain: list
    ib_value: float | None = None

    def to_dict(self) -> dict:
        return {
            "per_domain_entropy": self.per_domain,
            "pairwise_mi": self.pairwise_mi,
            "conditional_chain": self.conditional_chain,
            "ib_value": self.ib_value,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def build_entropy_report(named_series, estimator: HistogramEstimator = HistogramEstimator(),
                         ib: tuple | None = None) -> EntropyReport:
    """Audit a family of domains given as (group_id, series) pairs.

    ``ib`` optionally carries externally supplied (I_xz, I_zy, beta) for
    the bottleneck value; the latent representation itself is never
    materialized here.
    """
    ids = [gid for gid, _ in named_series]
    summaries = [domain_summary(series) for _, series in named_series]
    per_domain = {gid: entropy(s, estimator) for gid, s in zip(ids, summaries)}
    pairwise = {}
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            pairwise[f"{ids[i]}|{ids[j]}"] = mutual_information(summaries[i], summaries[j], estimator)
    chain = conditional_entropy_chain(summaries, estimator) if len(ids) >= 2 else [per_domain[ids[0]]]
    ib_value = ib_objective(*ib) if ib is not None else None
    return EntropyReport(per_domain, pairwise, chain, ib_value)
