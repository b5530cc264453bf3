"""Turning influence scores into training weights or selection sets.

Scores arrive in the influence module's convention (positive = upweighting
hurts the matching objective), so the weighting pipeline negates them before
the softmax: beneficial instances end up with the large weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import WeightedDataset
from .errors import ContractError

POLICY_KINDS = ("softmax", "uniform", "top-k", "prune")


@dataclass(frozen=True)
class WeightPolicy:
    kind: str = "softmax"
    tau: float = 1.0
    k: int = 1
    keep_frac: float = 0.9

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ContractError(f"unknown weight policy kind {self.kind!r}")
        if self.kind == "softmax" and not self.tau > 0:
            raise ContractError("softmax temperature must be positive")
        if self.kind == "top-k" and self.k < 1:
            raise ContractError("top-k needs k >= 1")
        if self.kind == "prune" and not 0.0 < self.keep_frac <= 1.0:
            raise ContractError("keep_frac must lie in (0, 1]")


def _check_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ContractError("scores must form a non-empty vector")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    return s


def softmax_weights(scores, tau: float) -> np.ndarray:
    """exp(s_i/tau) / sum, with max-subtraction for stability.

    The shifted exponent is floored at -700 so extreme score gaps saturate
    to a tiny positive weight instead of underflowing to exact zero.
    """
    s = _check_scores(scores)
    if not tau > 0:
        raise ContractError("softmax temperature must be positive")
    z = s / tau
    e = np.exp(np.maximum(z - z.max(), -700.0))
    return e / e.sum()


def standardize_scores(scores) -> np.ndarray:
    """Zero mean, unit variance; a constant vector maps to all zeros."""
    s = _check_scores(scores)
    std = s.std()
    if std == 0.0:
        return np.zeros_like(s)
    return (s - s.mean()) / std


def weights_from_influence(scores, tau: float) -> np.ndarray:
    """Full pipeline: negate, standardize, softmax at temperature tau."""
    return softmax_weights(standardize_scores(-_check_scores(scores)), tau)


def _ranked(scores: np.ndarray) -> np.ndarray:
    # descending score, ties broken by smaller index (lexsort: last key wins)
    return np.lexsort((np.arange(scores.size), -scores))


def select_top_k(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, ascending index order."""
    s = _check_scores(scores)
    if not 1 <= k <= s.size:
        raise ContractError(f"k must lie in [1, {s.size}]")
    return np.sort(_ranked(s)[:k])


def prune_fraction(scores, keep_frac: float) -> np.ndarray:
    """Indices of the top ceil(keep_frac * N) scores."""
    s = _check_scores(scores)
    if not 0.0 < keep_frac <= 1.0:
        raise ContractError("keep_frac must lie in (0, 1]")
    return select_top_k(s, math.ceil(keep_frac * s.size))


def herding_select(ds: WeightedDataset, features: np.ndarray, k_per_class: int) -> np.ndarray:
    """Greedy per-class herding: repeatedly add the instance that brings the
    running mean of the selection closest to the class mean."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] != ds.n:
        raise ContractError("need one feature row per instance")
    if k_per_class < 1:
        raise ContractError("k_per_class must be at least 1")
    chosen = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.y == c)
        if members.size < k_per_class:
            raise ContractError(
                f"class {c} has {members.size} instances, fewer than k_per_class={k_per_class}"
            )
        mu = feats[members].mean(axis=0)
        picked = []
        acc = np.zeros_like(mu)
        for t in range(1, k_per_class + 1):
            remaining = np.array([j for j in members if j not in picked])
            cand = (acc + feats[remaining]) / t
            d = np.linalg.norm(cand - mu, axis=1)
            best = remaining[int(np.argmin(d))]
            picked.append(best)
            acc = acc + feats[best]
        chosen.extend(picked)
    return np.sort(np.array(chosen, dtype=np.intp))


def restrict_weights(w: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Global weights cut down to a minibatch, rescaled by N/|batch| so the
    weighted batch loss is an unbiased stand-in for the full weighted loss."""
    w = np.asarray(w, dtype=np.float64)
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size == 0:
        raise ContractError("empty minibatch")
    return w[batch] * (w.size / batch.size)


def apply_policy(policy: WeightPolicy, scores) -> np.ndarray:
    """Full-length weight vector for a policy given raw influence scores.

    Selection policies place uniform mass on the kept set and zero outside.
    """
    s = _check_scores(scores)
    n = s.size
    if policy.kind == "uniform":
        return np.full(n, 1.0 / n)
    if policy.kind == "softmax":
        return weights_from_influence(s, policy.tau)
    if policy.kind == "top-k":
        if policy.k > n:
            raise ContractError(f"k={policy.k} exceeds N={n}")
        kept = select_top_k(-s, policy.k)
    else:
        kept = prune_fraction(-s, policy.keep_frac)
    w = np.zeros(n)
    w[kept] = 1.0 / kept.size
    return w
