"""Confidence-gated top-k routing and collaborative inference.

Each sample runs the edge generalist first. If the maximum softmax
probability clears the threshold, the edge argmax is final. Otherwise
the top-k classes are mapped through the partition map to a domain,
and the expert covering exactly that domain re-predicts the sample over
the full label space.

The gate threshold only selects between two per-sample outcomes that do
not themselves depend on it, so :class:`RoutingPrimitives` precomputes
both once per trace set and sweeps reuse them across thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import CoinferError
from .partition import DomainSet, PartitionMap, domain_of_topk
from .trace import (
    PredictionTrace,
    TraceSet,
    confidence,
    softmax_matrix,
    softmax_row,
    topk_indices,
    topk_matrix,
)

__all__ = [
    "Local",
    "Offload",
    "RoutingDecision",
    "RoutingPrimitives",
    "CollabOutcome",
    "route_sample",
    "refine",
    "gate_signals",
    "compute_routing_primitives",
    "apply_gate",
    "collaborative_infer",
    "offload_proportion_curve",
]


@dataclass(frozen=True)
class Local:
    """Edge prediction accepted by the confidence gate."""

    predicted: int
    confidence: float


@dataclass(frozen=True)
class Offload:
    """Gate rejection: the sample goes to the expert covering ``domain``."""

    domain: DomainSet
    topk: tuple[int, ...]
    confidence: float


RoutingDecision = Local | Offload


def _check_gate_params(threshold: float, k: int, num_classes: int):
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"confidence threshold must lie in [0,1], got {threshold}")
    if not (isinstance(k, int) and 1 <= k <= num_classes):
        raise ValueError(f"k must be an integer in [1, {num_classes}], got {k!r}")


def route_sample(
    logits_row: np.ndarray, threshold: float, k: int, pm: PartitionMap
) -> RoutingDecision:
    """Gate one sample: local argmax if confident, else a routed offload."""
    row = np.asarray(logits_row)
    _check_gate_params(threshold, k, row.shape[-1])
    probs = softmax_row(row)
    conf = confidence(probs)
    if conf >= threshold:
        return Local(predicted=int(np.argmax(probs)), confidence=conf)
    top = topk_indices(probs, k)
    return Offload(
        domain=domain_of_topk(pm, top),
        topk=tuple(int(c) for c in top),
        confidence=conf,
    )


def refine(
    decision: Offload,
    expert_row: np.ndarray,
    pm: PartitionMap | None = None,
    mask_to_domain: bool = False,
) -> int:
    """Expert prediction for one offloaded sample.

    By default the argmax over the full label space (experts are
    specialized by training, not by output masking). With
    ``mask_to_domain`` the argmax is restricted to classes inside the
    routed domain, which needs the partition map.
    """
    row = np.asarray(expert_row, dtype=np.float64)
    if not mask_to_domain:
        return int(np.argmax(row))
    if pm is None:
        raise ValueError("mask_to_domain needs the partition map")
    allowed = pm.classes_in(decision.domain)
    return int(allowed[np.argmax(row[allowed])])


@dataclass(frozen=True, eq=False)
class RoutingPrimitives:
    """Threshold-independent per-sample routing state.

    ``domains[i]`` is where sample i would be routed if offloaded and
    ``refined[i]`` the expert prediction it would receive; the gate only
    chooses between ``local_predictions[i]`` and ``refined[i]``.
    """

    k: int
    confidences: np.ndarray  # (M,) float64 max softmax probability
    local_predictions: np.ndarray  # (M,) int64 edge argmax
    topk: np.ndarray  # (M, k) int64
    domains: tuple[DomainSet, ...]  # (M,)
    refined: np.ndarray  # (M,) int64 expert prediction per sample

    @property
    def num_samples(self) -> int:
        return self.confidences.shape[0]


def gate_signals(
    edge_trace: PredictionTrace, pm: PartitionMap, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[DomainSet, ...]]:
    """Edge-side routing signals: confidences, argmax, top-k, routed domain.

    Needs no expert traces, so the network client can run it locally and
    leave refinement to the server.
    """
    _check_gate_params(0.0, k, edge_trace.num_classes)
    probs = softmax_matrix(edge_trace.logits)
    conf = probs.max(axis=1)
    top = topk_matrix(probs, k).astype(np.int64)
    local_pred = top[:, 0].copy()

    parts = np.sort(pm.assignment[top], axis=1)
    domain_cache: dict[tuple[int, ...], DomainSet] = {}
    domains: list[DomainSet] = []
    for row in parts.tolist():
        key = tuple(dict.fromkeys(row))
        dom = domain_cache.get(key)
        if dom is None:
            dom = domain_cache[key] = DomainSet(key)
        domains.append(dom)
    return conf, local_pred, top, tuple(domains)


def compute_routing_primitives(
    ts: TraceSet, pm: PartitionMap, k: int, mask_to_domain: bool = False
) -> RoutingPrimitives:
    """Evaluate every sample's local and offloaded outcome once."""
    ts.validate_for(pm, k)
    conf, local_pred, top, domains = gate_signals(ts.edge, pm, k)
    rows_by_domain: dict[DomainSet, list[int]] = {}
    for i, dom in enumerate(domains):
        rows_by_domain.setdefault(dom, []).append(i)

    refined = np.empty(ts.num_samples, dtype=np.int64)
    for dom, rows in rows_by_domain.items():
        expert = ts.experts.get(dom)
        if expert is None:
            raise CoinferError(f"no expert trace for routed domain {dom.label}")
        idx = np.asarray(rows)
        rows_logits = expert.logits[idx]
        if mask_to_domain:
            allowed = pm.classes_in(dom)
            refined[idx] = allowed[rows_logits[:, allowed].argmax(axis=1)]
        else:
            refined[idx] = rows_logits.argmax(axis=1)

    return RoutingPrimitives(
        k=k,
        confidences=conf,
        local_predictions=local_pred,
        topk=top,
        domains=domains,
        refined=refined,
    )


@dataclass(frozen=True, eq=False)
class CollabOutcome:
    """Result of collaborative inference over one trace set at one threshold."""

    threshold: float
    k: int
    predictions: np.ndarray  # (M,) int64 final prediction per sample
    offloaded: np.ndarray  # (M,) bool
    confidences: np.ndarray  # (M,) float64
    topk: np.ndarray  # (M, k) int64
    domains: tuple[DomainSet, ...]
    accuracy: float
    offload_count: int
    offload_proportion: float
    histogram: Mapping[DomainSet, int]  # offloads per routed domain

    def decision_for(self, i: int) -> RoutingDecision:
        if self.offloaded[i]:
            return Offload(
                domain=self.domains[i],
                topk=tuple(int(c) for c in self.topk[i]),
                confidence=float(self.confidences[i]),
            )
        return Local(
            predicted=int(self.predictions[i]), confidence=float(self.confidences[i])
        )

    @property
    def decisions(self) -> Iterator[RoutingDecision]:
        return (self.decision_for(i) for i in range(self.predictions.shape[0]))


def apply_gate(
    primitives: RoutingPrimitives, labels: np.ndarray, threshold: float
) -> CollabOutcome:
    """Select each sample's outcome by the confidence gate (conf >= tau stays local)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"confidence threshold must lie in [0,1], got {threshold}")
    offloaded = primitives.confidences < threshold
    predictions = np.where(offloaded, primitives.refined, primitives.local_predictions)
    m = primitives.num_samples
    count = int(offloaded.sum())
    hist: dict[DomainSet, int] = {}
    for i in np.flatnonzero(offloaded):
        dom = primitives.domains[i]
        hist[dom] = hist.get(dom, 0) + 1
    return CollabOutcome(
        threshold=threshold,
        k=primitives.k,
        predictions=predictions,
        offloaded=offloaded,
        confidences=primitives.confidences,
        topk=primitives.topk,
        domains=primitives.domains,
        accuracy=float((predictions == labels).sum()) / m,
        offload_count=count,
        offload_proportion=count / m,
        histogram=hist,
    )


def collaborative_infer(
    ts: TraceSet,
    pm: PartitionMap,
    threshold: float,
    k: int,
    mask_to_domain: bool = False,
    primitives: RoutingPrimitives | None = None,
) -> CollabOutcome:
    """Run the full collaborative pipeline over a trace set.

    ``primitives`` may carry the cached threshold-independent state from
    :func:`compute_routing_primitives` when sweeping many thresholds.
    """
    _check_gate_params(threshold, k, ts.num_classes)
    if primitives is None:
        primitives = compute_routing_primitives(ts, pm, k, mask_to_domain)
    elif primitives.k != k:
        raise ValueError(f"cached primitives were built for k={primitives.k}, not k={k}")
    return apply_gate(primitives, ts.labels, threshold)


def offload_proportion_curve(
    edge_trace: PredictionTrace, thresholds: Sequence[float]
) -> list[tuple[float, float]]:
    """Exact offload proportion (fraction with conf < tau) per threshold."""
    for t in thresholds:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"confidence threshold must lie in [0,1], got {t}")
    conf = softmax_matrix(edge_trace.logits).max(axis=1)
    m = edge_trace.num_samples
    return [(float(t), float((conf < t).sum()) / m) for t in thresholds]
