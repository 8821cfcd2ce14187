"""Partition FFN intermediate neurons into equal-size experts.

Balanced k-means on up-projection columns (gate columns for the gated FFN),
plus a random-chop baseline, and the weight permutation that makes each
expert's neurons contiguous so the sparse execution path can gather whole
slabs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import FfnLayer, GluFfnLayer
from .numerics import Rng


@dataclass
class ExpertPartition:
    layer_index: int
    n_experts: int
    expert_size: int
    assignment: np.ndarray   # neuron index -> expert id
    permutation: np.ndarray  # new position -> old neuron index
    method: str              # kmeans | random
    sse_history: list = field(default_factory=list)

    def validate(self) -> "ExpertPartition":
        d = self.assignment.shape[0]
        if d != self.n_experts * self.expert_size:
            raise ValueError("assignment length != n_experts * expert_size")
        counts = np.bincount(self.assignment, minlength=self.n_experts)
        if not (counts == self.expert_size).all():
            raise ValueError(f"unbalanced experts: {counts}")
        if not (np.sort(self.permutation) == np.arange(d)).all():
            raise ValueError("permutation is not a bijection")
        ordered = self.assignment[self.permutation]
        expected = np.repeat(np.arange(self.n_experts), self.expert_size)
        if not (ordered == expected).all():
            raise ValueError("permutation does not make experts contiguous")
        return self


def _permutation_from_assignment(assignment: np.ndarray) -> np.ndarray:
    # stable sort keeps neurons ordered by index within each expert
    return np.argsort(assignment, kind="stable")


def partition_sse(features: np.ndarray, assignment: np.ndarray, n_experts: int) -> float:
    """Within-cluster sum of squares, centroids = cluster means."""
    sse = 0.0
    for e in range(n_experts):
        members = features[assignment == e]
        c = members.mean(axis=0)
        sse += float(((members - c) ** 2).sum())
    return sse


def _greedy_balanced_assign(dist: np.ndarray, capacity: int) -> np.ndarray:
    """Assign each neuron to a centroid, cheapest (neuron, centroid) pairs first.

    Stable sort on the flattened distance matrix breaks ties by lower neuron
    index, then lower centroid index.
    """
    d_ffn, n_experts = dist.shape
    order = np.argsort(dist.ravel(), kind="stable")
    assignment = np.full(d_ffn, -1, dtype=np.int64)
    room = np.full(n_experts, capacity, dtype=np.int64)
    placed = 0
    for flat in order:
        neuron, expert = divmod(int(flat), n_experts)
        if assignment[neuron] >= 0 or room[expert] == 0:
            continue
        assignment[neuron] = expert
        room[expert] -= 1
        placed += 1
        if placed == d_ffn:
            break
    return assignment


def group_experts_kmeans(
    features: np.ndarray,
    n_experts: int,
    rng: Rng,
    max_iters: int = 50,
    layer_index: int = 0,
) -> ExpertPartition:
    """Capacity-constrained k-means: exactly d_ffn / n_experts neurons per expert.

    Centroids start at n_experts distinct sampled neurons; each iteration
    greedily assigns by ascending squared distance under the capacity, then
    recomputes centroids. Stops when the assignment repeats, the iteration
    cap hits, or a greedy step would raise the objective (keeps SSE history
    non-increasing).
    """
    features = np.asarray(features, dtype=np.float64)
    d_ffn = features.shape[0]
    if d_ffn % n_experts != 0:
        raise ValueError(f"n_experts {n_experts} does not divide d_ffn {d_ffn}")
    capacity = d_ffn // n_experts
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    seeds = rng.choice(d_ffn, n_experts, replace=False)
    centroids = features[np.sort(seeds)].copy()
    prev_assignment = None
    best_assignment = None
    history: list[float] = []

    sq_feat = (features * features).sum(axis=1, keepdims=True)
    for _ in range(max_iters):
        dist = sq_feat - 2.0 * features @ centroids.T + (centroids * centroids).sum(axis=1)
        np.maximum(dist, 0.0, out=dist)
        assignment = _greedy_balanced_assign(dist, capacity)
        if prev_assignment is not None and (assignment == prev_assignment).all():
            break
        sse = partition_sse(features, assignment, n_experts)
        if history and sse > history[-1] + 1e-12 * max(1.0, history[-1]):
            break  # greedy step would regress; keep the best assignment
        history.append(sse)
        best_assignment = assignment
        prev_assignment = assignment
        for e in range(n_experts):
            centroids[e] = features[assignment == e].mean(axis=0)

    return ExpertPartition(
        layer_index=layer_index,
        n_experts=n_experts,
        expert_size=capacity,
        assignment=best_assignment,
        permutation=_permutation_from_assignment(best_assignment),
        method="kmeans",
        sse_history=history,
    ).validate()


def group_experts_random(
    d_ffn: int, n_experts: int, rng: Rng, layer_index: int = 0
) -> ExpertPartition:
    """Uniform random permutation chopped into consecutive equal blocks."""
    if d_ffn % n_experts != 0:
        raise ValueError(f"n_experts {n_experts} does not divide d_ffn {d_ffn}")
    capacity = d_ffn // n_experts
    perm = rng.permutation(d_ffn).astype(np.int64)
    assignment = np.empty(d_ffn, dtype=np.int64)
    assignment[perm] = np.arange(d_ffn) // capacity
    return ExpertPartition(
        layer_index=layer_index,
        n_experts=n_experts,
        expert_size=capacity,
        assignment=assignment,
        permutation=perm,
        method="random",
    ).validate()


def apply_partition(layer, p: ExpertPartition, inverse: bool = False):
    """Reorder neurons so each expert's slice is contiguous (pure permutation).

    With inverse=True the permutation is undone and the partition tag cleared;
    round-tripping restores the original weights bit for bit.
    """
    perm = np.argsort(p.permutation) if inverse else p.permutation
    tag = None if inverse else p
    if isinstance(layer, FfnLayer):
        if layer.W1.shape[1] != perm.shape[0]:
            raise ValueError(f"permutation length {perm.shape[0]} != d_ffn {layer.W1.shape[1]}")
        return FfnLayer(
            W1=np.ascontiguousarray(layer.W1[:, perm]),
            b1=np.ascontiguousarray(layer.b1[perm]),
            W2=np.ascontiguousarray(layer.W2[perm, :]),
            b2=layer.b2.copy(),
            activation=layer.activation,
            partition=tag,
        )
    if isinstance(layer, GluFfnLayer):
        if layer.W_gate.shape[1] != perm.shape[0]:
            raise ValueError(f"permutation length {perm.shape[0]} != d_ffn {layer.W_gate.shape[1]}")
        return GluFfnLayer(
            W_gate=np.ascontiguousarray(layer.W_gate[:, perm]),
            W_up=np.ascontiguousarray(layer.W_up[:, perm]),
            W_down=np.ascontiguousarray(layer.W_down[perm, :]),
            partition=tag,
        )
    raise TypeError(f"not an FFN layer: {type(layer).__name__}")
