"""Weighted spatial-temporal graphs over the vehicles of a scene."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# floor on inter-vehicle distance before taking the reciprocal (meters)
DISTANCE_FLOOR = 1e-3


class AdjacencyScheme(str, Enum):
    RECIPROCAL = "reciprocal"
    DISTANCE = "distance"
    ONES = "ones"


class DistanceMetric(str, Enum):
    EUCLIDEAN = "euclidean"
    LONGITUDINAL = "longitudinal"


@dataclass
class AdjacencyStack:
    raw: np.ndarray         # (T, N, N)
    normalized: np.ndarray  # (T, N, N)
    scheme: AdjacencyScheme


@dataclass
class SceneGraph:
    vertices: np.ndarray    # (C, T, N)
    adjacency: AdjacencyStack


def pairwise_distances(positions: np.ndarray, metric: DistanceMetric | str = DistanceMetric.EUCLIDEAN) -> np.ndarray:
    """Distances between the columns of a (2, N) array of (x, y) positions."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] != 2:
        raise ValueError(f"positions must have shape (2, N), got {pos.shape}")
    if DistanceMetric(metric) is DistanceMetric.LONGITUDINAL:
        return np.abs(pos[1][:, None] - pos[1][None, :])
    diff = pos[:, :, None] - pos[:, None, :]
    return np.sqrt(diff[0] ** 2 + diff[1] ** 2)


def build_weighted_adjacency(positions: np.ndarray, scheme: AdjacencyScheme | str = AdjacencyScheme.RECIPROCAL,
                             metric: DistanceMetric | str = DistanceMetric.EUCLIDEAN,
                             eps: float = DISTANCE_FLOOR) -> np.ndarray:
    """Edge weights between every pair of vehicles; the diagonal is zero."""
    scheme = AdjacencyScheme(scheme)
    d = pairwise_distances(positions, metric)
    n = d.shape[0]
    if scheme is AdjacencyScheme.RECIPROCAL:
        a = 1.0 / np.maximum(d, eps)
    elif scheme is AdjacencyScheme.DISTANCE:
        a = d.copy()
    else:
        a = np.ones((n, n))
    np.fill_diagonal(a, 0.0)
    return a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric normalization D^-1/2 (A + I) D^-1/2 with D the degree of A + I.

    Works on a single (N, N) matrix or a stack (..., N, N).
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    a_hat = a + np.eye(n)
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=-1))
    return inv_sqrt[..., :, None] * a_hat * inv_sqrt[..., None, :]


def adjacency_stack(past: np.ndarray, scheme: AdjacencyScheme | str = AdjacencyScheme.RECIPROCAL,
                    metric: DistanceMetric | str = DistanceMetric.EUCLIDEAN) -> AdjacencyStack:
    """Per-frame raw and normalized adjacency for a (2, T, N) position tensor."""
    past = np.asarray(past, dtype=np.float64)
    raw = np.stack([build_weighted_adjacency(past[:, t, :], scheme, metric) for t in range(past.shape[1])])
    return AdjacencyStack(raw=raw, normalized=normalize_adjacency(raw), scheme=AdjacencyScheme(scheme))


def build_scene_graph(segment, scheme: AdjacencyScheme | str = AdjacencyScheme.RECIPROCAL,
                      metric: DistanceMetric | str = DistanceMetric.EUCLIDEAN) -> SceneGraph:
    past = np.asarray(segment.past, dtype=np.float64)
    return SceneGraph(vertices=past, adjacency=adjacency_stack(past, scheme, metric))


def adjacency_to_json(stack: AdjacencyStack) -> dict:
    return {
        "scheme": stack.scheme.value,
        "shape": list(stack.raw.shape),
        "raw": stack.raw.ravel().tolist(),
        "normalized": stack.normalized.ravel().tolist(),
    }
