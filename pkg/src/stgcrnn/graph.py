"""Station graphs and the operators built on them.

Everything here is plain numpy: graph operators are constants from the
point of view of training, so they never enter the computation record.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import shortest_path

from . import diffnum as dn
from .errors import (DegenerateGraphError, DimensionError, DivisionDomainError,
                     EstimationError, IsolatedNodeError)

LAPLACIAN_KINDS = ("combinatorial", "sym_normalized", "rw_normalized")
TRANSITION_MODES = ("random_walk", "dual_random_walk")
CHEB_RECURRENCES = ("standard", "as_printed")

DEFAULT_K = 2
DEFAULT_EPSILON = 0.01
GRAPH_FORMAT = "stgcrnn-graph"
GRAPH_VERSION = 1


@dataclass
class StationGraph:
    node_ids: list[str]
    dist: np.ndarray
    W: np.ndarray
    coords: np.ndarray | None = None
    epsilon: float = DEFAULT_EPSILON

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        """Undirected edge count (nonzero entries above the diagonal)."""
        return int(np.count_nonzero(np.triu(self.W, 1)))

    def degrees(self) -> np.ndarray:
        return self.W.sum(axis=1)

    def hop_distances(self) -> np.ndarray:
        return hop_distances(self.W)

    def to_json(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "node_ids": list(self.node_ids),
            "epsilon": self.epsilon,
            "W": self.W.tolist(),
            "dist_km": self.dist.tolist(),
            "coords_m": None if self.coords is None else np.asarray(self.coords).tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StationGraph":
        if doc.get("format") != GRAPH_FORMAT:
            raise ValueError(f"not a graph document (format={doc.get('format')!r})")
        W = np.asarray(doc["W"], dtype=float)
        dist = np.asarray(doc.get("dist_km", np.zeros_like(W)), dtype=float)
        coords = doc.get("coords_m")
        return cls(list(doc["node_ids"]), dist, W, None if coords is None else np.asarray(coords, dtype=float),
                   float(doc.get("epsilon", DEFAULT_EPSILON)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "StationGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class LaplacianBundle:
    kind: str
    L: np.ndarray
    lambda_max: float | None = None
    L_scaled: np.ndarray | None = None


@dataclass
class TransitionSet:
    mode: str
    matrices: list[np.ndarray] = field(default_factory=list)


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def _check_dist(dist: np.ndarray):
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise DimensionError(f"distance matrix must be square, got {dist.shape}")
    if not np.allclose(dist, dist.T) or (dist < 0).any() or np.any(np.diag(dist) != 0):
        raise ValueError("distance matrix must be symmetric, non-negative, with zero diagonal")


def build_adjacency(dist, epsilon: float = DEFAULT_EPSILON, node_ids: Sequence | None = None) -> np.ndarray:
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2)`` on pairwise distances.

    ``sigma`` is the population standard deviation of the off-diagonal
    distances.  Weights below ``epsilon`` are zeroed, as is the diagonal.
    """
    dist = np.asarray(dist, dtype=float)
    _check_dist(dist)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    n = dist.shape[0]
    off = ~np.eye(n, dtype=bool)
    sigma = dist[off].std() if n > 1 else 0.0
    if sigma == 0.0:
        raise DegenerateGraphError("all pairwise distances are identical; kernel width is zero")
    W = np.exp(-np.square(dist / sigma))
    W[W < epsilon] = 0.0
    np.fill_diagonal(W, 0.0)
    isolated = np.flatnonzero(W.sum(axis=1) == 0.0)
    if isolated.size:
        node = node_ids[isolated[0]] if node_ids is not None else int(isolated[0])
        raise IsolatedNodeError(node, f"node {node!r} has no edges at epsilon={epsilon}")
    return W


def pairwise_distances_km(coords_m) -> np.ndarray:
    """Euclidean distances in km from planar coordinates given in meters."""
    xy = np.asarray(coords_m, dtype=float)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt(np.square(diff).sum(axis=-1)) / 1000.0


def graph_from_coords(node_ids, coords_m, epsilon: float = DEFAULT_EPSILON) -> StationGraph:
    coords = np.asarray(coords_m, dtype=float)
    dist = pairwise_distances_km(coords)
    W = build_adjacency(dist, epsilon, node_ids)
    return StationGraph(list(node_ids), dist, W, coords, epsilon)


def graph_from_distances(node_ids, dist, epsilon: float = DEFAULT_EPSILON) -> StationGraph:
    dist = np.asarray(dist, dtype=float)
    return StationGraph(list(node_ids), dist, build_adjacency(dist, epsilon, node_ids), None, epsilon)


def read_graph_csv(path, epsilon: float = DEFAULT_EPSILON) -> StationGraph:
    """Read either a station table or a long-form distance table.

    Station table header: ``station_id,x_meters,y_meters``.
    Distance table header: ``from_id,to_id,km``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty graph file")
    cols = set(rows[0])
    if {"station_id", "x_meters", "y_meters"} <= cols:
        ids = [r["station_id"] for r in rows]
        xy = [(float(r["x_meters"]), float(r["y_meters"])) for r in rows]
        return graph_from_coords(ids, xy, epsilon)
    if {"from_id", "to_id", "km"} <= cols:
        ids: list[str] = []
        for r in rows:
            for key in ("from_id", "to_id"):
                if r[key] not in ids:
                    ids.append(r[key])
        pos = {s: i for i, s in enumerate(ids)}
        dist = np.full((len(ids), len(ids)), np.nan)
        np.fill_diagonal(dist, 0.0)
        for r in rows:
            i, j, d = pos[r["from_id"]], pos[r["to_id"]], float(r["km"])
            dist[i, j] = dist[j, i] = d
        if np.isnan(dist).any():
            raise ValueError(f"{path}: distance table does not cover every station pair")
        return graph_from_distances(ids, dist, epsilon)
    raise ValueError(f"{path}: unrecognised header {sorted(cols)}")


def hop_distances(W) -> np.ndarray:
    """Unweighted shortest-path hop counts (inf where unreachable)."""
    return shortest_path(np.asarray(W) != 0, directed=True, unweighted=True)


# --------------------------------------------------------------------------
# spectral operators
# --------------------------------------------------------------------------

def _degrees(W, kind):
    d = W.sum(axis=1)
    if (d == 0).any():
        bad = int(np.flatnonzero(d == 0)[0])
        raise DivisionDomainError(f"node {bad} has zero degree; {kind} is undefined")
    return d


def laplacian(W, kind: str = "sym_normalized") -> LaplacianBundle:
    W = np.asarray(W, dtype=float)
    if kind not in LAPLACIAN_KINDS:
        raise ValueError(f"unknown Laplacian kind {kind!r}")
    if (W < 0).any():
        raise ValueError("adjacency must be non-negative")
    n = W.shape[0]
    if kind == "combinatorial":
        L = np.diag(W.sum(axis=1)) - W
    elif kind == "sym_normalized":
        inv_sqrt = 1.0 / np.sqrt(_degrees(W, kind))
        L = np.eye(n) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    else:
        L = np.eye(n) - W / _degrees(W, kind)[:, None]
    return LaplacianBundle(kind, L)


def largest_eigenvalue(L, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0) -> float:
    """Power iteration; stops when successive Rayleigh quotients differ by < ``tol``."""
    L = np.asarray(L, dtype=float)
    v = np.random.default_rng(seed).uniform(0.5, 1.5, L.shape[0])
    v /= np.linalg.norm(v)
    prev = None
    for _ in range(max_iter):
        w = L @ v
        rq = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if prev is not None and abs(rq - prev) < tol:
            return float(v @ (L @ v))
        prev = rq
    raise EstimationError(f"power iteration did not converge in {max_iter} iterations", prev, v)


def scale_laplacian(bundle: LaplacianBundle, lambda_max_mode: str = "power") -> LaplacianBundle:
    """Fill ``lambda_max`` and ``L_scaled = 2 L / lambda_max - I``.

    ``lambda_max_mode="fixed"`` skips power iteration and uses 2, the upper
    bound for the symmetric normalized Laplacian.
    """
    if lambda_max_mode == "power":
        lam = largest_eigenvalue(bundle.L)
    elif lambda_max_mode == "fixed":
        lam = 2.0
    else:
        raise ValueError(f"unknown lambda_max mode {lambda_max_mode!r}")
    if not lam > 0:
        raise DegenerateGraphError("largest Laplacian eigenvalue is not positive")
    n = bundle.L.shape[0]
    bundle.lambda_max = lam
    bundle.L_scaled = 2.0 * bundle.L / lam - np.eye(n)
    return bundle


def transition_set(W, mode: str = "dual_random_walk") -> TransitionSet:
    """Row-normalized diffusion transitions.

    ``random_walk`` gives ``[D^-1 W]``; ``dual_random_walk`` gives
    ``[D_out^-1 W, D_in^-1 W^T]``.
    """
    W = np.asarray(W, dtype=float)
    if mode not in TRANSITION_MODES:
        raise ValueError(f"unknown transition mode {mode!r}")
    forward = W / _degrees(W, mode)[:, None]
    if mode == "random_walk":
        return TransitionSet(mode, [forward])
    Wt = np.ascontiguousarray(W.T)
    return TransitionSet(mode, [forward, Wt / _degrees(Wt, mode)[:, None]])


# --------------------------------------------------------------------------
# node mixing on (differentiable) signals
# --------------------------------------------------------------------------

def mix_nodes(M: np.ndarray | dn.Tensor, X: dn.Tensor) -> dn.Tensor:
    """``M @ X`` over the node axis for X of shape (N, F) or (N, B, F)."""
    M = M if isinstance(M, dn.Tensor) else dn.Tensor._wrap(np.asarray(M, dtype=float))
    if X.value.ndim == 2:
        return dn.matmul(M, X)
    shape = X.shape
    flat = dn.reshape(X, (shape[0], int(np.prod(shape[1:]))))
    return dn.reshape(dn.matmul(M, flat), shape)


def chebyshev_apply(L_scaled, X, K: int, recurrence: str = "standard") -> list:
    """``[T_0(L~) X, ..., T_K(L~) X]`` by the three-term recurrence.

    ``recurrence="standard"`` uses ``T_k = 2 L~ T_{k-1} - T_{k-2}``;
    ``"as_printed"`` drops the factor 2.  Accepts a numpy array (returns
    arrays) or a :class:`~stgcrnn.diffnum.Tensor` (returns tensors).
    """
    if K < 0:
        raise ValueError("K must be non-negative")
    if recurrence not in CHEB_RECURRENCES:
        raise ValueError(f"unknown Chebyshev recurrence {recurrence!r}")
    raw = not isinstance(X, dn.Tensor)
    Xt = dn.Tensor._wrap(np.asarray(X, dtype=float)) if raw else X
    L_scaled = np.asarray(L_scaled, dtype=float)
    if L_scaled.shape != (Xt.shape[0], Xt.shape[0]):
        raise DimensionError(f"L_scaled {L_scaled.shape} does not match {Xt.shape[0]} nodes")
    Lt = dn.Tensor._wrap(L_scaled)
    L2 = dn.Tensor._wrap(2.0 * L_scaled if recurrence == "standard" else L_scaled)
    terms = [Xt]
    if K >= 1:
        terms.append(mix_nodes(Lt, Xt))
    for _ in range(2, K + 1):
        terms.append(dn.sub(mix_nodes(L2, terms[-1]), terms[-2]))
    return [t.value for t in terms] if raw else terms


def diffusion_apply(P, X, K: int) -> list:
    """``[X, P X, ..., P^K X]`` computed iteratively."""
    raw = not isinstance(X, dn.Tensor)
    Xt = dn.Tensor._wrap(np.asarray(X, dtype=float)) if raw else X
    Pt = dn.Tensor._wrap(np.asarray(P, dtype=float))
    terms = [Xt]
    for _ in range(K):
        terms.append(mix_nodes(Pt, terms[-1]))
    return [t.value for t in terms] if raw else terms
