"""Spatial graph construction and RBF edge featurization.

Neighbor queries run on a uniform 3-D cell grid (cell size = cutoff for
radius queries, adaptive for kNN) with a brute-force fallback below 64
points. Results are exact: the grid only prunes candidates, and kNN
answers are verified against the cell-radius guarantee with a brute-force
retry for the rare queries that fail it. Distance ties always break toward
the smaller point index so graphs are reproducible across runs and
platforms.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_BRUTE_FORCE_LIMIT = 64


@dataclass(frozen=True)
class RbfConfig:
    """Radial basis featurization: Gaussians at evenly spaced centers."""

    n_kernels: int = 16
    min_d: float = 0.0
    max_d: float = 20.0
    gamma: float = None   # default: inverse squared center spacing

    def __post_init__(self):
        if self.n_kernels < 1:
            raise DataError("n_kernels must be >= 1")
        if not self.min_d < self.max_d:
            raise DataError("RBF range requires min_d < max_d")
        if self.gamma is None:
            if self.n_kernels > 1:
                spacing = (self.max_d - self.min_d) / (self.n_kernels - 1)
                object.__setattr__(self, "gamma", spacing ** -2)
            else:
                object.__setattr__(self, "gamma", 1.0)
        if self.gamma <= 0:
            raise DataError("gamma must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.min_d, self.max_d, self.n_kernels)


def rbf_expand(d, cfg: RbfConfig = None) -> np.ndarray:
    """Expand distances into Gaussian kernel responses, one per center."""
    if cfg is None:
        cfg = RbfConfig()
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-cfg.gamma * (d[..., None] - cfg.centers) ** 2)


@dataclass(frozen=True)
class SpatialGraph:
    """Directed edges (src j -> dst i) with displacement and RBF features.

    Edges are sorted by (dst, src); edge_vec rows hold x_src - x_dst.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    edge_vec: np.ndarray
    edge_scalar: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)


def _finalize_graph(coords, src, dst, rbf: RbfConfig) -> SpatialGraph:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    edge_vec = coords[src] - coords[dst]
    edge_scalar = rbf_expand(np.linalg.norm(edge_vec, axis=1), rbf)
    return SpatialGraph(n_nodes=len(coords), src=src, dst=dst,
                        edge_vec=edge_vec, edge_scalar=edge_scalar)


def _cell_index(coords, cell: float) -> dict:
    keys = np.floor(coords / cell).astype(np.int64)
    cells = defaultdict(list)
    for i, key in enumerate(map(tuple, keys)):
        cells[key].append(i)
    return {k: np.array(v, dtype=np.int64) for k, v in cells.items()}


def _neighbor_cell_members(cells: dict, key) -> np.ndarray:
    found = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                members = cells.get((key[0] + dx, key[1] + dy, key[2] + dz))
                if members is not None:
                    found.append(members)
    if not found:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(found)


def build_radius_graph(coords, cutoff: float, rbf: RbfConfig = None) -> SpatialGraph:
    """Edges between every pair at distance strictly inside (0, cutoff)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DataError("coords must be (n, 3)")
    if not np.isfinite(coords).all():
        raise DataError("non-finite coordinates")
    if cutoff <= 0:
        raise DataError("cutoff must be positive")
    if rbf is None:
        rbf = RbfConfig()
    n = len(coords)
    src_all, dst_all = [], []
    if n <= _BRUTE_FORCE_LIMIT:
        if n > 1:
            diff = coords[:, None, :] - coords[None, :, :]
            dist = np.linalg.norm(diff, axis=2)
            jj, ii = np.nonzero((dist > 0) & (dist < cutoff))
            src_all.append(jj)
            dst_all.append(ii)
    else:
        cells = _cell_index(coords, cutoff)
        for key, members in cells.items():
            cand = _neighbor_cell_members(cells, key)
            block = coords[members][:, None, :] - coords[cand][None, :, :]
            dist = np.linalg.norm(block, axis=2)
            rows, cols = np.nonzero((dist > 0) & (dist < cutoff))
            # exclude the self pair explicitly: coincident distinct points
            # are legitimate neighbors, the node itself is not
            keep = members[rows] != cand[cols]
            src_all.append(cand[cols][keep])
            dst_all.append(members[rows][keep])
    if src_all:
        src = np.concatenate(src_all)
        dst = np.concatenate(dst_all)
    else:
        src = dst = np.empty(0, dtype=np.int64)
    return _finalize_graph(coords, src, dst, rbf)


def _knn_order(dist: np.ndarray, idx: np.ndarray, k: int):
    """Indices of the k smallest (distance, index) pairs."""
    order = np.lexsort((idx, dist))[:k]
    return idx[order], dist[order]


def _brute_knn(queries, refs, k, skip_self_of=None):
    """Chunked exact kNN; skip_self_of[i] is a ref index excluded for query i."""
    m = len(queries)
    out_idx = np.empty((m, k), dtype=np.int64)
    out_dist = np.empty((m, k), dtype=np.float64)
    chunk = max(1, int(2e6) // max(len(refs), 1))
    all_ref_idx = np.arange(len(refs), dtype=np.int64)
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        dist = np.linalg.norm(queries[start:stop, None, :] - refs[None, :, :], axis=2)
        for r in range(start, stop):
            d = dist[r - start]
            if skip_self_of is not None:
                keep = all_ref_idx != skip_self_of[r]
                out_idx[r], out_dist[r] = _knn_order(d[keep], all_ref_idx[keep], k)
            else:
                out_idx[r], out_dist[r] = _knn_order(d, all_ref_idx, k)
    return out_idx, out_dist


def _grid_knn(queries, refs, k, skip_self_of=None):
    """Exact kNN via a cell grid; falls back per query when the 27-cell
    neighborhood cannot certify the answer (kth distance must be <= cell)."""
    n = len(refs)
    if n <= _BRUTE_FORCE_LIMIT:
        return _brute_knn(queries, refs, k, skip_self_of)
    span = refs.max(axis=0) - refs.min(axis=0)
    volume = float(np.prod(np.maximum(span, 1e-9)))
    # aim for enough candidates in 27 cells to answer most queries directly
    cell = max((volume * max(k, 4) / (4.0 * n)) ** (1.0 / 3.0), 1e-9)
    cells = _cell_index(refs, cell)
    qkeys = np.floor(queries / cell).astype(np.int64)
    m = len(queries)
    out_idx = np.empty((m, k), dtype=np.int64)
    out_dist = np.empty((m, k), dtype=np.float64)
    pending = []
    # group queries sharing a cell so candidate gathering is amortized
    qcells = defaultdict(list)
    for qi, key in enumerate(map(tuple, qkeys)):
        qcells[key].append(qi)
    for key, qidx in qcells.items():
        cand = _neighbor_cell_members(cells, key)
        if len(cand) < k + 1:
            pending.extend(qidx)
            continue
        block = np.linalg.norm(
            queries[qidx][:, None, :] - refs[cand][None, :, :], axis=2)
        for row, qi in enumerate(qidx):
            d = block[row]
            c = cand
            if skip_self_of is not None and skip_self_of[qi] >= 0:
                keep = c != skip_self_of[qi]
                d, c = d[keep], c[keep]
            if len(c) < k:
                pending.append(qi)
                continue
            ids, ds = _knn_order(d, c, k)
            if ds[-1] <= cell:
                out_idx[qi], out_dist[qi] = ids, ds
            else:
                pending.append(qi)
    if pending:
        pending = np.array(sorted(pending), dtype=np.int64)
        skip = None if skip_self_of is None else skip_self_of[pending]
        ids, ds = _brute_knn(queries[pending], refs, k, skip_self_of=skip)
        out_idx[pending], out_dist[pending] = ids, ds
    return out_idx, out_dist


def build_knn_graph(coords, k: int, rbf: RbfConfig = None) -> SpatialGraph:
    """Graph with edges from each node's min(k, n-1) nearest other nodes."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DataError("coords must be (n, 3)")
    n = len(coords)
    if n < 2:
        raise DataError("kNN graph needs at least 2 points")
    if k < 1:
        raise DataError("k must be >= 1")
    if rbf is None:
        rbf = RbfConfig()
    k_eff = min(k, n - 1)
    self_idx = np.arange(n, dtype=np.int64)
    idx, _ = _grid_knn(coords, coords, k_eff, skip_self_of=self_idx)
    dst = np.repeat(self_idx, k_eff)
    src = idx.reshape(-1)
    return _finalize_graph(coords, src, dst, rbf)


def cross_knn(queries, refs, k: int):
    """For each query, the k nearest refs as (indices, distances), ascending
    distance with ties broken by smaller ref index."""
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != 3:
        raise DataError("queries must be (m, 3)")
    if refs.ndim != 2 or refs.shape[1] != 3:
        raise DataError("refs must be (n, 3)")
    if k < 1:
        raise DataError("k must be >= 1")
    if len(refs) < k:
        raise DataError(f"need at least k={k} reference points, got {len(refs)}")
    return _grid_knn(queries, refs, k)
