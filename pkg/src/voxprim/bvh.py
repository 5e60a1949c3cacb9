"""Bounding volume hierarchy over the world-space AABBs of oriented boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF_SIZE = 4


@dataclass(frozen=True)
class BVH:
    """Flattened binary tree. Node n is a leaf iff ``count[n] > 0``; its
    primitives are ``order[start[n]:start[n] + count[n]]``."""

    lo: np.ndarray  # (N, 3)
    hi: np.ndarray  # (N, 3)
    left: np.ndarray  # (N,)
    right: np.ndarray  # (N,)
    start: np.ndarray  # (N,)
    count: np.ndarray  # (N,)
    order: np.ndarray  # (K,)

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    def leaves(self):
        return np.flatnonzero(self.count > 0)


def box_aabbs(centers: np.ndarray, rotm: np.ndarray, half: np.ndarray):
    """Conservative world AABBs of oriented boxes; padded so that float-rounded
    corners always fall inside."""
    ext = np.einsum("kij,kj->ki", np.abs(rotm), half)
    pad = 1e-9 * (np.abs(centers) + ext) + 1e-12
    return centers - ext - pad, centers + ext + pad


def build_bvh(centers: np.ndarray, rotm: np.ndarray, half: np.ndarray, leaf_size: int = LEAF_SIZE) -> BVH:
    """Median split on the longest axis of the centroid bounds."""
    centers = np.asarray(centers, dtype=np.float64)
    K = len(centers)
    if K < 1:
        raise ValueError("BVH needs at least one primitive")
    plo, phi = box_aabbs(centers, np.asarray(rotm, dtype=np.float64), np.asarray(half, dtype=np.float64))
    order = np.arange(K)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        lo.append(plo[idx].min(0))
        hi.append(phi[idx].max(0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(0)
        return len(lo) - 1

    stack = [(new_node(0, K), 0, K)]
    while stack:
        node, s, e = stack.pop()
        n = e - s
        if n <= leaf_size:
            count[node] = n
            continue
        idx = order[s:e]
        c = centers[idx]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        perm = np.argsort(c[:, axis], kind="stable")
        order[s:e] = idx[perm]
        mid = s + n // 2
        l_node = new_node(s, mid)
        r_node = new_node(mid, e)
        left[node], right[node] = l_node, r_node
        stack.append((r_node, mid, e))
        stack.append((l_node, s, mid))

    return BVH(
        np.array(lo), np.array(hi),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64), np.array(count, dtype=np.int64),
        order.astype(np.int64),
    )
