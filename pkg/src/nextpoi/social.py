"""Check-in vectors, cosine-similarity neighbour discovery and future-masked
neighbour windows."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .data import CheckInLog

K_MAX = 8


def checkin_vectors(log: CheckInLog, rows: np.ndarray | None = None) -> sp.csr_matrix:
    """Users x POIs visit-count matrix over the selected rows (training rows)."""
    user, poi = log.user, log.poi
    if rows is not None:
        user, poi = user[rows], poi[rows]
    data = np.ones(len(user), dtype=np.float64)
    mat = sp.coo_matrix((data, (user, poi)), shape=(log.n_users, log.n_pois)).tocsr()
    mat.sum_duplicates()
    return mat


def cosine_similarity(a, b) -> float:
    """Cosine of two count vectors (dense or ``{poi: count}``); 0 if either is zero."""
    if isinstance(a, Mapping):
        keys = sorted(set(a) | set(b))
        a = [a.get(k, 0) for k in keys]
        b = [b.get(k, 0) for k in keys]
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), 0.0, 1.0))


def similarity_matrix(vectors: sp.spmatrix) -> np.ndarray:
    norms = np.sqrt(np.asarray(vectors.multiply(vectors).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    unit = sp.diags(inv) @ vectors
    return np.clip((unit @ unit.T).toarray(), 0.0, 1.0)


@dataclass
class NeighborGraph:
    """Per-user neighbour lists, most similar first (ties by lower user id)."""

    neighbors: list[list[int]]
    similarity: list[list[float]]
    tau: float | None = None
    provided: bool = False

    def __len__(self) -> int:
        return len(self.neighbors)

    def edges(self) -> set[tuple[int, int]]:
        return {(min(i, j), max(i, j)) for i, ns in enumerate(self.neighbors) for j in ns}

    def top(self, user: int, k: int = K_MAX) -> list[int]:
        return self.neighbors[user][:k]

    def export(self, path) -> None:
        lines = [
            f"{i}\t{j}\t{s:.10f}"
            for i, (ns, ss) in enumerate(zip(self.neighbors, self.similarity))
            for j, s in zip(ns, ss)
        ]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load_export(cls, path, n_users: int) -> "NeighborGraph":
        nbrs: list[list[int]] = [[] for _ in range(n_users)]
        sims: list[list[float]] = [[] for _ in range(n_users)]
        for line in Path(path).read_text().splitlines():
            if line.strip():
                i, j, s = line.split("\t")
                nbrs[int(i)].append(int(j))
                sims[int(i)].append(float(s))
        return cls(nbrs, sims)


def _ordered(pairs: dict[int, float]) -> tuple[list[int], list[float]]:
    items = sorted(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
    return [j for j, _ in items], [s for _, s in items]


def discover_neighbors(vectors: sp.spmatrix, tau: float = 0.5) -> NeighborGraph:
    """Connect users whose check-in vectors have cosine similarity strictly above ``tau``."""
    if tau < 0.0:
        raise ValueError("tau must be non-negative")
    sim = similarity_matrix(vectors)
    np.fill_diagonal(sim, -1.0)
    nbrs, sims = [], []
    for i in range(sim.shape[0]):
        js = np.flatnonzero(sim[i] > tau)
        ns, ss = _ordered({int(j): float(sim[i, j]) for j in js})
        nbrs.append(ns)
        sims.append(ss)
    return NeighborGraph(nbrs, sims, tau)


def read_edges(path) -> list[tuple[str, str]]:
    out = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) >= 2:
            out.append((parts[0], parts[1]))
    return out


def graph_from_edges(
    edges: Iterable[tuple], n_users: int, user_keys: list[str] | None = None, vectors: sp.spmatrix | None = None
) -> NeighborGraph:
    """Neighbour graph from provided social links (symmetrised, self-loops dropped).

    Raw ids are mapped through ``user_keys`` when given; links to unknown
    users are ignored.  Similarities come from ``vectors`` when available,
    else 1.0.
    """
    index = {k: i for i, k in enumerate(user_keys)} if user_keys else None
    adj: list[dict[int, float]] = [{} for _ in range(n_users)]
    sim = similarity_matrix(vectors) if vectors is not None else None
    for a, b in edges:
        if index is not None:
            if str(a) not in index or str(b) not in index:
                continue
            i, j = index[str(a)], index[str(b)]
        else:
            i, j = int(a), int(b)
        if i == j or not (0 <= i < n_users and 0 <= j < n_users):
            continue
        s = float(sim[i, j]) if sim is not None else 1.0
        adj[i][j] = s
        adj[j][i] = s
    nbrs, sims = zip(*(_ordered(d) for d in adj)) if n_users else ((), ())
    return NeighborGraph([list(x) for x in nbrs], [list(x) for x in sims], provided=True)


def neighbor_window(log: CheckInLog, neighbor: int, cutoff: int, n: int) -> np.ndarray | None:
    """Rows of the neighbour's latest ``n`` consecutive check-ins ending at or before ``cutoff``."""
    s, e = int(log.user_start[neighbor]), int(log.user_start[neighbor + 1])
    end = s + int(np.searchsorted(log.ts[s:e], cutoff, side="right"))
    if end - s < n:
        return None
    return np.arange(end - n, end)


@dataclass
class NeighborIndex:
    """For each window and neighbour slot, the end row (exclusive) of the
    neighbour's history, or -1 when that slot is empty."""

    end: np.ndarray
    user: np.ndarray = field(repr=False)

    @property
    def mask(self) -> np.ndarray:
        return self.end >= 0


def neighbor_index(
    log: CheckInLog, graph: NeighborGraph | None, targets: np.ndarray, n: int, k_max: int = K_MAX
) -> NeighborIndex:
    """Future-masked neighbour windows for every target row.

    The cutoff is the timestamp of the last observed check-in of the
    window, ``ts[target - 1]``.  Neighbours without ``n`` check-ins up to
    the cutoff are dropped for that instance; the remaining ones are packed
    to the front of the ``k_max`` slots in similarity order.
    """
    W = len(targets)
    end = np.full((W, k_max), -1, dtype=np.int64)
    who = np.full((W, k_max), -1, dtype=np.int64)
    if graph is None or k_max == 0:
        return NeighborIndex(end, who)
    cutoff = log.ts[np.asarray(targets) - 1]
    users = log.user[targets]
    for w in range(W):
        slot = 0
        for j in graph.top(int(users[w]), k_max):
            s, e = int(log.user_start[j]), int(log.user_start[j + 1])
            stop = s + int(np.searchsorted(log.ts[s:e], cutoff[w], side="right"))
            if stop - s >= n:
                end[w, slot] = stop
                who[w, slot] = j
                slot += 1
    return NeighborIndex(end, who)
