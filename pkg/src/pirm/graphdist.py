"""Community-overlap graphs and spectral distances between environments.

Communities are sets of elements (e.g. images). Two communities are joined by
an edge weighted with their overlap coefficient ``|Ci & Cj| / min(|Ci|, |Cj|)``.
Nodes are embedded with the eigenvectors of the smallest eigenvalues of the
unnormalised Laplacian, rows scaled to unit length, and environments (sets of
communities) are compared by Euclidean distance in that embedding.
"""

from __future__ import annotations

import csv
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np
import pandas as pd

DEFAULT_K = 4
ZERO_ROW_TOL = 1e-12
DEGENERATE_GAP = 1e-9


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class CommunityGraph:
    nodes: tuple
    G: np.ndarray
    sizes: tuple | None = None

    def __post_init__(self):
        G = np.array(self.G, dtype=float)
        n = len(self.nodes)
        if G.shape != (n, n):
            raise GraphError(f"G has shape {G.shape}, expected {(n, n)}")
        if len(set(self.nodes)) != n:
            raise GraphError("duplicate node names")
        if not np.isfinite(G).all():
            raise GraphError("non-finite edge weight")
        if not np.allclose(G, G.T, atol=1e-12, rtol=0):
            raise GraphError("G must be symmetric")
        if (G < 0).any() or (G > 1).any():
            raise GraphError("edge weights must lie in [0, 1]")
        if self.sizes is not None and len(self.sizes) != n:
            raise GraphError("one size per node required")
        G.setflags(write=False)
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "G", G)
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def index(self) -> dict:
        return {name: i for i, name in enumerate(self.nodes)}


def overlap_matrix(
    communities: Mapping[Hashable, Iterable] | Sequence[Iterable],
    names: Sequence[Hashable] | None = None,
) -> CommunityGraph:
    """Overlap-coefficient graph over ``communities``.

    A mapping supplies node names directly; a plain sequence is named
    ``0..n-1`` unless ``names`` is given.
    """
    if isinstance(communities, Mapping):
        names = list(communities)
        sets = [frozenset(communities[k]) for k in names]
    else:
        sets = [frozenset(c) for c in communities]
        names = list(range(len(sets))) if names is None else list(names)
    if len(names) != len(sets):
        raise GraphError("one name per community required")
    for name, s in zip(names, sets):
        if not s:
            raise GraphError(f"community {name!r} is empty")

    n = len(sets)
    G = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            G[i, j] = G[j, i] = len(sets[i] & sets[j]) / min(len(sets[i]), len(sets[j]))
    return CommunityGraph(tuple(names), G, tuple(len(s) for s in sets))


def laplacian(g: CommunityGraph | np.ndarray) -> np.ndarray:
    """L = D - W where W is G with its diagonal zeroed and D its row sums."""
    W = np.array(g.G if isinstance(g, CommunityGraph) else g, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise GraphError("adjacency must be square")
    np.fill_diagonal(W, 0.0)
    return np.diag(W.sum(axis=1)) - W


@dataclass(frozen=True)
class SpectralEmbedding:
    U: np.ndarray
    k: int
    eigenvalues: np.ndarray
    nodes: tuple
    zero_rows: tuple = ()
    # True when the k-th and (k+1)-th eigenvalues coincide: the selected
    # subspace, and hence the embedding, then depends on the solver's basis
    boundary_degenerate: bool = False
    clusters: tuple = field(default=())

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        if U.shape != (len(self.nodes), self.k):
            raise GraphError("U must have one row per node and k columns")
        if not np.isfinite(U).all():
            raise GraphError("non-finite embedding")
        ev = np.array(self.eigenvalues, dtype=float)
        if (np.diff(ev) < 0).any() or (ev < -1e-10).any():
            raise GraphError("eigenvalues must be non-decreasing and non-negative")
        U.setflags(write=False)
        ev.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "nodes", tuple(self.nodes))

    @property
    def degenerate(self) -> bool:
        return self.boundary_degenerate or any(len(c) > 1 for c in self.clusters)

    def row(self, node) -> np.ndarray:
        try:
            return self.U[self.nodes.index(node)]
        except ValueError:
            raise KeyError(f"unknown node {node!r}") from None


def _eigen_clusters(values: np.ndarray, gap: float) -> tuple:
    clusters, cur = [], [0]
    for i in range(1, len(values)):
        if values[i] - values[i - 1] < gap:
            cur.append(i)
        else:
            clusters.append(tuple(cur))
            cur = [i]
    clusters.append(tuple(cur))
    return tuple(clusters)


def spectral_embedding(L: np.ndarray, k: int = DEFAULT_K, nodes: Sequence | None = None) -> SpectralEmbedding:
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    if L.shape != (n, n):
        raise GraphError("Laplacian must be square")
    if not 1 <= k <= n:
        raise GraphError(f"k must lie in [1, {n}], got {k}")
    if not np.allclose(L, L.T, atol=1e-12, rtol=0):
        raise GraphError("Laplacian must be symmetric")
    nodes = tuple(range(n)) if nodes is None else tuple(nodes)
    try:
        vals, vecs = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise GraphError(f"eigen-solver failed: {exc}") from exc

    # eigh may return -1e-16 for the null space
    vals = np.where(np.abs(vals) < 1e-12, 0.0, vals)
    U = vecs[:, :k].copy()
    for col in range(k):
        nz = np.flatnonzero(np.abs(U[:, col]) > ZERO_ROW_TOL)
        if nz.size and U[nz[0], col] < 0:
            U[:, col] *= -1
    norms = np.linalg.norm(U, axis=1)
    zero = norms < ZERO_ROW_TOL
    U[~zero] /= norms[~zero, None]
    U[zero] = 0.0

    boundary = k < n and vals[k] - vals[k - 1] < DEGENERATE_GAP
    return SpectralEmbedding(
        U=U,
        k=k,
        eigenvalues=vals[:k],
        nodes=nodes,
        zero_rows=tuple(nodes[i] for i in np.flatnonzero(zero)),
        boundary_degenerate=bool(boundary),
        clusters=_eigen_clusters(vals[:k], DEGENERATE_GAP),
    )


def graph_embedding(g: CommunityGraph, k: int = DEFAULT_K) -> SpectralEmbedding:
    return spectral_embedding(laplacian(g), k=k, nodes=g.nodes)


def embedding_distance(emb: SpectralEmbedding, i, j) -> float:
    return float(np.linalg.norm(emb.row(i) - emb.row(j)))


def distance_matrix(emb: SpectralEmbedding) -> np.ndarray:
    diff = emb.U[:, None, :] - emb.U[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


@dataclass(frozen=True)
class RankedEnv:
    position: int  # index into the candidate list given to rank_environments
    nodes: frozenset
    distance: float


def rank_environments(
    emb: SpectralEmbedding,
    test_nodes: Iterable,
    candidate_envs: Sequence[Iterable],
    aggregation: str = "mean",
) -> list[RankedEnv]:
    """Order candidate environments by embedding distance to the test nodes.

    The score is the mean (or minimum) over all (candidate node, test node)
    pairs. Sorting is stable, so equal scores keep their input order.
    """
    test = list(dict.fromkeys(test_nodes))
    if not test:
        raise GraphError("test node set is empty")
    if aggregation not in ("mean", "min"):
        raise GraphError(f"unknown aggregation {aggregation!r}")
    agg = np.mean if aggregation == "mean" else np.min
    T = np.stack([emb.row(t) for t in test])

    out = []
    for pos, cand in enumerate(candidate_envs):
        members = list(dict.fromkeys(cand))
        if not members:
            raise GraphError(f"candidate {pos} is empty")
        C = np.stack([emb.row(c) for c in members])
        d = np.sqrt(((C[:, None, :] - T[None, :, :]) ** 2).sum(axis=-1))
        out.append(RankedEnv(pos, frozenset(members), float(agg(d))))
    return sorted(out, key=lambda r: r.distance)


# --------------------------------------------------------------------------- #
# I/O
# --------------------------------------------------------------------------- #


def read_edge_list(path: str | Path) -> CommunityGraph:
    """TSV with columns node_a, node_b, weight (header optional).

    Nodes are ordered by first appearance; the diagonal is set to 1.
    """
    df = pd.read_csv(path, sep="\t", header=None, dtype=str, comment="#")
    if df.shape[1] != 3:
        raise GraphError(f"edge list needs 3 columns, found {df.shape[1]}")
    if df.iloc[0, 2].strip().lower() == "weight":
        df = df.iloc[1:]
    weights = pd.to_numeric(df[2], errors="coerce")
    if weights.isna().any():
        raise GraphError("non-numeric edge weight")
    order = list(dict.fromkeys(x for pair in zip(df[0], df[1]) for x in pair))
    idx = {name: i for i, name in enumerate(order)}
    G = np.eye(len(order))
    for a, b, w in zip(df[0], df[1], weights):
        if a == b:
            continue
        G[idx[a], idx[b]] = G[idx[b], idx[a]] = float(w)
    return CommunityGraph(tuple(order), G)


def read_memberships(path: str | Path) -> dict:
    """CSV with header ``element,community``; returns community -> element set."""
    df = pd.read_csv(path, dtype=str)
    missing = {"element", "community"} - set(df.columns)
    if missing:
        raise GraphError(f"membership CSV lacks columns {sorted(missing)}")
    df = df.dropna(subset=["element", "community"])
    out: dict = {}
    for elem, comm in zip(df["element"], df["community"]):
        out.setdefault(comm, set()).add(elem)
    return out


def write_embedding_csv(emb: SpectralEmbedding, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + [f"u{i}" for i in range(emb.k)])
        for name, row in zip(emb.nodes, emb.U):
            w.writerow([name] + [repr(float(x)) for x in row])


def write_distance_csv(emb: SpectralEmbedding, path: str | Path) -> None:
    D = distance_matrix(emb)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + list(emb.nodes))
        for name, row in zip(emb.nodes, D):
            w.writerow([name] + [repr(float(x)) for x in row])
