"""Keypoint graphs, node/edge affinities and the Lawler association matrix.

Project-wide vec convention is row-major: candidate match (i, a) of an
n1 x n2 problem sits at index ``i * n2 + a``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError

from . import numerics as nx
from .numerics import Module, Parameter, Tensor
from .sinkhorn import sinkhorn

FORMAT_TAG = "gmtr-affinity 1"


@dataclass
class KeypointGraph:
    coords: np.ndarray  # (n, 2)
    edges: np.ndarray  # (E, 2) int, i < j, sorted

    @property
    def n(self) -> int:
        return len(self.coords)


def complete_edges(n: int) -> np.ndarray:
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def build_graph(coords, policy: str = "delaunay") -> KeypointGraph:
    """Delaunay (complete-graph fallback when degenerate or n < 3) or complete topology."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = len(coords)
    if n < 1:
        raise ValueError("graph needs at least one node")
    if len(np.unique(coords, axis=0)) != n:
        raise ValueError("duplicate keypoint coordinates")
    if policy == "complete" or n < 3:
        return KeypointGraph(coords, complete_edges(n))
    if policy != "delaunay":
        raise ValueError(f"unknown graph policy {policy!r}")
    try:
        tri = Delaunay(coords)
    except QhullError:
        return KeypointGraph(coords, complete_edges(n))
    edges = set()
    for a, b, c in tri.simplices:
        for i, j in ((a, b), (b, c), (a, c)):
            edges.add((min(i, j), max(i, j)))
    if len({v for e in edges for v in e}) != n:
        return KeypointGraph(coords, complete_edges(n))
    return KeypointGraph(coords, np.array(sorted(edges), dtype=np.int64))


def relabel_graph(graph: KeypointGraph, perm) -> KeypointGraph:
    """Node ``i`` of ``graph`` becomes node ``perm[i]``."""
    perm = np.asarray(perm)
    coords = np.empty_like(graph.coords)
    coords[perm] = graph.coords
    e = perm[graph.edges] if len(graph.edges) else graph.edges
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0])) if len(e) else []
    return KeypointGraph(coords, e[order].reshape(-1, 2))


class NodeAffinity(Module):
    """K_p = F1 (A A^T) F2^T; A starts at identity."""

    def __init__(self, d_f: int):
        self.metric = Parameter(np.eye(d_f))

    def __call__(self, f1: Tensor, f2: Tensor) -> Tensor:
        if f1.shape[1] != f2.shape[1]:
            raise nx.DimensionError(f"feature dims differ: {f1.shape} vs {f2.shape}")
        lam = nx.matmul(self.metric, self.metric.T)
        return nx.matmul(nx.matmul(f1, lam), f2.T)


def edge_features(f: Tensor, edges: np.ndarray) -> Tensor:
    """Orientation-free edge descriptor ``[F_i + F_j, |F_i - F_j|]``."""
    fi = f[edges[:, 0]]
    fj = f[edges[:, 1]]
    return nx.concat([fi + fj, nx.tabs(fi - fj)], axis=1)


class EdgeAffinity(Module):
    """Bilinear form with PSD metric over edge descriptors; one value per edge pair."""

    def __init__(self, d_f: int):
        self.metric = Parameter(np.eye(2 * d_f))

    def __call__(self, g1: KeypointGraph, f1: Tensor, g2: KeypointGraph, f2: Tensor) -> Tensor:
        if len(g1.edges) == 0 or len(g2.edges) == 0:
            return Tensor(np.zeros((len(g1.edges), len(g2.edges))))
        lam = nx.matmul(self.metric, self.metric.T)
        return nx.matmul(nx.matmul(edge_features(f1, g1.edges), lam),
                         edge_features(f2, g2.edges).T)


@dataclass
class AffinityInstance:
    """Node affinities plus symmetric off-diagonal COO entries of the Lawler matrix."""

    n1: int
    n2: int
    node: Tensor  # (n1, n2)
    rows: np.ndarray
    cols: np.ndarray
    values: Tensor  # (nnz,)
    gt: np.ndarray | None = None  # optional assignment row -> column
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.n1 * self.n2

    @property
    def K_p(self) -> np.ndarray:
        return self.node.data

    def dense(self) -> Tensor:
        diag = np.arange(self.size)
        vals = nx.concat([nx.reshape(self.node, (-1,)), self.values], axis=0)
        index = (np.concatenate([diag, self.rows]), np.concatenate([diag, self.cols]))
        return nx.scatter(vals, index, (self.size, self.size))

    def dense_array(self) -> np.ndarray:
        with nx.no_grad():
            return self.dense().data

    def adjacency(self) -> np.ndarray:
        """Off-diagonal sparsity pattern: stored entries with a nonzero value."""
        adj = np.zeros((self.size, self.size), dtype=bool)
        adj[self.rows, self.cols] = self.values.data != 0
        return adj

    def detached(self) -> "AffinityInstance":
        return AffinityInstance(self.n1, self.n2, Tensor(self.node.data.copy()),
                                self.rows.copy(), self.cols.copy(),
                                Tensor(self.values.data.copy()),
                                None if self.gt is None else self.gt.copy(), dict(self.meta))


def lawler_index(edges1: np.ndarray, edges2: np.ndarray, n2: int):
    """COO positions for every ordered expansion of every edge pair.

    Returns ``(rows, cols, src)``; ``src`` indexes the flattened E1 x E2 affinity table.
    """
    e1, e2 = len(edges1), len(edges2)
    if e1 == 0 or e2 == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    i1, i2 = edges1[:, 0][:, None], edges1[:, 1][:, None]
    j1, j2 = edges2[:, 0][None, :], edges2[:, 1][None, :]
    src = np.arange(e1 * e2).reshape(e1, e2)
    # same orientation, mirrored; crossed orientation, mirrored
    pa, pb = i1 * n2 + j1, i2 * n2 + j2
    pc, pd = i1 * n2 + j2, i2 * n2 + j1
    rows = np.concatenate([x.ravel() for x in (pa, pb, pc, pd)])
    cols = np.concatenate([x.ravel() for x in (pb, pa, pd, pc)])
    return rows, cols, np.tile(src.ravel(), 4)


def assemble_lawler(k_p: Tensor, k_e: Tensor, g1: KeypointGraph, g2: KeypointGraph) -> AffinityInstance:
    k_p = nx.as_tensor(k_p)
    n1, n2 = k_p.shape
    rows, cols, src = lawler_index(g1.edges, g2.edges, n2)
    values = nx.reshape(nx.as_tensor(k_e), (-1,))[src] if len(src) else Tensor(np.zeros(0))
    return AffinityInstance(n1, n2, k_p, rows, cols, values,
                            meta={"edges1": g1.edges, "edges2": g2.edges})


def node_affinity(f1, f2, module: NodeAffinity | None = None) -> Tensor:
    f1, f2 = nx.as_tensor(f1), nx.as_tensor(f2)
    module = module if module is not None else NodeAffinity(f1.shape[1])
    return module(f1, f2)


def edge_affinity(g1, g2, f1, f2, module: EdgeAffinity | None = None) -> Tensor:
    f1, f2 = nx.as_tensor(f1), nx.as_tensor(f2)
    module = module if module is not None else EdgeAffinity(f1.shape[1])
    return module(g1, f1, g2, f2)


# -- association graph ------------------------------------------------------

@dataclass
class AssociationGraph:
    nodes: Tensor  # (M, d_0 [+1])
    edge_attr: Tensor  # (M, M, d_e), zero off the support
    self_attr: Tensor  # (d_e,), attribute of the implicit self-loop
    adj: np.ndarray  # (M, M) bool, off-diagonal Lawler support

    @property
    def size(self) -> int:
        return self.adj.shape[0]


class AssociationLift(Module):
    """Learnable lifts of scalar affinities into node and edge channels."""

    def __init__(self, d_0: int, d_e: int, rng: np.random.Generator,
                 sinkhorn_channel: bool = True, channel_tau: float = 1.0,
                 channel_iters: int = 50):
        if d_0 < 1 or d_e < 1:
            raise ValueError("lift dimensions must be >= 1")
        self.node_w = Parameter(nx.trunc_normal(rng, (d_0,), std=1.0))
        self.node_b = Parameter(np.zeros(d_0))
        self.edge_w = Parameter(nx.trunc_normal(rng, (d_e,), std=1.0))
        self.edge_b = Parameter(np.zeros(d_e))
        self.self_attr = Parameter(nx.trunc_normal(rng, (d_e,)))
        self.sinkhorn_channel = sinkhorn_channel
        self.channel_tau = channel_tau
        self.channel_iters = channel_iters

    @property
    def out_dim(self) -> int:
        return self.node_w.shape[0] + int(self.sinkhorn_channel)

    def __call__(self, inst: AffinityInstance) -> AssociationGraph:
        m = inst.size
        vec = nx.reshape(inst.node, (m, 1))
        nodes = vec * self.node_w + self.node_b
        if self.sinkhorn_channel:
            chan = sinkhorn(inst.node, self.channel_iters, self.channel_tau)
            nodes = nx.concat([nodes, nx.reshape(chan, (m, 1))], axis=1)
        d_e = self.edge_w.shape[0]
        if len(inst.rows):
            lifted = nx.reshape(inst.values, (-1, 1)) * self.edge_w + self.edge_b
            edge_attr = nx.scatter(lifted, (inst.rows, inst.cols), (m, m, d_e))
        else:
            edge_attr = Tensor(np.zeros((m, m, d_e)))
        return AssociationGraph(nodes, edge_attr, self.self_attr, inst.adjacency())


def to_association_graph(inst: AffinityInstance, lift: AssociationLift) -> AssociationGraph:
    return lift(inst)


# -- file format ------------------------------------------------------------

def save_instance(path: str | Path, inst: AffinityInstance) -> None:
    """Text format: tag line, ``n1 n2``, n1 rows of K_p, ``nnz``, then ``row col value`` lines.

    An optional trailing ``gt`` line lists the ground-truth column of each row.
    """
    lines = [FORMAT_TAG, f"{inst.n1} {inst.n2}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in inst.K_p]
    lines.append(str(len(inst.rows)))
    lines += [f"{r} {c} {float(v)!r}" for r, c, v in zip(inst.rows, inst.cols, inst.values.data)]
    if inst.gt is not None:
        lines.append("gt " + " ".join(str(int(c)) for c in inst.gt))
    Path(path).write_text("\n".join(lines) + "\n")


def load_instance(path: str | Path) -> AffinityInstance:
    text = Path(path).read_text().split("\n")
    lines = [ln.strip() for ln in text if ln.strip()]
    if not lines or lines[0] != FORMAT_TAG:
        raise ValueError(f"{path}: not a {FORMAT_TAG!r} file")
    n1, n2 = (int(x) for x in lines[1].split())
    k_p = np.array([[float(x) for x in lines[2 + i].split()] for i in range(n1)])
    if k_p.shape != (n1, n2):
        raise ValueError(f"{path}: K_p block has shape {k_p.shape}, header says {(n1, n2)}")
    nnz = int(lines[2 + n1])
    body = lines[3 + n1: 3 + n1 + nnz]
    if len(body) != nnz:
        raise ValueError(f"{path}: expected {nnz} COO entries, found {len(body)}")
    rows = np.array([int(ln.split()[0]) for ln in body], dtype=np.int64)
    cols = np.array([int(ln.split()[1]) for ln in body], dtype=np.int64)
    vals = np.array([float(ln.split()[2]) for ln in body])
    gt = None
    rest = lines[3 + n1 + nnz:]
    if rest and rest[0].startswith("gt"):
        gt = np.array([int(x) for x in rest[0].split()[1:]], dtype=np.int64)
    inst = AffinityInstance(n1, n2, Tensor(k_p), rows, cols, Tensor(vals), gt)
    k = inst.dense_array()
    if not np.array_equal(k, k.T):
        raise ValueError(f"{path}: association matrix is not symmetric")
    return inst
