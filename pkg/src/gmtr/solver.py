"""Graph-transformer QAP solver over the association graph, with Sinkhorn output."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .affinity import AffinityInstance, AssociationGraph, AssociationLift
from .discretize import discretize, qap_objective
from .numerics import LayerNorm, Module, Parameter, Tensor
from .sinkhorn import sinkhorn

BACKENDS = ("transformer", "gcn", "none")


@dataclass
class SolverConfig:
    backend: str = "transformer"
    dim: int = 16
    layers: int = 3
    heads: tuple[int, ...] = (1, 1, 2)
    lift_dim: int = 16
    edge_dim: int = 16
    sinkhorn_channel: bool = True
    channel_tau: float = 1.0
    gcn_dim: int = 17
    sinkhorn_iters: int = 50
    tau: float = 0.05

    def __post_init__(self):
        self.heads = tuple(int(h) for h in self.heads)
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "transformer":
            if len(self.heads) != self.layers:
                raise ValueError(f"need {self.layers} head counts, got {self.heads}")
            for h in self.heads:
                if h < 1 or self.dim % h:
                    raise ValueError(f"head count {h} does not divide dim {self.dim}")


def _attention_support(graph: AssociationGraph) -> np.ndarray:
    return graph.adj | np.eye(graph.size, dtype=bool)


def _edge_projection(graph: AssociationGraph, w_e: Parameter) -> Tensor:
    """Projected edge attributes (M, M, d) with the self-loop attribute on the diagonal."""
    e = nx.matmul(graph.edge_attr, w_e)
    e_self = nx.matmul(nx.reshape(graph.self_attr, (1, -1)), w_e)  # (1, d)
    eye = Tensor(np.eye(graph.size)[:, :, None])
    return e + eye * e_self


def _aggregate(weights: Tensor, v: Tensor, e: Tensor) -> Tensor:
    """``sum_j w_ij (v_j + e_ij)``, summed in a node-order-independent way."""
    msgs = nx.reshape(weights, weights.shape + (1,)) * (nx.reshape(v, (1,) + v.shape) + e)
    return nx.tsum(msgs, axis=1, order_invariant=True)


class TransformerConvLayer(Module):
    """Edge-aware attention over each node's neighbourhood plus itself.

    Hidden layers: ``ReLU(LayerNorm(sum_j a_ij (v_j + e_ij)))`` with heads concatenated.
    The final layer drops ReLU and LayerNorm and averages its heads.
    """

    def __init__(self, d_in: int, d_out: int, d_e: int, heads: int,
                 rng: np.random.Generator, final: bool = False):
        if d_out % heads:
            raise ValueError(f"head count {heads} does not divide {d_out}")
        self.w_q = Parameter(nx.trunc_normal(rng, (d_in, d_out)))
        self.w_k = Parameter(nx.trunc_normal(rng, (d_in, d_out)))
        self.w_v = Parameter(nx.trunc_normal(rng, (d_in, d_out)))
        self.w_e = Parameter(nx.trunc_normal(rng, (d_e, d_out)))
        self.norm = None if final else LayerNorm(d_out)
        self.heads = heads
        self.final = final

    @property
    def out_dim(self) -> int:
        d = self.w_q.shape[1]
        return d // self.heads if self.final else d

    def __call__(self, graph: AssociationGraph, z: Tensor) -> Tensor:
        support = _attention_support(graph)
        q = nx.matmul(z, self.w_q)
        k = nx.matmul(z, self.w_k)
        v = nx.matmul(z, self.w_v)
        e = _edge_projection(graph, self.w_e)
        d = self.w_q.shape[1]
        dh = d // self.heads
        outs = []
        for c in range(self.heads):
            if self.heads == 1:
                qc, kc, vc, ec = q, k, v, e
            else:
                sl = slice(c * dh, (c + 1) * dh)
                qc, kc, vc, ec = q[:, sl], k[:, sl], v[:, sl], e[:, :, sl]
            logits = (nx.matmul(qc, kc.T) + nx.einsum("id,ijd->ij", qc, ec)) * (1.0 / math.sqrt(dh))
            attn = nx.softmax(logits, mask=support, order_invariant=True)
            outs.append(_aggregate(attn, vc, ec))
        if self.final:
            if len(outs) == 1:
                return outs[0]
            total = outs[0]
            for o in outs[1:]:
                total = total + o
            return total * (1.0 / self.heads)
        out = outs[0] if len(outs) == 1 else nx.concat(outs, axis=1)
        return nx.relu(self.norm(out))


class GCNLayer(Module):
    """Normalised-adjacency message passing with edge attributes (ablation backend)."""

    def __init__(self, d_in: int, d_out: int, d_e: int, rng: np.random.Generator,
                 final: bool = False):
        self.weight = Parameter(nx.trunc_normal(rng, (d_in, d_out)))
        self.w_e = Parameter(nx.trunc_normal(rng, (d_e, d_out)))
        self.bias = Parameter(np.zeros(d_out))
        self.final = final

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, graph: AssociationGraph, z: Tensor) -> Tensor:
        a = _attention_support(graph).astype(np.float64)
        inv = 1.0 / np.sqrt(a.sum(axis=1))
        a_hat = Tensor(a * inv[:, None] * inv[None, :])
        e = _edge_projection(graph, self.w_e)
        out = _aggregate(a_hat, nx.matmul(z, self.weight), e) + self.bias
        return out if self.final else nx.relu(out)


def transformer_conv_layer(graph: AssociationGraph, z: Tensor, layer: TransformerConvLayer) -> Tensor:
    return layer(graph, z)


def final_multihead_layer(graph: AssociationGraph, z: Tensor, layer: TransformerConvLayer) -> Tensor:
    if not layer.final:
        raise ValueError("layer was not built as a final layer")
    return layer(graph, z)


class SolverHead(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.w_proj = Parameter(nx.trunc_normal(rng, (d, 1)))


def project_scores(z: Tensor, head: SolverHead, n1: int, n2: int) -> Tensor:
    """FC projection to one score per candidate, reshaped row-major to n1 x n2."""
    return nx.reshape(nx.matmul(z, head.w_proj), (n1, n2))


@dataclass
class MatchingResult:
    soft: np.ndarray
    hard: np.ndarray
    sinkhorn_iters: int
    score: float | None = None

    def to_json(self) -> dict:
        return {"soft": self.soft.tolist(), "hard": self.hard.astype(int).tolist(),
                "score": self.score, "sinkhorn_iters": self.sinkhorn_iters}


class QAPSolver(Module):
    """Association-graph lift, backend layers, FC head, Sinkhorn."""

    def __init__(self, cfg: SolverConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.lift = AssociationLift(cfg.lift_dim, cfg.edge_dim, rng,
                                    cfg.sinkhorn_channel, cfg.channel_tau, cfg.sinkhorn_iters)
        d_in = self.lift.out_dim
        self.layers = []
        if cfg.backend == "transformer":
            for l, h in enumerate(cfg.heads):
                final = l == cfg.layers - 1
                layer = TransformerConvLayer(d_in, cfg.dim, cfg.edge_dim, h, rng, final)
                self.layers.append(layer)
                d_in = layer.out_dim
        elif cfg.backend == "gcn":
            for l in range(cfg.layers):
                layer = GCNLayer(d_in, cfg.gcn_dim, cfg.edge_dim, rng, l == cfg.layers - 1)
                self.layers.append(layer)
                d_in = layer.out_dim
        self.head = SolverHead(d_in, rng)

    @classmethod
    def passthrough(cls, tau: float = 0.05, iters: int = 50) -> "QAPSolver":
        """Scores equal vec(K_p): unit lift, no backend layers, unit projection."""
        cfg = SolverConfig(backend="none", lift_dim=1, edge_dim=1, sinkhorn_channel=False,
                           sinkhorn_iters=iters, tau=tau)
        model = cls(cfg, np.random.default_rng(0))
        model.lift.node_w.data[:] = 1.0
        model.head.w_proj.data[:] = 1.0
        return model

    def embed(self, inst: AffinityInstance) -> Tensor:
        graph = self.lift(inst)
        z = graph.nodes
        for layer in self.layers:
            z = layer(graph, z)
        return z

    def scores(self, inst: AffinityInstance) -> Tensor:
        return project_scores(self.embed(inst), self.head, inst.n1, inst.n2)

    def __call__(self, inst: AffinityInstance) -> Tensor:
        return sinkhorn(self.scores(inst), self.cfg.sinkhorn_iters, self.cfg.tau)


def solve(inst: AffinityInstance, model: QAPSolver) -> MatchingResult:
    with nx.no_grad():
        soft = model(inst).data
    hard = discretize(soft)
    return MatchingResult(soft, hard, model.cfg.sinkhorn_iters,
                          qap_objective(inst.dense_array(), hard))
