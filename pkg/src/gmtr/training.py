"""Permutation loss, Adam, training loops, gradient audits and checkpoints."""
from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .affinity import AffinityInstance, EdgeAffinity, NodeAffinity, assemble_lawler, build_graph
from .discretize import discretize, matching_accuracy, perm_to_matrix, qap_objective
from .frontend import FrontendConfig, QueryTrans
from .numerics import Module, Parameter, Tensor
from .sinkhorn import NonFiniteError
from .solver import QAPSolver, SolverConfig
from .syndata import SyntheticPair

MODES = ("end_to_end", "backend_only")
CHECKPOINT_MAGIC = b"GMTR"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 4
    lr_frontend: float = 1e-4
    lr_solver: float = 1e-3
    loss_eps: float = 1e-12
    patience: int = 50
    record_wall_time: bool = False
    # frontend
    dim: int = 32
    depth: int = 2
    patch_size: int = 16
    channels: int = 1
    height: int = 64
    width: int = 64
    use_pos: bool = True
    use_filter: bool = True
    cls_visible: bool = True
    feature_mode: str = "cross+bilinear"
    feature_layers: int = 1
    graph_policy: str = "delaunay"
    # solver
    backend: str = "transformer"
    solver_dim: int = 16
    solver_layers: int = 3
    heads: tuple[int, ...] = (1, 1, 2)
    lift_dim: int = 16
    edge_dim: int = 16
    sinkhorn_channel: bool = True
    channel_tau: float = 1.0
    gcn_dim: int = 17
    sinkhorn_iters: int = 50
    tau: float = 0.05

    def frontend_config(self) -> FrontendConfig:
        return FrontendConfig(dim=self.dim, depth=self.depth, patch_size=self.patch_size,
                              channels=self.channels, height=self.height, width=self.width,
                              use_pos=self.use_pos, use_filter=self.use_filter,
                              cls_visible=self.cls_visible, feature_mode=self.feature_mode,
                              feature_layers=self.feature_layers)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(backend=self.backend, dim=self.solver_dim, layers=self.solver_layers,
                            heads=self.heads, lift_dim=self.lift_dim, edge_dim=self.edge_dim,
                            sinkhorn_channel=self.sinkhorn_channel, channel_tau=self.channel_tau,
                            gcn_dim=self.gcn_dim, sinkhorn_iters=self.sinkhorn_iters, tau=self.tau)


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}


# -- loss -------------------------------------------------------------------

def bce_permutation_loss(m: Tensor, x_gt: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy between a soft matching and a 0/1 ground truth."""
    x_gt = np.asarray(x_gt, dtype=np.float64)
    if m.shape != x_gt.shape:
        raise nx.DimensionError(f"loss shape mismatch: {m.shape} vs {x_gt.shape}")
    if not np.isin(x_gt, (0.0, 1.0)).all():
        raise ValueError("ground-truth matching must be binary")
    mc = nx.clip(m, eps, 1.0 - eps)
    ll = nx.log(mc) * x_gt + nx.log(1.0 - mc) * (1.0 - x_gt)
    # sorted summation keeps the value bit-identical under transposition
    return -nx.tsum(nx.reshape(ll, (-1,)), axis=0, order_invariant=True) * (1.0 / x_gt.size)


# -- models -----------------------------------------------------------------

class GMTR(Module):
    """Full pipeline: QueryTrans features -> Lawler instance -> graph-transformer solver."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.frontend = QueryTrans(cfg.frontend_config(), rng)
        fdim = self.frontend.cfg.feature_dim
        self.node_affinity = NodeAffinity(fdim)
        self.edge_affinity = EdgeAffinity(fdim)
        self.solver = QAPSolver(cfg.solver_config(), rng)

    def affinity(self, pair: SyntheticPair) -> AffinityInstance:
        f1 = self.frontend.extract_features(pair.image_a, pair.kps_a)
        f2 = self.frontend.extract_features(pair.image_b, pair.kps_b)
        g1 = build_graph(pair.kps_a, self.cfg.graph_policy)
        g2 = build_graph(pair.kps_b, self.cfg.graph_policy)
        return assemble_lawler(self.node_affinity(f1, f2),
                               self.edge_affinity(g1, f1, g2, f2), g1, g2)

    def __call__(self, pair: SyntheticPair) -> Tensor:
        return self.solver(self.affinity(pair))

    def param_groups(self) -> dict[str, list[tuple[str, Parameter]]]:
        groups = {"frontend": [], "solver": []}
        for name, p in self.named_parameters():
            groups["frontend" if name.startswith("frontend.") else "solver"].append((name, p))
        return groups


def backend_groups(model: QAPSolver) -> dict[str, list[tuple[str, Parameter]]]:
    return {"solver": list(model.named_parameters())}


def build_model(cfg: TrainConfig, mode: str) -> Module:
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    rng = np.random.default_rng(cfg.seed)
    return GMTR(cfg, rng) if mode == "end_to_end" else QAPSolver(cfg.solver_config(), rng)


def param_groups(model: Module) -> dict[str, list[tuple[str, Parameter]]]:
    return model.param_groups() if isinstance(model, GMTR) else backend_groups(model)


def ground_truth(sample) -> np.ndarray:
    if isinstance(sample, SyntheticPair):
        return sample.x_gt
    if sample.gt is None:
        raise ValueError("instance carries no ground truth")
    return perm_to_matrix(sample.gt, sample.n2)


def sample_loss(model: Module, sample, eps: float = 1e-12) -> Tensor:
    return bce_permutation_loss(model(sample), ground_truth(sample), eps)


def predict(model: Module, sample) -> np.ndarray:
    with nx.no_grad():
        soft = model(sample).data
    return discretize(soft)


def evaluate(model: Module, samples: Sequence) -> list[float]:
    return [matching_accuracy(predict(model, s), ground_truth(s)) for s in samples]


def objective_ratio(model: QAPSolver, inst: AffinityInstance, optimum: float) -> float:
    return qap_objective(inst.dense_array(), predict(model, inst)) / optimum


# -- optimiser --------------------------------------------------------------

class Adam:
    def __init__(self, groups: list[tuple[list[Parameter], float]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for params, lr in self.groups:
            for p in params:
                if p.grad is None or not p.requires_grad:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad ** 2
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training loop ------------------------------------------------------------

def train(dataset: Sequence, cfg: TrainConfig, mode: str = "end_to_end",
          eval_set: Sequence | None = None, model: Module | None = None,
          log_path: str | Path | None = None) -> tuple[Module, list[dict]]:
    """Mini-batch Adam on the permutation loss; returns the model and per-epoch metrics.

    With an ``eval_set`` the parameters from the best-accuracy epoch are restored
    at the end, and training stops after ``patience`` epochs without improvement.
    """
    if not len(dataset):
        raise ValueError("training set is empty")
    if mode == "backend_only" and any(isinstance(s, SyntheticPair) for s in dataset):
        raise ValueError("backend_only training consumes affinity instances, not image pairs")
    model = model if model is not None else build_model(cfg, mode)
    groups = param_groups(model)
    lrs = {"frontend": cfg.lr_frontend, "solver": cfg.lr_solver}
    opt = Adam([([p for _, p in ps], lrs[g]) for g, ps in groups.items()])
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    best_acc, best_state, stale = -1.0, None, 0
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            order = rng.permutation(len(dataset))
            losses = []
            for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
                for p in params:
                    p.grad = None
                total = None
                for s in batch:
                    try:
                        loss = sample_loss(model, s, cfg.loss_eps)
                    except NonFiniteError:
                        raise DivergenceError(epoch, b) from None
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(batch))
                if not np.isfinite(total.data):
                    raise DivergenceError(epoch, b)
                nx.backward(total)
                opt.step()
                losses.append(total.item())
            eval_acc = float(np.mean(evaluate(model, eval_set))) if eval_set else None
            wall = (time.perf_counter() - start) * 1000 if cfg.record_wall_time else 0.0
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "eval_acc": eval_acc, "wall_ms": round(wall, 3)}
            log.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if eval_acc is not None:
                if eval_acc > best_acc:
                    best_acc, best_state, stale = eval_acc, model.state_dict(), 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    finally:
        if sink is not None:
            sink.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, log


# -- gradient audit -----------------------------------------------------------

def grad_audit(model: Module, sample, h: float = 1e-6, max_entries: int | None = 8,
               seed: int = 0, eps: float = 1e-12) -> dict[str, dict]:
    """Finite-difference check of every parameter group through the full loss."""
    report = {}
    rng = np.random.default_rng(seed)
    all_params = dict(model.named_parameters())
    loss_fn = lambda: sample_loss(model, sample, eps)
    for group, named in param_groups(model).items():
        if not any(p.requires_grad for _, p in named):
            report[group] = {"skipped": True}
            continue
        res = nx.finite_diff_check(loss_fn, named, h=h, max_entries=max_entries, rng=rng)
        report[group] = {
            "skipped": False,
            "max_rel": res.max_rel,
            "mean_rel": res.mean_rel,
            "max_abs_small": res.max_abs_small,
            "checked": sum(p.checked for p in res.params),
            "params": {p.name: {"max_rel": p.max_rel, "checked": p.checked, "skipped": p.skipped}
                       for p in res.params},
        }
    for p in all_params.values():
        p.grad = None
    return report


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, model: Module) -> None:
    """``GMTR`` magic, u32 version, u32 count, then per parameter:
    u32 name length, utf-8 name, u32 ndim, u64 dims, little-endian f64 data."""
    named = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, p in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def load_checkpoint(path: str | Path, model: Module) -> Module:
    state = read_checkpoint(path)
    own = dict(model.named_parameters())
    for name, p in own.items():
        if name not in state:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        if tuple(state[name].shape) != p.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {tuple(state[name].shape)}, model {p.shape}")
    extra = sorted(set(state) - set(own))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]}")
    model.load_state_dict(state)
    return model


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["heads"] = list(cfg.heads)
    return d
