"""Command-line harness: dataset generation, training, evaluation, ablations, audits.

Exit codes: 0 success, 2 usage, 3 divergence, 4 checkpoint mismatch, 5 audit failure.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import numerics as nx
from .affinity import AssociationGraph, assemble_lawler, build_graph, load_instance
from .discretize import (AssignmentProblem, brute_force_assignment, brute_force_qap, hungarian,
                         matrix_to_perm)
from .frontend import ImageGrid, build_filter_mask, crop_windows
from .numerics import Tensor
from .sinkhorn import marginal_trace, sinkhorn
from .solver import QAPSolver, solve
from .syndata import GenerationError, PairConfig, gen_pattern_pair, gen_qap_instance, read_dataset, write_dataset
from .training import (CheckpointError, DivergenceError, TrainConfig, build_model, config_dict,
                       evaluate, grad_audit, ground_truth, load_checkpoint, objective_ratio,
                       predict, save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_AUDIT = 0, 2, 3, 4, 5
CONFIG_NAME = "config.txt"
RUN_NAME = "run.json"

DATA_DEFAULTS = {
    "kind": "pairs",
    "n": 5,
    "count": 200,
    "noise": "default",  # pairs 0.0, qap 1.5
    "signal": 1.0,
    "layout": "independent",
    "pattern_types": 0,
    "jitter": 2.0,
    "split_train": 0.8,
    "split_val": 0.1,
    "split_test": 0.1,
}
RUN_DEFAULTS = {"mode": "auto", "split": "test"}

FEATURE_VARIANTS = {
    "bilinear": {"feature_mode": "bilinear", "feature_layers": 1},
    "cross": {"feature_mode": "cross", "feature_layers": 2, "use_filter": False},
    "cross+filter": {"feature_mode": "cross", "feature_layers": 2, "use_filter": True},
    "bilinear+cross": {"feature_mode": "cross+bilinear", "feature_layers": 1, "use_filter": False},
    "bilinear+cross+filter": {"feature_mode": "cross+bilinear", "feature_layers": 1,
                              "use_filter": True},
}
BACKEND_VARIANTS = {"transformer": {"backend": "transformer"}, "gcn": {"backend": "gcn"},
                    "none": {"backend": "none"}}
POS_VARIANTS = {"pos": {"use_pos": True}, "nopos": {"use_pos": False}}


class UsageError(ValueError):
    pass


class AuditFailure(RuntimeError):
    def __init__(self, failures: list[str]):
        super().__init__("audit failed: " + ", ".join(failures))
        self.failures = failures


# -- configuration ------------------------------------------------------------

def config_defaults() -> dict:
    return {**config_dict(TrainConfig()), **DATA_DEFAULTS, **RUN_DEFAULTS}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if key == "noise" and raw == "default":
        return raw
    try:
        if key == "noise":
            return float(raw)
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(x) for x in raw.replace("[", "").replace("]", "").split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, base: dict | None = None) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    cfg = dict(base) if base is not None else config_defaults()
    defaults = config_defaults()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value, defaults[key])
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def train_config(cfg: dict, **overrides) -> TrainConfig:
    keys = config_dict(TrainConfig()).keys()
    kw = {k: cfg[k] for k in keys}
    kw.update(overrides)
    kw["heads"] = tuple(kw["heads"])
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def pair_config(cfg: dict) -> PairConfig:
    try:
        return PairConfig(layout=cfg["layout"], pattern_types=cfg["pattern_types"],
                          jitter=cfg["jitter"], height=cfg["height"], width=cfg["width"],
                          patch_size=cfg["patch_size"], channels=cfg["channels"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def version_string() -> str:
    """``v<version>`` plus a git-describe suffix when run from a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then ``--config`` file, then GMTR_SEED, then command-line flags."""
    cfg = config_defaults()
    if getattr(args, "config", None):
        path = Path(args.config)
        if path.is_dir():
            path = path / CONFIG_NAME
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        cfg = parse_config(path.read_text(), cfg)
    env_seed = os.environ.get("GMTR_SEED")
    if env_seed is not None:
        cfg["seed"] = _coerce("seed", env_seed, 0)
    for item in getattr(args, "set", None) or []:
        cfg = parse_config(item, cfg)
    for key in config_defaults():
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def write_run_record(out: Path, cfg: dict, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(format_config(cfg))
    record = {"command": command, "seed": cfg["seed"], "version": version_string()}
    (out / RUN_NAME).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _dataset_index(directory: Path) -> dict:
    path = directory / "index.json"
    if not path.exists():
        raise UsageError(f"{directory} is not a dataset (no index.json)")
    return json.loads(path.read_text())


def _mode_for(cfg: dict, kind: str) -> str:
    natural = "backend_only" if kind == "qap" else "end_to_end"
    mode = cfg["mode"]
    if mode == "auto":
        return natural
    if mode not in ("end_to_end", "backend_only"):
        raise UsageError(f"unknown mode {mode!r}")
    if mode != natural:
        raise UsageError(f"mode {mode} does not fit a {kind!r} dataset")
    return mode


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands ----------------------------------------------------------------

def cmd_gen(args, cfg: dict) -> int:
    kind, n, count = cfg["kind"], cfg["n"], cfg["count"]
    if kind not in ("pairs", "qap"):
        raise UsageError(f"unknown dataset kind {kind!r}")
    if count < 1:
        raise UsageError("count must be >= 1")
    if kind == "qap" and not 2 <= n <= 8:
        raise UsageError("qap instances need 2 <= n <= 8")
    if kind == "pairs" and n < 2:
        raise UsageError("pairs need n >= 2")
    splits = {"train": cfg["split_train"], "val": cfg["split_val"], "test": cfg["split_test"]}
    if any(v < 0 for v in splits.values()) or abs(sum(splits.values()) - 1.0) > 1e-9:
        raise UsageError("split fractions must be non-negative and sum to 1")
    noise = cfg["noise"]
    if noise == "default":
        noise = 1.5 if kind == "qap" else 0.0
    if noise < 0:
        raise UsageError("noise must be >= 0")
    out = Path(args.out)
    index = write_dataset(out, kind, cfg["seed"], count, n, noise, cfg["signal"],
                          pair_config(cfg) if kind == "pairs" else None, splits)
    write_run_record(out, cfg, "gen")
    print(f"wrote {count} {kind} instances to {out} "
          + " ".join(f"{k}={len(v)}" for k, v in index["files"].items()))
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    data = Path(args.data)
    index = _dataset_index(data)
    mode = _mode_for(cfg, index["kind"])
    cfg["mode"] = mode
    out = Path(args.out)
    write_run_record(out, cfg, "train")
    tcfg = train_config(cfg)
    train_set = read_dataset(data, "train")
    val_set = read_dataset(data, "val") if index["files"].get("val") else None
    model, log = train(train_set, tcfg, mode, eval_set=val_set, log_path=out / "metrics.jsonl")
    save_checkpoint(out / "model.ckpt", model)
    last = log[-1]
    print(f"trained {mode} for {len(log)} epochs; last train_loss={last['train_loss']:.6f} "
          f"eval_acc={last['eval_acc']}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def evaluate_split(model, samples, kind: str, n: int) -> dict:
    accs = evaluate(model, samples)
    report = {"count": len(samples), "accuracy": accs, "mean_accuracy": float(np.mean(accs))}
    if kind == "qap" and n <= 8:
        ratios = [objective_ratio(model, inst, brute_force_qap(inst.dense_array(), n, n)[1])
                  for inst in samples]
        report["objective_ratio"] = ratios
        report["mean_objective_ratio"] = float(np.mean(ratios))
    return report


def _checkpoint_config(args, cfg: dict) -> dict:
    """Prefer the config saved next to the checkpoint unless ``--config`` was given."""
    if getattr(args, "config", None) is None:
        saved = Path(args.checkpoint).parent / CONFIG_NAME
        if saved.exists():
            cfg = parse_config(saved.read_text())
            for item in getattr(args, "set", None) or []:
                cfg = parse_config(item, cfg)
    return cfg


def cmd_eval(args, cfg: dict) -> int:
    cfg = _checkpoint_config(args, cfg)
    data = Path(args.data)
    index = _dataset_index(data)
    mode = _mode_for(dict(cfg, mode="auto") if cfg["mode"] == "auto" else cfg, index["kind"])
    model = build_model(train_config(cfg), mode)
    load_checkpoint(args.checkpoint, model)
    split = args.split or cfg["split"]
    samples = read_dataset(data, split)
    report = {"split": split, "mode": mode, **evaluate_split(model, samples, index["kind"], index["n"])}
    _dump(report, args.out)
    if args.out:
        print(f"mean accuracy {report['mean_accuracy']:.4f} over {report['count']} instances")
    return EXIT_OK


def ablation_grid(kind: str, names: list[str] | None = None) -> dict[str, dict]:
    if kind == "qap":
        grid = {b: dict(v) for b, v in BACKEND_VARIANTS.items()}
    else:
        grid = {f"{f}/{b}/{p}": {**fv, **bv, **pv}
                for f, fv in FEATURE_VARIANTS.items()
                for b, bv in BACKEND_VARIANTS.items()
                for p, pv in POS_VARIANTS.items()}
    if names:
        unknown = [n for n in names if n not in grid]
        if unknown:
            raise UsageError(f"unknown ablation variant {unknown[0]!r}; known: {', '.join(grid)}")
        grid = {n: grid[n] for n in names}
    return grid


def run_ablation(train_set, val_set, test_set, base: dict, grid: dict[str, dict],
                 seeds: list[int], mode: str, progress=None) -> list[dict]:
    rows = []
    for name, overrides in grid.items():
        accs = []
        for seed in seeds:
            tcfg = train_config(base, seed=seed, **overrides)
            model, _ = train(train_set, tcfg, mode, eval_set=val_set)
            accs.append(float(np.mean(evaluate(model, test_set))))
        row = {"variant": name, **{k: v for k, v in overrides.items()},
               "seeds": list(seeds), "accuracy": accs, "mean_accuracy": float(np.mean(accs))}
        rows.append(row)
        if progress:
            progress(row)
    return rows


def format_table(rows: list[dict]) -> str:
    width = max(len(r["variant"]) for r in rows)
    lines = [f"{'variant'.ljust(width)}  mean_acc  per_seed"]
    for r in rows:
        per = " ".join(f"{a:.3f}" for a in r["accuracy"])
        lines.append(f"{r['variant'].ljust(width)}  {r['mean_accuracy']:.4f}    {per}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg: dict) -> int:
    data = Path(args.data)
    index = _dataset_index(data)
    mode = _mode_for(cfg, index["kind"])
    cfg["mode"] = mode
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    grid = ablation_grid(index["kind"], args.variants.split(",") if args.variants else None)
    out = Path(args.out)
    write_run_record(out, cfg, "ablate")
    sets = [read_dataset(data, s) for s in ("train", "val", "test")]
    rows = run_ablation(sets[0], sets[1] or None, sets[2], cfg, grid, seeds, mode,
                        progress=lambda r: print(f"{r['variant']}: {r['mean_accuracy']:.4f}",
                                                 flush=True))
    (out / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    table = format_table(rows)
    (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# -- audit --------------------------------------------------------------------

def overlap_cells(img: ImageGrid, kp) -> set[int]:
    """Grid cells sharing at least one pixel with the clamped crop (pixel-count oracle)."""
    p = img.patch_size
    x0, y0 = crop_windows(np.asarray([kp]), img.height, img.width, p)[0]
    cover = np.zeros((img.height, img.width), dtype=bool)
    cover[y0:y0 + p, x0:x0 + p] = True
    gh, gw = img.grid
    counts = cover.reshape(gh, p, gw, p).sum(axis=(1, 3)).reshape(-1)
    return set(np.flatnonzero(counts > 0).tolist())


def check_mask_locality(frontend, img: ImageGrid, kps) -> list[str]:
    """Problems found comparing key-token attention with the geometric oracle."""
    out = frontend.encode(img, kps, with_keys=True)
    problems = []
    for layer, attn in enumerate(out.attention):
        a = attn.data
        if out.mask is not None and (a[~out.mask] != 0).any():
            problems.append(f"layer {layer}: attention outside mask")
        for i, kp in enumerate(kps):
            support = set((np.flatnonzero(a[i, 1:] > 0)).tolist())
            if not 1 <= len(support) <= 4:
                problems.append(f"layer {layer} keypoint {i}: support size {len(support)}")
            extra = support - overlap_cells(img, kp)
            if extra:
                problems.append(f"layer {layer} keypoint {i}: attends to non-overlapping cells {sorted(extra)}")
    return problems


def check_pretrain_isolation(frontend, img: ImageGrid, kps) -> bool:
    a = frontend.encode(img, kps, with_keys=True)
    b = frontend.encode(img, np.zeros((0, 2)), with_keys=True)
    return all(np.array_equal(x.prefix.data, y.prefix.data) for x, y in zip(a.layers, b.layers))


def check_keypoint_equivariance(frontend, img: ImageGrid, kps, rng) -> bool:
    perm = rng.permutation(len(kps))
    with nx.no_grad():
        a = frontend.extract_features(img, kps).data
        b = frontend.extract_features(img, kps[perm]).data
    return np.array_equal(b, a[perm])


def check_solver_equivariance(solver: QAPSolver, inst, rng) -> bool:
    with nx.no_grad():
        graph = solver.lift(inst)
        pi = rng.permutation(graph.size)
        permuted = AssociationGraph(graph.nodes[pi], graph.edge_attr[pi][:, pi],
                                    graph.self_attr, graph.adj[np.ix_(pi, pi)])
        outs = []
        for g in (graph, permuted):
            z = g.nodes
            for layer in solver.layers:
                z = layer(g, z)
            outs.append(z.data)
    return np.array_equal(outs[1], outs[0][pi])


def corrupt_mask_builder(img, kps, cls_visible=True):
    """Negative control: also admits the grid cell farthest from each crop."""
    mask = build_filter_mask(img, kps, cls_visible)
    gh, gw = img.grid
    for i, (u, v) in enumerate(np.asarray(kps)):
        col = 0 if u >= img.width / 2 else gw - 1
        row = 0 if v >= img.height / 2 else gh - 1
        mask[i, 1 + row * gw + col] = True
    return mask


def run_audit(cfg: dict, mode: str, fault: str | None = None, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    tcfg = train_config(cfg)
    checks: dict[str, dict] = {}

    def record(name, ok, **info):
        checks[name] = {"ok": bool(ok), **info}

    model = build_model(tcfg, mode)
    if mode == "end_to_end":
        sample = gen_pattern_pair(seed, cfg["n"], 0.0, pair_config(cfg))
    else:
        sample = gen_qap_instance(seed, cfg["n"])[0]
    report = grad_audit(model, sample, seed=seed)
    for group, res in report.items():
        if res["skipped"]:
            record(f"grad_{group}", True, skipped=True)
        else:
            record(f"grad_{group}", res["max_rel"] <= 1e-4 and res["max_abs_small"] <= 1e-9,
                   max_rel=res["max_rel"], max_abs_small=res["max_abs_small"])

    if mode == "end_to_end":
        frontend = model.frontend
        if fault == "mask":
            frontend.mask_builder = corrupt_mask_builder
        img = ImageGrid(rng.random((tcfg.channels, tcfg.height, tcfg.width)), tcfg.patch_size)
        kps = rng.uniform(0, [tcfg.width, tcfg.height], (50, 2))
        problems = check_mask_locality(frontend, img, kps)
        record("mask_locality", not problems, problems=problems[:10])
        record("pretrain_isolation", check_pretrain_isolation(frontend, img, kps))
        record("keypoint_equivariance", check_keypoint_equivariance(frontend, img, kps[:8], rng))
    else:
        for name in ("mask_locality", "pretrain_isolation", "keypoint_equivariance"):
            record(name, True, skipped=True)

    worst = 0.0
    for _ in range(50):
        m = sinkhorn(rng.uniform(-1, 1, (10, 10)), tcfg.sinkhorn_iters, 1.0).data
        worst = max(worst, np.abs(m.sum(1) - 1).max(), np.abs(m.sum(0) - 1).max())
    record("sinkhorn_marginals", worst <= 1e-6, max_deviation=worst, tau=1.0)
    rises = 0
    for _ in range(50):
        trace = marginal_trace(rng.uniform(-10, 10, (10, 10)), tcfg.sinkhorn_iters, tcfg.tau)
        rises += int((np.diff(trace) > 1e-14).sum())
    record("sinkhorn_monotone", rises == 0, increases=rises)

    mismatches = 0
    for _ in range(50):
        s = rng.normal(size=(6, 6))
        x, val = hungarian(AssignmentProblem(s))
        perm, best = brute_force_assignment(s)
        mismatches += int(val != best or tuple(matrix_to_perm(x)) != perm)
    record("hungarian_enumeration", mismatches == 0, mismatches=mismatches)
    mismatches = 0
    for _ in range(20):
        kp = rng.normal(size=(5, 5))
        g1, g2 = (build_graph(rng.uniform(0, 9, (5, 2))) for _ in range(2))
        inst = assemble_lawler(Tensor(kp), Tensor(np.zeros((len(g1.edges), len(g2.edges)))), g1, g2)
        perm, _ = brute_force_qap(inst.dense_array(), 5, 5)
        mismatches += int(perm != tuple(matrix_to_perm(hungarian(AssignmentProblem(kp))[0])))
    record("qap_diagonal_oracle", mismatches == 0, mismatches=mismatches)

    solver = model.solver if mode == "end_to_end" else model
    inst = gen_qap_instance(seed + 1, min(cfg["n"], 8))[0]
    record("solver_equivariance", check_solver_equivariance(solver, inst, rng))
    return checks


def cmd_audit(args, cfg: dict) -> int:
    mode = cfg["mode"] if cfg["mode"] != "auto" else "end_to_end"
    if mode not in ("end_to_end", "backend_only"):
        raise UsageError(f"unknown mode {mode!r}")
    checks = run_audit(cfg, mode, args.fault, cfg["seed"])
    for name, res in checks.items():
        status = "skip" if res.get("skipped") else ("pass" if res["ok"] else "FAIL")
        print(f"{status:4}  {name}")
    if args.out:
        out = Path(args.out)
        write_run_record(out, cfg, "audit")
        (out / "audit.json").write_text(json.dumps(checks, indent=1, sort_keys=True,
                                                   default=float) + "\n")
    failures = [name for name, res in checks.items() if not res["ok"]]
    if failures:
        raise AuditFailure(failures)
    return EXIT_OK


def cmd_solve(args, cfg: dict) -> int:
    try:
        inst = load_instance(args.instance)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if args.checkpoint:
        cfg = _checkpoint_config(args, cfg)
        model = build_model(train_config(cfg), "backend_only")
        load_checkpoint(args.checkpoint, model)
    else:
        model = QAPSolver.passthrough(cfg["tau"], cfg["sinkhorn_iters"])
    result = solve(inst, model)
    _dump(result.to_json(), args.out)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmtr", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file (or a run directory)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--kind", choices=["pairs", "qap"])
    g.add_argument("--n", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--signal", type=float)
    g.add_argument("--layout")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train on a generated dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=["auto", "end_to_end", "backend_only"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split")
    e.add_argument("--out", help="report path (default stdout)")

    a = sub.add_parser("ablate", help="train and evaluate the variant grid")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    a.add_argument("--variants", help="comma-separated subset of the grid")
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", required=True)

    u = sub.add_parser("audit", help="gradient and invariant checks")
    common(u)
    u.add_argument("--mode", choices=["end_to_end", "backend_only"])
    u.add_argument("--fault", choices=["mask"], help=argparse.SUPPRESS)
    u.add_argument("--out")

    s = sub.add_parser("solve", help="solve one affinity-instance file")
    common(s)
    s.add_argument("--instance", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--out", help="result path (default stdout)")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "audit": cmd_audit, "solve": cmd_solve}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            cfg = resolve_config(args)
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except AuditFailure as exc:
        print("audit failures: " + ", ".join(exc.failures), file=sys.stderr)
        return EXIT_AUDIT
    except (ValueError, KeyError, GenerationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())
