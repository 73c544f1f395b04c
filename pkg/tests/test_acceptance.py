"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (about ten minutes on one core).
Result lines are also appended to ``acceptance_results.txt`` in the working directory.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from gmtr import numerics as nx
from gmtr.affinity import assemble_lawler, build_graph
from gmtr.discretize import (AssignmentProblem, brute_force_assignment, brute_force_qap,
                             hungarian, matrix_to_perm)
from gmtr.frontend import ImageGrid, QueryTrans
from gmtr.harness import ablation_grid, check_mask_locality, check_pretrain_isolation, run_ablation
from gmtr.numerics import Tensor
from gmtr.sinkhorn import marginal_trace, sinkhorn
from gmtr.syndata import PairConfig, gen_pattern_pair, gen_qap_instance, pixel_nearest_oracle
from gmtr.training import (TrainConfig, build_model, config_dict, evaluate, grad_audit,
                           objective_ratio, train)

pytestmark = pytest.mark.acceptance

REL_TOL = 1e-4  # criterion 1
ABS_TOL_SMALL = 1e-9  # criterion 1, entries below the small-gradient threshold
MARGINAL_TOL = 1e-6  # criterion 2
MONOTONE_SLACK = 1e-14  # criterion 2, float64 rounding at convergence
BACKEND_ACC, BACKEND_RATIO = 0.90, 0.97  # criterion 5
E2E_ACC = 0.95  # criterion 6

BACKEND_EPOCHS = 5
E2E_EPOCHS = 10
ABLATION = dict(pattern_types=2, noise=0.05, layout="jitter", epochs=8, seeds=(1, 2, 3),
                train=120, val=30, test=60)

RESULTS = Path("acceptance_results.txt")
_logs: dict[str, bytes] = {}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, seconds, limit=None):
        over = limit is not None and seconds > limit
        status = "PASS" if ok and not over else "FAIL"
        budget = f" (limit {limit:.0f}s)" if limit is not None else ""
        line = f"{status} criterion {number}: {detail} [{seconds:.1f}s{budget}]"
        with capsys.disabled():
            print("\n" + line)
        with RESULTS.open("a") as fh:
            fh.write(line + "\n")
        assert ok, line
        assert not over, line
    return emit


def test_criterion_1_gradient_audit(report):
    t0 = time.perf_counter()
    cfg = TrainConfig()
    model = build_model(cfg, "end_to_end")
    sample = gen_pattern_pair(0, 5)
    res = grad_audit(model, sample, h=1e-6, max_entries=8, seed=0)
    ok = all(not r["skipped"] and r["max_rel"] <= REL_TOL and r["max_abs_small"] <= ABS_TOL_SMALL
             for r in res.values())
    detail = "; ".join(f"{g} max_rel={r['max_rel']:.2e} abs_small={r['max_abs_small']:.1e} "
                       f"entries={r['checked']}" for g, r in res.items())
    report(1, ok, detail, time.perf_counter() - t0, 60)


def test_criterion_2_sinkhorn_contract(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, bad_marginal, bad_monotone = 0.0, 0, 0
    for _ in range(1000):
        s = rng.uniform(-10, 10, (10, 10))
        with nx.no_grad():
            m = sinkhorn(s, 50, 0.05).data
        dev = max(np.abs(m.sum(1) - 1).max(), np.abs(m.sum(0) - 1).max())
        worst = max(worst, dev)
        bad_marginal += int(dev > MARGINAL_TOL)
        bad_monotone += int((np.diff(marginal_trace(s, 50, 0.05)) > MONOTONE_SLACK).any())
    ok = bad_marginal == 0 and bad_monotone == 0
    detail = (f"max marginal deviation {worst:.3e}, {bad_marginal}/1000 above {MARGINAL_TOL:g}, "
              f"{bad_monotone}/1000 non-monotone")
    report(2, ok, detail, time.perf_counter() - t0, 10)


def test_criterion_3_mask_locality(report):
    t0 = time.perf_counter()
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    frontend = QueryTrans(cfg.frontend_config(), rng)
    problems, isolated, done = [], True, 0
    for _ in range(10):
        img = ImageGrid(rng.random((cfg.channels, cfg.height, cfg.width)), cfg.patch_size)
        kps = rng.uniform(0, [cfg.width, cfg.height], (50, 2))
        with nx.no_grad():
            problems += check_mask_locality(frontend, img, kps)
            isolated &= check_pretrain_isolation(frontend, img, kps)
        done += len(kps)
    ok = not problems and isolated and done == 500
    detail = f"{done} keypoints, {len(problems)} locality violations, raw path isolated={isolated}"
    report(3, ok, detail, time.perf_counter() - t0, 30)


def test_criterion_4_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    lap_bad = 0
    for _ in range(1000):
        s = rng.normal(size=(7, 7))
        x, val = hungarian(AssignmentProblem(s))
        perm, best = brute_force_assignment(s)
        lap_bad += int(val != best)
    qap_bad = 0
    for _ in range(200):
        n = 5
        kp = rng.normal(size=(n, n))
        g1, g2 = (build_graph(rng.uniform(0, 9, (n, 2))) for _ in range(2))
        inst = assemble_lawler(Tensor(kp), Tensor(np.zeros((len(g1.edges), len(g2.edges)))), g1, g2)
        perm, val = brute_force_qap(inst.dense_array(), n, n)
        x, hval = hungarian(AssignmentProblem(kp))
        qap_bad += int(perm != tuple(matrix_to_perm(x)) or abs(val - hval) > 1e-12)
    ok = lap_bad == 0 and qap_bad == 0
    detail = f"hungarian vs enumeration {lap_bad}/1000 mismatches; diagonal QAP {qap_bad}/200"
    report(4, ok, detail, time.perf_counter() - t0, 120)


def _backend_run(log_path):
    train_set = [gen_qap_instance(s, 5)[0] for s in range(500)]
    val_set = [gen_qap_instance(10_000 + s, 5)[0] for s in range(50)]
    test_set = [gen_qap_instance(20_000 + s, 5)[0] for s in range(100)]
    cfg = TrainConfig(epochs=BACKEND_EPOCHS)
    model, _ = train(train_set, cfg, "backend_only", eval_set=val_set, log_path=log_path)
    acc = float(np.mean(evaluate(model, test_set)))
    ratio = float(np.mean([objective_ratio(model, inst, brute_force_qap(inst.dense_array(), 5, 5)[1])
                           for inst in test_set]))
    return acc, ratio


def test_criterion_5_backend_only(report, tmp_path):
    t0 = time.perf_counter()
    acc, ratio = _backend_run(tmp_path / "backend.jsonl")
    _logs["backend"] = (tmp_path / "backend.jsonl").read_bytes()
    ok = acc >= BACKEND_ACC and ratio >= BACKEND_RATIO
    detail = f"test accuracy {acc:.3f} (>= {BACKEND_ACC}), objective ratio {ratio:.4f} (>= {BACKEND_RATIO})"
    report(5, ok, detail, time.perf_counter() - t0, 600)


def _e2e_run(log_path):
    train_set = [gen_pattern_pair(s, 5, 0.0) for s in range(200)]
    val_set = [gen_pattern_pair(10_000 + s, 5, 0.0) for s in range(30)]
    test_set = [gen_pattern_pair(20_000 + s, 5, 0.0) for s in range(50)]
    oracle = float(np.mean([np.mean(pixel_nearest_oracle(p) == p.perm) for p in test_set]))
    model, _ = train(train_set, TrainConfig(epochs=E2E_EPOCHS), "end_to_end", eval_set=val_set,
                     log_path=log_path)
    return float(np.mean(evaluate(model, test_set))), oracle


def test_criterion_6_end_to_end(report, tmp_path):
    t0 = time.perf_counter()
    acc, oracle = _e2e_run(tmp_path / "e2e.jsonl")
    _logs["e2e"] = (tmp_path / "e2e.jsonl").read_bytes()
    ok = acc >= E2E_ACC and oracle == 1.0
    detail = f"test accuracy {acc:.3f} (>= {E2E_ACC}), pixel oracle {oracle:.3f}"
    report(6, ok, detail, time.perf_counter() - t0, 900)


def test_criterion_7_ablation_directions(report):
    t0 = time.perf_counter()
    a = ABLATION
    pc = PairConfig(layout=a["layout"], pattern_types=a["pattern_types"])
    make = lambda start, count: [gen_pattern_pair(start + s, 5, a["noise"], pc) for s in range(count)]
    train_set, val_set, test_set = make(0, a["train"]), make(10_000, a["val"]), make(20_000, a["test"])
    names = {
        "base": "bilinear+cross+filter/transformer/pos",
        "cross": "cross/transformer/pos",
        "cross_filter": "cross+filter/transformer/pos",
        "no_backend": "bilinear+cross+filter/none/pos",
        "no_pos": "bilinear+cross+filter/transformer/nopos",
    }
    grid = ablation_grid("pairs", list(names.values()))
    base = config_dict(TrainConfig(epochs=a["epochs"]))
    rows = run_ablation(train_set, val_set, test_set, base, grid, list(a["seeds"]), "end_to_end")
    acc = {key: next(r["mean_accuracy"] for r in rows if r["variant"] == name)
           for key, name in names.items()}
    checks = {
        "a": acc["cross"] <= acc["cross_filter"],
        "b": acc["no_backend"] < acc["base"],
        "c": acc["no_pos"] < acc["base"],
    }
    detail = (f"(a) cross {acc['cross']:.3f} <= cross+filter {acc['cross_filter']:.3f} {checks['a']}; "
              f"(b) no backend {acc['no_backend']:.3f} < transformer {acc['base']:.3f} {checks['b']}; "
              f"(c) no pos {acc['no_pos']:.3f} < baseline {acc['base']:.3f} {checks['c']}")
    report(7, all(checks.values()), detail, time.perf_counter() - t0)


def test_criterion_8_determinism(report, tmp_path):
    t0 = time.perf_counter()
    if "backend" not in _logs:
        _backend_run(tmp_path / "backend0.jsonl")
        _logs["backend"] = (tmp_path / "backend0.jsonl").read_bytes()
    if "e2e" not in _logs:
        _e2e_run(tmp_path / "e2e0.jsonl")
        _logs["e2e"] = (tmp_path / "e2e0.jsonl").read_bytes()
    _backend_run(tmp_path / "backend.jsonl")
    _e2e_run(tmp_path / "e2e.jsonl")
    same = {"backend": (tmp_path / "backend.jsonl").read_bytes() == _logs["backend"],
            "e2e": (tmp_path / "e2e.jsonl").read_bytes() == _logs["e2e"]}
    detail = f"byte-identical metrics logs: backend_only={same['backend']}, end_to_end={same['e2e']}"
    report(8, all(same.values()), detail, time.perf_counter() - t0)
