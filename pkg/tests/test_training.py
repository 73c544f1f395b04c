import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmtr import numerics as nx
from gmtr.numerics import Tensor
from gmtr.syndata import gen_pattern_pair, gen_qap_instance
from gmtr.training import (GMTR, Adam, CheckpointError, DivergenceError, TrainConfig,
                           bce_permutation_loss, build_model, evaluate, grad_audit,
                           load_checkpoint, param_groups, read_checkpoint, sample_loss,
                           save_checkpoint, train)

SMALL = dict(dim=8, depth=1)


def test_perfect_prediction_loss_is_tiny():
    x = np.eye(3)[[1, 2, 0]]
    assert bce_permutation_loss(Tensor(x), x).item() <= 1e-11


def test_uniform_half_is_ln2():
    loss = bce_permutation_loss(Tensor(np.full((3, 3), 0.5)), np.eye(3)).item()
    assert abs(loss - math.log(2)) <= 1e-15


def test_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    m = rng.uniform(0.01, 0.99, (3, 3))
    x = (rng.random((3, 3)) < 0.4).astype(float)
    total = 0.0
    for i in range(3):
        for j in range(3):
            total += x[i, j] * math.log(m[i, j]) + (1 - x[i, j]) * math.log(1 - m[i, j])
    assert abs(bce_permutation_loss(Tensor(m), x).item() - (-total / 9)) <= 1e-12


def test_loss_rejects_non_binary_target():
    with pytest.raises(ValueError, match="binary"):
        bce_permutation_loss(Tensor(np.full((2, 2), 0.5)), np.full((2, 2), 0.5))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(0, 1)),
       arrays(np.bool_, (4, 5)))
def test_loss_symmetric_and_nonnegative(m, x):
    x = x.astype(float)
    a = bce_permutation_loss(Tensor(m), x).item()
    b = bce_permutation_loss(Tensor(m.T), x.T).item()
    assert a == b
    assert a >= 0.0


def _qap_set(count, n=4, start=0):
    return [gen_qap_instance(start + s, n)[0] for s in range(count)]


def test_zero_learning_rates_leave_parameters_bit_identical():
    cfg = TrainConfig(epochs=2, lr_frontend=0.0, lr_solver=0.0, **SMALL)
    pairs = [gen_pattern_pair(s, 3) for s in range(3)]
    before = build_model(cfg, "end_to_end").state_dict()
    model, _ = train(pairs, cfg, "end_to_end")
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_overfit_single_instance():
    inst = _qap_set(1)
    cfg = TrainConfig(epochs=10, lr_solver=1e-2)
    _, log = train(inst, cfg, "backend_only")
    assert log[-1]["train_loss"] < log[0]["train_loss"]


def test_same_seed_same_log(tmp_path):
    data, val = _qap_set(8), _qap_set(3, start=100)
    cfg = TrainConfig(epochs=2, seed=3)
    _, a = train(data, cfg, "backend_only", eval_set=val, log_path=tmp_path / "a.jsonl")
    _, b = train(data, cfg, "backend_only", eval_set=val, log_path=tmp_path / "b.jsonl")
    assert a == b
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert set(a[0]) == {"epoch", "train_loss", "eval_acc", "wall_ms"}


def test_best_epoch_is_restored():
    data, val = _qap_set(8), _qap_set(4, start=50)
    cfg = TrainConfig(epochs=4, lr_solver=5e-2)
    model, log = train(data, cfg, "backend_only", eval_set=val)
    best = max(r["eval_acc"] for r in log)
    assert np.mean(evaluate(model, val)) == best


def test_patience_stops_early():
    data, val = _qap_set(4), _qap_set(2, start=60)
    _, log = train(data, TrainConfig(epochs=20, patience=2, lr_solver=0.0), "backend_only",
                   eval_set=val)
    assert len(log) == 3


def test_divergence_reports_epoch_and_batch():
    model = build_model(TrainConfig(), "backend_only")
    model.head.w_proj.data[:] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(_qap_set(2), TrainConfig(epochs=1), "backend_only", model=model)
    assert err.value.epoch == 0 and err.value.batch == 0


def test_backend_only_rejects_image_pairs():
    with pytest.raises(ValueError, match="affinity"):
        train([gen_pattern_pair(0, 3)], TrainConfig(), "backend_only")


def test_two_learning_rate_groups():
    model = build_model(TrainConfig(**SMALL), "end_to_end")
    groups = param_groups(model)
    assert set(groups) == {"frontend", "solver"}
    assert all(n.startswith("frontend.") for n, _ in groups["frontend"])
    assert not any(n.startswith("frontend.") for n, _ in groups["solver"])


def test_adam_first_step_is_sign_times_lr():
    p = nx.Parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 0.0])
    Adam([([p], 0.1)]).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-9)


def test_grad_audit_end_to_end_toy():
    model = build_model(TrainConfig(**SMALL), "end_to_end")
    report = grad_audit(model, gen_pattern_pair(1, 3), max_entries=6)
    for group in ("frontend", "solver"):
        assert not report[group]["skipped"]
        assert report[group]["max_rel"] <= 1e-4
        assert report[group]["max_abs_small"] <= 1e-9


def test_grad_audit_backend_only():
    model = build_model(TrainConfig(), "backend_only")
    report = grad_audit(model, _qap_set(1)[0], max_entries=6)
    assert list(report) == ["solver"]
    assert report["solver"]["max_rel"] <= 1e-4


def test_grad_audit_skips_frozen_frontend():
    model = build_model(TrainConfig(**SMALL), "end_to_end")
    model.frontend.freeze()
    report = grad_audit(model, gen_pattern_pair(2, 3), max_entries=3)
    assert report["frontend"] == {"skipped": True}
    assert not report["solver"]["skipped"]


def test_every_parameter_receives_gradient():
    model = build_model(TrainConfig(**SMALL), "end_to_end")
    for p in model.parameters():
        p.grad = None
    nx.backward(sample_loss(model, gen_pattern_pair(4, 5)))
    dead = [n for n, p in model.named_parameters()
            if p.grad is None or not np.any(p.grad)]
    assert dead == []
    norms = {g: sum(float(np.sum(p.grad ** 2)) for _, p in ps)
             for g, ps in param_groups(model).items()}
    assert all(v > 0 for v in norms.values())


def test_checkpoint_round_trip(tmp_path):
    model = build_model(TrainConfig(**SMALL), "end_to_end")
    save_checkpoint(tmp_path / "m.ckpt", model)
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"GMTR"
    fresh = build_model(TrainConfig(seed=9, **SMALL), "end_to_end")
    load_checkpoint(tmp_path / "m.ckpt", fresh)
    a, b = model.state_dict(), fresh.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    pair = gen_pattern_pair(5, 4)
    with nx.no_grad():
        assert np.array_equal(model(pair).data, fresh(pair).data)


def test_checkpoint_mismatch_names_parameter(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", build_model(TrainConfig(), "backend_only"))
    other = build_model(TrainConfig(solver_dim=8, heads=(1, 1, 2)), "backend_only")
    with pytest.raises(CheckpointError, match="solver|layers.0.w_q"):
        load_checkpoint(tmp_path / "m.ckpt", other)
    with pytest.raises(CheckpointError, match="missing parameter"):
        load_checkpoint(tmp_path / "m.ckpt", build_model(TrainConfig(backend="gcn"), "backend_only"))


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "x.ckpt")


def test_gmtr_model_types():
    assert isinstance(build_model(TrainConfig(**SMALL), "end_to_end"), GMTR)
    with pytest.raises(ValueError):
        build_model(TrainConfig(), "frontend_only")
