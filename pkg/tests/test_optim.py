import numpy as np
import pytest

from conftest import affine_grid
from shapeasm import encoder as enc
from shapeasm.geom import FaceSample
from shapeasm.optim import (Adam, NonFiniteLossError, TrainSchedule, decode_params, fit_instance,
                            init_params, objective_and_grad, train_amortized, write_trace_csv)
from shapeasm.volume import DistanceFieldGrid, TargetShape

QUICK = TrainSchedule(stage1_iters=60, stage2_iters=40, eval_every=10, eval_points=300)


def test_adam_first_step_is_signed_lr(rng):
    x = {"a": rng.normal(size=10)}
    g = {"a": rng.normal(size=10) * 10 + np.sign(rng.normal(size=10))}
    before = x["a"].copy()
    Adam(lr=0.01).step(x, g)
    assert np.allclose(x["a"] - before, -0.01 * np.sign(g["a"]), atol=1e-6 * 0.01)


def test_adam_zero_grad_no_move():
    x = {"a": np.arange(4.0)}
    Adam(0.1).step(x, {"a": np.zeros(4)})
    assert np.array_equal(x["a"], np.arange(4.0))


def test_adam_two_equal_steps_by_hand():
    g = 0.5
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x = {"a": np.array([0.0])}
    opt = Adam(lr)
    opt.step(x, {"a": np.array([g])})
    first = -x["a"][0]
    opt.step(x, {"a": np.array([g])})
    second = -x["a"][0] - first
    m = (1 - b1) * g
    m = b1 * m + (1 - b1) * g
    v = (1 - b2) * g * g
    v = b2 * v + (1 - b2) * g * g
    want = lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
    assert second == pytest.approx(want, rel=1e-12)
    assert second <= first * (1 + 1e-12)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(stage1_iters=0, stage2_iters=0)
    assert TrainSchedule().total_iters == 4000
    am = TrainSchedule.amortized()
    assert (am.stage1_iters, am.stage2_iters, am.lr_stage1) == (20000, 20000, 1e-3)


def test_init_params_match_documented_start(rng):
    p = init_params(6, rng)
    asm, logits = decode_params(p)
    assert np.allclose(asm.dims, 0.05)
    assert np.all(np.abs(asm.trans) <= 0.3 + 1e-12)
    assert np.allclose(asm.prob, 0.9)
    assert np.allclose(np.linalg.norm(asm.quat, axis=1), 1)


def test_fit_deterministic_and_trace_length(table_target):
    a = fit_instance(table_target, 3, QUICK, seed=4)
    b = fit_instance(table_target, 3, QUICK, seed=4)
    assert len(a.trace) == QUICK.total_iters
    assert a.trace.total == b.trace.total
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.best_objective <= a.final_objective


def test_stage1_trend_decreasing(table_target):
    res = fit_instance(table_target, 4, TrainSchedule(stage1_iters=300, stage2_iters=1), seed=0)
    tot = np.array(res.trace.total[:300])
    assert tot[-30:].mean() < tot[:30].mean()
    assert all(n == 4 for n in res.trace.n_active[:300])


def test_checkpoint_never_worse_than_final(table_target):
    for seed in range(3):
        res = fit_instance(table_target, 4, QUICK, seed=seed)
        assert res.best_objective <= res.final_objective


def test_nonfinite_loss_aborts_with_dump(table_shape):
    bad = DistanceFieldGrid(np.full((5, 5, 5), np.nan), [-0.6] * 3, [0.6] * 3)
    target = TargetShape(table_shape.mesh, None, bad, "bad")
    with pytest.raises(NonFiniteLossError, match="params="):
        fit_instance(target, 2, QUICK, seed=0)


def test_fd_gradients_reproduce_trajectory(table_shape, rng):
    target = TargetShape(table_shape.mesh, None, affine_grid(), "affine")
    pts = table_shape.mesh.vertices[:30] * 0.8
    coeffs = FaceSample.draw(5, rng, batch=2)
    mask = np.array([True, True])

    def run(use_fd):
        params = init_params(2, np.random.default_rng(0))
        opt = Adam(3e-3)
        for _ in range(10):
            _, g = objective_and_grad(params, target, mask, target_pts=pts, coeffs=coeffs)
            if use_fd:
                g = {}
                for k, v in params.items():
                    if k == "logit":
                        continue
                    g[k] = np.zeros_like(v)
                    for idx in np.ndindex(v.shape):
                        old = v[idx]
                        v[idx] = old + 1e-7
                        up = objective_and_grad(params, target, mask, target_pts=pts, coeffs=coeffs)[0].total
                        v[idx] = old - 1e-7
                        dn = objective_and_grad(params, target, mask, target_pts=pts, coeffs=coeffs)[0].total
                        v[idx] = old
                        g[k][idx] = (up - dn) / 2e-7
            opt.step(params, g)
        return params

    a, b = run(False), run(True)
    assert all(np.abs(a[k] - b[k]).max() < 1e-3 for k in a)


def test_trace_csv(tmp_path, table_target):
    res = fit_instance(table_target, 2, QUICK, seed=1)
    f = tmp_path / "t.csv"
    write_trace_csv(f, res.trace)
    lines = f.read_text().splitlines()
    assert lines[0] == "iter,L1,L2,total,n_active"
    assert len(lines) == QUICK.total_iters + 1
    i, l1, l2, tot, n = lines[5].split(",")
    assert int(i) == 4 and float(tot) == pytest.approx(float(l1) + float(l2))


def test_train_amortized_smoke(table_target):
    net = enc.init_weights(enc.EncoderNet(3), 0)
    sched = TrainSchedule.amortized(stage1_iters=20, stage2_iters=10, batch_size=2)
    res = train_amortized([table_target, table_target], net, sched, seed=0)
    assert len(res.trace) == 30
    assert res.parsimony_reward == sched.parsimony_reward
    with pytest.raises(ValueError):
        train_amortized([], net, sched)


def test_train_amortized_deterministic(table_target):
    sched = TrainSchedule.amortized(stage1_iters=5, stage2_iters=5, batch_size=1)
    a = train_amortized([table_target], enc.init_weights(enc.EncoderNet(2), 0), sched, seed=3)
    b = train_amortized([table_target], enc.init_weights(enc.EncoderNet(2), 0), sched, seed=3)
    assert a.trace.total == b.trace.total
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)


@pytest.mark.slow
def test_single_shape_amortized_close_to_direct(table_target):
    from shapeasm.stochastic import mle_mask
    from shapeasm.loss import total_loss
    sched = TrainSchedule(stage1_iters=800, stage2_iters=400)
    direct = fit_instance(table_target, 6, sched, seed=0)
    net = enc.init_weights(enc.EncoderNet(6), 0)
    am = train_amortized([table_target], net, TrainSchedule.amortized(stage1_iters=800, stage2_iters=400,
                                                                       batch_size=1), seed=0)
    heads, _ = enc.forward(am.net, table_target.occupancy.bits)
    asm, logits = enc.decode_heads(heads[0])
    pts = table_target.sample_points(2000, np.random.default_rng(0))
    coeffs = FaceSample.draw(25, np.random.default_rng(1), batch=6)
    amort = total_loss(asm, mle_mask(asm.prob), table_target, target_pts=pts, coeffs=coeffs)[0].total
    d_asm = direct.assembly
    dir_loss = total_loss(d_asm, direct.mask, table_target, target_pts=pts, coeffs=coeffs)[0].total
    assert amort <= 2 * dir_loss or amort < 1e-3


@pytest.mark.slow
def test_active_count_non_increasing_after_onset(table_target):
    ok = 0
    seeds = range(5)
    for seed in seeds:
        res = fit_instance(table_target, 8, TrainSchedule(stage1_iters=1000, stage2_iters=500), seed=seed)
        window = np.array(res.trace.n_active[1000:1500])
        ok += bool(np.all(np.diff(window) <= 0))
    assert ok >= 0.8 * len(seeds)


@pytest.mark.slow
def test_amortized_fifty_shapes_two_classes_near_per_instance():
    from shapeasm.loss import total_loss
    from shapeasm.stochastic import mle_mask
    from shapeasm.synthetic import generate_shape
    rng = np.random.default_rng(11)
    targets = [TargetShape.from_mesh(generate_shape(k, rng).mesh) for k in ["table", "chair"] * 25]

    def evaluate(asm, mask, target, i):
        return total_loss(asm, mask, target, rng=np.random.default_rng([99, i]))[0].total

    res = train_amortized(targets, enc.init_weights(enc.EncoderNet(8), 0),
                          TrainSchedule.amortized(stage1_iters=1000, stage2_iters=2000), seed=0)
    amortized, direct = [], []
    for i, t in enumerate(targets):
        heads, _ = enc.forward(res.net, t.occupancy.bits)
        asm, _ = enc.decode_heads(heads[0])
        amortized.append(evaluate(asm, mle_mask(asm.prob), t, i))
        fit = fit_instance(t, 8, TrainSchedule(), seed=i)
        direct.append(evaluate(fit.assembly, fit.mask, t, i))
    assert np.mean(amortized) < 1.5 * np.mean(direct)
