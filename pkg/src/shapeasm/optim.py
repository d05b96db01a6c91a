"""Adam, the two-stage schedule, per-instance fitting and amortized training."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .geom import Assembly, FaceSample, normalize_quat
from .loss import LossConfig, ParamGradients, total_loss
from .stochastic import (ReinforceState, expected_loss_step, logit, mle_mask,
                         sigmoid)
from .volume import TargetShape

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: dict | float | None = None) -> None:
        """In-place bias-corrected update; ``lr`` may override per parameter name."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            rate = self.lr if lr is None else (lr.get(k, self.lr) if isinstance(lr, dict) else lr)
            params[k] -= rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def adam_step(state: Adam, params: dict, grads: dict) -> dict:
    state.step(params, grads)
    return params


@dataclass
class TrainSchedule:
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    lr_stage1: float = 3e-3
    lr_stage2: float = 3e-3
    existence_lr: float | None = 0.03
    n_samples: int = 1
    # None: calibrate to reward_scale * baseline when stage 2 starts
    parsimony_reward: float | None = 2e-3
    reward_scale: float = 0.1
    eval_every: int = 50
    eval_points: int = 2000
    batch_size: int = 8

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0 or self.stage1_iters + self.stage2_iters == 0:
            raise ValueError("schedule needs a positive iteration count")

    @property
    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters

    @classmethod
    def amortized(cls, **kw) -> TrainSchedule:
        base = dict(stage1_iters=20000, stage2_iters=20000, lr_stage1=1e-3, lr_stage2=1e-3,
                    existence_lr=None)
        base.update(kw)
        return cls(**base)


@dataclass
class LossTrace:
    coverage: list = field(default_factory=list)
    consistency: list = field(default_factory=list)
    total: list = field(default_factory=list)
    n_active: list = field(default_factory=list)

    def append(self, cov, con, tot, n_active):
        self.coverage.append(float(cov))
        self.consistency.append(float(con))
        self.total.append(float(tot))
        self.n_active.append(int(n_active))

    def __len__(self):
        return len(self.total)

    def rows(self):
        for i, row in enumerate(zip(self.coverage, self.consistency, self.total, self.n_active)):
            yield (i, *row)


@dataclass
class FitResult:
    params: dict
    trace: LossTrace
    parsimony_reward: float
    best_iter: int
    best_objective: float
    final_objective: float
    wall_time: float = 0.0

    @property
    def assembly(self):
        return decode_params(self.params)[0]

    @property
    def logits(self) -> np.ndarray:
        return self.params["logit"].copy()

    @property
    def mask(self) -> np.ndarray:
        return mle_mask(sigmoid(self.params["logit"]))


# -- direct parametrization ---------------------------------------------------

def init_params(m: int, rng) -> dict:
    """Small cubes at random positions with random rotations and p = 0.9."""
    rng = np.random.default_rng(rng)
    return {
        "dims": np.full((m, 3), float(logit(2.0 * enc.INIT_DIMS))),
        "quat": normalize_quat(rng.normal(size=(m, 4))),
        "trans": np.arctanh(2.0 * rng.uniform(-0.3, 0.3, size=(m, 3))),
        "logit": np.full(m, float(logit(enc.INIT_PROB))),
    }


def decode_params(params: dict):
    p = sigmoid(params["logit"])
    asm = Assembly(0.5 * sigmoid(params["dims"]), params["quat"].copy(),
                   0.5 * np.tanh(params["trans"]), p)
    return asm, params["logit"]


def chain_to_raw(params: dict, g: ParamGradients, logit_grad=None) -> dict:
    s = sigmoid(params["dims"])
    t = np.tanh(params["trans"])
    out = {
        "dims": g.d_dims * 0.5 * s * (1 - s),
        "quat": g.d_quat.copy(),
        "trans": g.d_trans * 0.5 * (1 - t * t),
    }
    if logit_grad is not None:
        out["logit"] = np.asarray(logit_grad, dtype=float)
    return out


def objective_and_grad(params: dict, target: TargetShape, mask, cfg: LossConfig | None = None,
                       target_pts=None, coeffs: FaceSample | None = None, rng=None):
    """Deterministic loss and raw-parameter gradients for a fixed mask and samples."""
    asm, _ = decode_params(params)
    report, g = total_loss(asm, mask, target, cfg, rng=rng, target_pts=target_pts, coeffs=coeffs)
    return report, chain_to_raw(params, g)


def _check_finite(value, params, where):
    if not np.isfinite(value):
        dump = {k: np.array2string(v, precision=6) for k, v in params.items()}
        raise NonFiniteLossError(f"non-finite loss {value!r} at {where}; params={dump}")


class _Evaluator:
    """Fixed samples for comparing checkpoints on equal terms."""

    def __init__(self, target: TargetShape, m: int, cfg: LossConfig, n_points: int, rng):
        self.target = target
        self.cfg = cfg
        self.pts = target.sample_points(n_points, rng)
        self.coeffs = FaceSample.draw(cfg.k_per_face, rng, batch=m)

    def __call__(self, params: dict, reward: float) -> float:
        asm, logits = decode_params(params)
        mask = mle_mask(sigmoid(logits))
        report, _ = total_loss(asm, mask, self.target, self.cfg, target_pts=self.pts,
                               coeffs=self.coeffs)
        return report.total - reward * float((~mask).sum())


def fit_instance(target: TargetShape, m: int, schedule: TrainSchedule | None = None, seed=0,
                 cfg: LossConfig | None = None) -> FitResult:
    """Fit M cuboids to one target by direct optimization.

    Stage 1 keeps every primitive present and learns only continuous
    parameters. Stage 2 samples existence masks, learns the existence logits
    by REINFORCE and credits the parsimony reward. The returned parameters are
    the best checkpoint of the last stage under the MLE mask, scored as loss
    minus reward per absent primitive on a fixed evaluation sample.
    """
    schedule = schedule or TrainSchedule()
    cfg = cfg or LossConfig()
    start = time.perf_counter()
    init_ss, step_ss, eval_ss = np.random.SeedSequence(seed).spawn(3)
    params = init_params(m, np.random.default_rng(init_ss))
    rng = np.random.default_rng(step_ss)
    evaluate = _Evaluator(target, m, cfg, schedule.eval_points, np.random.default_rng(eval_ss))
    opt = Adam(schedule.lr_stage1)
    trace = LossTrace()
    state = ReinforceState(samples_per_step=schedule.n_samples)
    all_true = np.ones(m, dtype=bool)
    reward = 0.0
    best = (np.inf, -1, None)

    def checkpoint(it):
        nonlocal best
        score = evaluate(params, reward)
        if score < best[0]:
            best = (score, it, {k: v.copy() for k, v in params.items()})

    for it in range(schedule.total_iters):
        in_stage2 = it >= schedule.stage1_iters
        if it == schedule.stage1_iters:
            reward = (schedule.parsimony_reward if schedule.parsimony_reward is not None
                      else schedule.reward_scale * state.value())
            state.parsimony_reward = reward
            best = (np.inf, -1, None)
            log.debug("stage 2 at iter %d, parsimony reward %.4g", it, reward)
        asm, logits = decode_params(params)
        if in_stage2:
            step = expected_loss_step(asm, logits, target, state, schedule.n_samples, rng, cfg)
            cov, con, tot = step.coverage, step.consistency, step.loss
            raw = chain_to_raw(params, step.grads, step.logit_grad)
            lr = {"logit": schedule.existence_lr or schedule.lr_stage2}
            opt.lr = schedule.lr_stage2
        else:
            report, g = total_loss(asm, all_true, target, cfg, rng=rng)
            cov, con, tot = report.coverage, report.consistency, report.total
            state.update(tot)
            raw = chain_to_raw(params, g)
            lr = None
        _check_finite(tot, params, f"iteration {it}")
        opt.step(params, raw, lr)
        # keep raw quaternions near unit length; the loss only sees the direction
        params["quat"] = normalize_quat(params["quat"])
        trace.append(cov, con, tot, int(mle_mask(sigmoid(params["logit"])).sum()))
        last_of_stage = it == schedule.total_iters - 1 or it == schedule.stage1_iters - 1
        tracking = in_stage2 or schedule.stage2_iters == 0
        if tracking and ((it + 1) % schedule.eval_every == 0 or last_of_stage):
            checkpoint(it)
    final = evaluate(params, reward)
    return FitResult(best[2], trace, reward, best[1], best[0], final, time.perf_counter() - start)


# -- amortized training -------------------------------------------------------

@dataclass
class AmortizedResult:
    net: enc.EncoderNet
    trace: LossTrace
    parsimony_reward: float
    wall_time: float = 0.0


def shape_grad(net_raw, target: TargetShape, stage2: bool, state: ReinforceState, n_samples: int,
               rng, cfg: LossConfig):
    """Loss terms and d(loss)/d(raw head) for one shape."""
    asm, logits = enc.decode_heads(net_raw)
    if stage2:
        step = expected_loss_step(asm, logits, target, state, n_samples, rng, cfg)
        d_raw = enc.decode_backward(net_raw, step.grads, step.logit_grad)
        return (step.coverage, step.consistency, step.loss), d_raw
    report, g = total_loss(asm, np.ones(asm.M, dtype=bool), target, cfg, rng=rng)
    state.update(report.total)
    return (report.coverage, report.consistency, report.total), enc.decode_backward(net_raw, g)


def train_amortized(dataset, net: enc.EncoderNet, schedule: TrainSchedule | None = None, seed=0,
                    cfg: LossConfig | None = None, progress=None) -> AmortizedResult:
    """Train the encoder on a collection of preprocessed targets.

    Minibatches are drawn by cycling through seeded permutations of the
    dataset; per-shape head gradients are averaged in batch order before one
    backward pass.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    schedule = schedule or TrainSchedule.amortized()
    cfg = cfg or LossConfig()
    start = time.perf_counter()
    order_ss, step_ss = np.random.SeedSequence(seed).spawn(2)
    order_rng = np.random.default_rng(order_ss)
    rng = np.random.default_rng(step_ss)
    grids = np.stack([t.occupancy.bits.astype(float) for t in dataset])
    opt = Adam(schedule.lr_stage1)
    state = ReinforceState(samples_per_step=schedule.n_samples)
    trace = LossTrace()
    reward = 0.0
    queue: list = []
    bsz = min(schedule.batch_size, len(dataset))
    for it in range(schedule.total_iters):
        stage2 = it >= schedule.stage1_iters
        if it == schedule.stage1_iters:
            reward = (schedule.parsimony_reward if schedule.parsimony_reward is not None
                      else schedule.reward_scale * state.value())
            state.parsimony_reward = reward
            opt.lr = schedule.lr_stage2
        while len(queue) < bsz:
            queue.extend(order_rng.permutation(len(dataset)).tolist())
        batch, queue = queue[:bsz], queue[bsz:]
        heads, cache = enc.forward(net, grids[batch])
        d_heads = np.zeros_like(heads)
        terms = np.zeros(3)
        n_active = 0
        for b, idx in enumerate(batch):
            vals, d_heads[b] = shape_grad(heads[b], dataset[idx], stage2, state,
                                          schedule.n_samples, rng, cfg)
            _check_finite(vals[2], {"head": heads[b]}, f"iteration {it}, shape {idx}")
            terms += vals
            n_active += int((heads[b].reshape(-1, enc.HEAD_SIZE)[:, 10] > 0).sum())
        grads, _ = enc.backward(net, cache, d_heads / bsz)
        if stage2 and schedule.existence_lr is not None:
            _split_head_step(opt, net, grads, schedule)
        else:
            opt.step(net.params, grads)
        terms /= bsz
        trace.append(terms[0], terms[1], terms[2], round(n_active / bsz))
        if progress is not None:
            progress(it, trace)
    return AmortizedResult(net, trace, reward, time.perf_counter() - start)


def _split_head_step(opt: Adam, net: enc.EncoderNet, grads: dict, schedule: TrainSchedule):
    """Adam step where the existence rows of the head use their own rate."""
    exist_rows = np.arange(net.n_prims) * enc.HEAD_SIZE + 10
    before_w = net.params["head.w"][exist_rows].copy()
    before_b = net.params["head.b"][exist_rows].copy()
    opt.step(net.params, grads)
    scale = schedule.existence_lr / opt.lr
    net.params["head.w"][exist_rows] = before_w + scale * (net.params["head.w"][exist_rows] - before_w)
    net.params["head.b"][exist_rows] = before_b + scale * (net.params["head.b"][exist_rows] - before_b)


def write_trace_csv(path, trace: LossTrace) -> None:
    with open(path, "w") as f:
        f.write("iter,L1,L2,total,n_active\n")
        for i, l1, l2, tot, n in trace.rows():
            f.write(f"{i},{l1!r},{l2!r},{tot!r},{n}\n")
