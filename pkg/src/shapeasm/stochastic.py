"""Bernoulli primitive existence: sampling, REINFORCE gradients, MLE masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Assembly
from .loss import LossConfig, ParamGradients, total_loss
from .volume import TargetShape


def sigmoid(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class ReinforceState:
    """Running loss baseline (EMA) and the parsimony reward."""

    baseline: float | None = None
    parsimony_reward: float = 0.0
    samples_per_step: int = 1
    decay: float = 0.9

    def update(self, loss: float) -> None:
        if self.baseline is None:
            self.baseline = float(loss)
        else:
            self.baseline = self.decay * self.baseline + (1.0 - self.decay) * float(loss)

    def value(self) -> float:
        return 0.0 if self.baseline is None else self.baseline


def sample_mask(prob, rng) -> np.ndarray:
    prob = np.asarray(prob, dtype=float)
    return np.random.default_rng(rng).random(prob.shape) < prob


def mle_mask(prob) -> np.ndarray:
    return np.asarray(prob, dtype=float) > 0.5


def reinforce_grad(loss: float, mask, state: ReinforceState, logits):
    """Score-function gradient for the existence logits of one sampled mask.

    Returns ``(choice_grad, logit_grad)``. ``choice_grad`` is the per-choice
    feedback ``l - b - 1(absent) r``, signed so that it reads as a gradient with
    respect to ``p_m``: ``l - b`` when the primitive was sampled present and
    ``-(l - b - r)`` when absent. It is the derivative of the loss with respect
    to the log-probability of the sampled choice, so chaining through
    ``log Bern(z; sigmoid(a))`` gives the unbiased ``logit_grad``.
    """
    mask = np.asarray(mask, dtype=bool)
    p = sigmoid(logits)
    adv = float(loss) - state.value()
    feedback = np.where(mask, adv, adv - state.parsimony_reward)
    choice_grad = np.where(mask, feedback, -feedback)
    # d log pi(z) / d a = z - p
    logit_grad = feedback * (mask.astype(float) - p)
    return choice_grad, logit_grad


@dataclass
class ExpectedStep:
    loss: float
    coverage: float
    consistency: float
    grads: ParamGradients
    logit_grad: np.ndarray
    masks: list


def expected_loss_step(asm: Assembly, logits, target: TargetShape, state: ReinforceState,
                       n_samples: int = 1, rng=None, cfg: LossConfig | None = None) -> ExpectedStep:
    """Monte-Carlo estimate of the expected loss over existence masks.

    Continuous gradients are averaged over the sampled masks; the existence
    gradients accumulate one REINFORCE term per sample. The baseline moves
    only after every gradient of this step is computed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng)
    p = sigmoid(logits)
    grads = ParamGradients.zeros(asm.M)
    logit_grad = np.zeros(asm.M)
    losses, covs, cons, masks = [], [], [], []
    for _ in range(n_samples):
        mask = sample_mask(p, rng)
        report, g = total_loss(asm, mask, target, cfg, rng=rng)
        grads = grads + g
        _, lg = reinforce_grad(report.total, mask, state, logits)
        logit_grad += lg
        losses.append(report.total)
        covs.append(report.coverage)
        cons.append(report.consistency)
        masks.append(mask)
    inv = 1.0 / n_samples
    mean_loss = float(np.mean(losses))
    state.update(mean_loss)
    return ExpectedStep(mean_loss, float(np.mean(covs)), float(np.mean(cons)),
                        grads.scale(inv), logit_grad * inv, masks)


def enumerate_masks(m: int):
    """All 2^m existence masks, lowest index varying fastest."""
    bits = (np.arange(2 ** m)[:, None] >> np.arange(m)) & 1
    return bits.astype(bool)


def mask_probability(mask, prob) -> float:
    mask = np.asarray(mask, dtype=bool)
    prob = np.asarray(prob, dtype=float)
    return float(np.prod(np.where(mask, prob, 1.0 - prob)))
