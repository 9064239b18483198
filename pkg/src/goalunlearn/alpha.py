"""REINFORCE adaptation of the forget/retain weight alpha.

The policy is log-normal: ``alpha = exp(theta + sigma * eps)`` with
``eps ~ N(0, 1)``. The score-function gradient of ``log pi(alpha)`` with
respect to ``theta`` is ``eps / sigma``, and an exponential moving average of
past rewards serves as the baseline.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .objectives import LossBreakdown


@dataclass(frozen=True)
class AlphaPolicy:
    theta: float = 0.0
    sigma: float = 0.1
    baseline: float = 0.0
    ema_decay: float = 0.9
    rl_lr: float = 1e-2
    initialized: bool = False  # baseline is seeded from the first reward

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")


@dataclass
class AlphaRecord:
    step: int
    alpha: float
    epsilon: float
    reward: float
    baseline: float
    theta: float


@dataclass
class AlphaTrace:
    records: list[AlphaRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "alpha", "reward", "baseline", "theta"])
        for r in self.records:
            w.writerow([r.step, repr(r.alpha), repr(r.reward), repr(r.baseline), repr(r.theta)])
        return buf.getvalue()


def sample_alpha(policy: AlphaPolicy, rng: np.random.Generator) -> tuple[float, float]:
    eps = float(rng.standard_normal())
    return math.exp(policy.theta + policy.sigma * eps), eps


def reinforce_update(policy: AlphaPolicy, epsilon: float, reward: float) -> AlphaPolicy:
    if not math.isfinite(reward):
        raise ValueError(f"non-finite reward {reward}")
    baseline = policy.baseline if policy.initialized else reward
    if policy.sigma > 0:
        theta = policy.theta + policy.rl_lr * (reward - baseline) * (epsilon / policy.sigma)
    else:
        theta = policy.theta
    new_baseline = policy.ema_decay * baseline + (1.0 - policy.ema_decay) * reward
    return replace(policy, theta=theta, baseline=new_baseline, initialized=True)


def reward_from_loss(breakdown: LossBreakdown, alpha_ref: float = 1.0) -> float:
    """Negative loss recombined with a fixed retain weight.

    Using the sampled alpha here would let the policy lower the loss simply by
    shrinking alpha.
    """
    return -(breakdown.forget + alpha_ref * breakdown.retain)
