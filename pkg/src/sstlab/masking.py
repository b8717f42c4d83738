"""Complement assignments for the second (masked) propagation.

Three strategies decide what the non-selected features become:

* baseline: a fixed replacement vector z,
* probabilistic: i.i.d. uniform draws, over the whole [0,1] domain or a
  per-feature epsilon interval around x,
* robust: the worst case found by a sign-gradient ascent attack confined to
  an l-infinity ball around x, with the selected coordinates frozen.

Every strategy leaves the selected coordinates bitwise equal to x.  All
functions are stateless given ``(params, rng)``; parallel callers should
hand each instance its own rng stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, backward, compose_masked_input, trunk_forward
from .numerics import NumericError, softmax_ce_loss

DEFAULT_EPSILON = 0.12
DEFAULT_PGD_STEPS = 10
DEFAULT_PGD_STEP_SIZE = 1e-2


@dataclass(frozen=True)
class BaselineMasking:
    """Replace the complement with a constant baseline vector (z=0 default)."""

    z: np.ndarray | float = 0.0

    def baseline_for(self, n: int) -> np.ndarray:
        if np.isscalar(self.z):
            return np.full(n, float(self.z))
        z = np.asarray(self.z, dtype=np.float64)
        if z.shape != (n,):
            raise ValueError(f"baseline vector has shape {z.shape}, expected ({n},)")
        return z


@dataclass(frozen=True)
class ProbabilisticMasking:
    """Resample the complement uniformly; ``epsilon=None`` means full [0,1].

    ``delta``/``samples`` parameterize the pass criterion when this strategy
    is used as a faithfulness check: at least ``1 - delta`` of ``samples``
    resampled inputs must preserve the prediction.
    """

    epsilon: float | None = None
    delta: float = 0.01
    samples: int = 100

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass(frozen=True)
class RobustMasking:
    """Sign-gradient ascent attack on the complement inside an l-inf ball."""

    epsilon: float = DEFAULT_EPSILON
    norm: float = np.inf
    steps: int = DEFAULT_PGD_STEPS
    step_size: float = DEFAULT_PGD_STEP_SIZE
    restarts: int = 1
    random_init: bool = True
    clamp_domain: bool = True  # deviation toggle: skip the [0,1] clamp if False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.norm != np.inf:
            raise ValueError("only the l-infinity ball is supported")
        if self.steps < 1 or self.step_size <= 0 or self.restarts < 1:
            raise ValueError("steps, step_size and restarts must be positive")


MaskingStrategy = BaselineMasking | ProbabilisticMasking | RobustMasking


def baseline_mask(x: np.ndarray, mask: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Fix the complement to its values in ``z``."""
    return compose_masked_input(x, mask, z)


def probabilistic_mask(
    x: np.ndarray,
    mask: np.ndarray,
    strategy: ProbabilisticMasking,
    rng: np.random.Generator,
) -> np.ndarray:
    """Resample the complement uniformly over the configured domain.

    The draw consumes ``x.shape`` uniforms from ``rng`` regardless of the
    mask, so the output is reproducible from the seed alone.
    """
    x = np.asarray(x, dtype=np.float64)
    u = rng.uniform(0.0, 1.0, size=x.shape)
    if strategy.epsilon is None:
        z = u
    else:
        lo = np.maximum(x - strategy.epsilon, 0.0)
        hi = np.minimum(x + strategy.epsilon, 1.0)
        z = lo + u * (hi - lo)
    return compose_masked_input(x, mask, z)


def _prediction_loss_input_grad(
    params: ModelParams, x_batch: np.ndarray, targets: np.ndarray
) -> np.ndarray:
    logits, cache = trunk_forward(params, x_batch)
    loss = softmax_ce_loss(logits, targets)
    _, dx = backward(params, cache, dlogits=loss.gradient, need_dx=True)
    return dx


def robust_mask(
    x: np.ndarray,
    mask: np.ndarray,
    strategy: RobustMasking,
    params: ModelParams,
    target: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Adversarial complement: ascend the prediction loss on the free features.

    Starts uniformly inside the epsilon ball (complement coordinates only),
    then takes ``steps`` sign-gradient steps of ``step_size``, re-projecting
    onto the ball and clamping to [0,1] after each step.  ``target`` is the
    class whose loss is ascended: the ground truth during training, the
    model's own prediction at evaluation time.

    Supports batches: ``x``/``mask`` may be ``(batch, n)`` with one target
    per row.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    mask2 = np.atleast_2d(np.asarray(mask, dtype=bool))
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    eps = strategy.epsilon

    lo = x2 - eps
    hi = x2 + eps
    if strategy.clamp_domain:
        lo = np.maximum(lo, 0.0)
        hi = np.minimum(hi, 1.0)

    if strategy.random_init:
        adv = x2 + rng.uniform(-eps, eps, size=x2.shape)
        adv = np.clip(adv, lo, hi)
    else:
        adv = x2.copy()
    adv = compose_masked_input(x2, mask2, adv)

    for step in range(strategy.steps):
        grad = _prediction_loss_input_grad(params, adv, targets)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"robust_mask: non-finite input gradient at step {step}")
        grad = np.where(mask2, 0.0, grad)
        adv = adv + strategy.step_size * np.sign(grad)
        adv = np.clip(adv, x2 - eps, x2 + eps)
        if strategy.clamp_domain:
            adv = np.clip(adv, 0.0, 1.0)
        adv = compose_masked_input(x2, mask2, adv)

    return adv[0] if squeeze else adv


def apply_strategy(
    x: np.ndarray,
    mask: np.ndarray,
    strategy: MaskingStrategy,
    params: ModelParams,
    target: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Build the masked input for any strategy (batch friendly)."""
    if isinstance(strategy, BaselineMasking):
        x = np.asarray(x, dtype=np.float64)
        z = strategy.baseline_for(x.shape[-1])
        return baseline_mask(x, mask, np.broadcast_to(z, x.shape))
    if isinstance(strategy, ProbabilisticMasking):
        return probabilistic_mask(x, mask, strategy, rng)
    if isinstance(strategy, RobustMasking):
        return robust_mask(x, mask, strategy, params, target, rng)
    raise TypeError(f"unknown masking strategy {type(strategy).__name__}")


def strategy_name(strategy: MaskingStrategy) -> str:
    return {
        BaselineMasking: "baseline",
        ProbabilisticMasking: "probabilistic",
        RobustMasking: "robust",
    }[type(strategy)]
