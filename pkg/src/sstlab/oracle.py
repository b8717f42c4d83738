"""Reference explainers: greedy elimination and exact minimal-subset search.

The brute-force search enumerates candidate subsets by increasing
cardinality (lexicographic within each size) and returns the first one that
passes the sufficiency check, which is therefore of minimum cardinality.
Exhaustive enumeration is exponential, so it is capped at desk scale.

Randomized checks (probabilistic sampling, attack restarts) draw from a
frozen bank built once per instance; every candidate subset is judged
against the same bank, otherwise "minimal" would be ill-defined under Monte
Carlo noise.  The attack-based robust check makes the search an upper-bound
witness, not a complete verifier: an attack that fails to flip the
prediction does not prove that no flipping assignment exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .masking import (
    BaselineMasking,
    MaskingStrategy,
    ProbabilisticMasking,
    RobustMasking,
)
from .model import ModelParams, backward, compose_masked_input, predict_class, trunk_forward
from .numerics import softmax_ce_loss

MAX_BRUTE_FORCE_N = 24


class CapacityError(ValueError):
    """Feature count exceeds the exhaustive-search cap."""


@dataclass(frozen=True)
class OracleConfig:
    check: MaskingStrategy = field(default_factory=BaselineMasking)
    k: int | None = None  # optional cardinality budget
    max_n: int = 20

    def __post_init__(self):
        if self.max_n > MAX_BRUTE_FORCE_N:
            raise ValueError(f"max_n capped at {MAX_BRUTE_FORCE_N}")


class FrozenChecker:
    """Sufficiency check for one instance with all randomness pre-drawn.

    ``passes(mask)`` is a pure function of the mask, so re-running it after
    the search reproduces the verdicts exactly.
    """

    def __init__(
        self,
        params: ModelParams,
        x: np.ndarray,
        check: MaskingStrategy,
        rng: np.random.Generator,
    ):
        self.params = params
        self.x = np.asarray(x, dtype=np.float64)
        self.check = check
        self.orig_class = int(predict_class(params, self.x[None, :])[0])
        n = self.x.shape[0]
        if isinstance(check, ProbabilisticMasking):
            u = rng.uniform(0.0, 1.0, size=(check.samples, n))
            if check.epsilon is None:
                self.bank = u
            else:
                lo = np.maximum(self.x - check.epsilon, 0.0)
                hi = np.minimum(self.x + check.epsilon, 1.0)
                self.bank = lo + u * (hi - lo)
        elif isinstance(check, RobustMasking):
            inits = self.x + rng.uniform(-check.epsilon, check.epsilon, size=(check.restarts, n))
            lo = self.x - check.epsilon
            hi = self.x + check.epsilon
            if check.clamp_domain:
                lo, hi = np.maximum(lo, 0.0), np.minimum(hi, 1.0)
            self.bank = np.clip(inits, lo, hi) if check.random_init else np.tile(self.x, (check.restarts, 1))
        else:
            self.bank = None

    def passes(self, mask: np.ndarray) -> bool:
        mask = np.asarray(mask, dtype=bool)
        if isinstance(self.check, BaselineMasking):
            z = self.check.baseline_for(self.x.shape[0])
            composed = compose_masked_input(self.x, mask, z)
            return int(predict_class(self.params, composed[None, :])[0]) == self.orig_class
        if isinstance(self.check, ProbabilisticMasking):
            composed = compose_masked_input(np.tile(self.x, (len(self.bank), 1)), mask, self.bank)
            preserved = int((predict_class(self.params, composed) == self.orig_class).sum())
            return preserved >= (1.0 - self.check.delta) * self.check.samples - 1e-12
        if isinstance(self.check, RobustMasking):
            for init in self.bank:
                adv = self._attack(compose_masked_input(self.x, mask, init), mask)
                if int(predict_class(self.params, adv[None, :])[0]) != self.orig_class:
                    return False
            return True
        raise TypeError(f"unknown check strategy {type(self.check).__name__}")

    def _attack(self, start: np.ndarray, mask: np.ndarray) -> np.ndarray:
        check: RobustMasking = self.check
        adv = start[None, :].copy()
        x2 = self.x[None, :]
        mask2 = mask[None, :]
        target = np.array([self.orig_class], dtype=np.int64)
        for _ in range(check.steps):
            logits, cache = trunk_forward(self.params, adv)
            loss = softmax_ce_loss(logits, target)
            _, dx = backward(self.params, cache, dlogits=loss.gradient, need_dx=True)
            dx = np.where(mask2, 0.0, dx)
            adv = adv + check.step_size * np.sign(dx)
            adv = np.clip(adv, x2 - check.epsilon, x2 + check.epsilon)
            if check.clamp_domain:
                adv = np.clip(adv, 0.0, 1.0)
            adv = compose_masked_input(x2, mask2, adv)
        return adv[0]


def input_saliency(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """|d prediction-loss / d x| for the model's own predicted class."""
    x2 = np.asarray(x, dtype=np.float64)[None, :]
    target = predict_class(params, x2)
    logits, cache = trunk_forward(params, x2)
    loss = softmax_ce_loss(logits, target)
    _, dx = backward(params, cache, dlogits=loss.gradient, need_dx=True)
    return np.abs(dx[0])


def greedy_sufficient_reason(
    params: ModelParams,
    x: np.ndarray,
    check: MaskingStrategy,
    rng: np.random.Generator,
    checker: FrozenChecker | None = None,
) -> np.ndarray:
    """Backward elimination from the full feature set.

    Features are visited in descending input-gradient saliency; a feature is
    dropped iff the remaining set still passes the check.  The result always
    passes (the full set passes trivially).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if checker is None:
        checker = FrozenChecker(params, x, check, rng)
    mask = np.ones(n, dtype=bool)
    order = np.argsort(-input_saliency(params, x), kind="stable")
    for i in order:
        mask[i] = False
        if not checker.passes(mask):
            mask[i] = True
    return mask


def brute_force_msr(
    params: ModelParams,
    x: np.ndarray,
    check: MaskingStrategy,
    config: OracleConfig,
    rng: np.random.Generator,
    checker: FrozenChecker | None = None,
) -> np.ndarray | None:
    """Exhaustive minimum-cardinality sufficient subset.

    Enumerates subsets by increasing size, lexicographic within a size, and
    returns the first passing one.  With a budget ``k`` set, returns None
    when no subset of size <= k passes (the decision-problem answer is No).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n > config.max_n:
        raise CapacityError(f"{n} features exceeds brute-force cap {config.max_n}")
    if checker is None:
        checker = FrozenChecker(params, x, check, rng)
    top = n if config.k is None else min(config.k, n)
    for size in range(top + 1):
        for combo in combinations(range(n), size):
            mask = np.zeros(n, dtype=bool)
            mask[list(combo)] = True
            if checker.passes(mask):
                return mask
    return None


def verify_minimal(checker: FrozenChecker, mask: np.ndarray) -> bool:
    """Re-enumerate every strictly smaller subset; True iff none passes."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    if not checker.passes(mask):
        return False
    for size in range(int(mask.sum())):
        for combo in combinations(range(n), size):
            smaller = np.zeros(n, dtype=bool)
            smaller[list(combo)] = True
            if checker.passes(smaller):
                return False
    return True
