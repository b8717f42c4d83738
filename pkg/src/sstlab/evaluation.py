"""Metric suite: faithfulness per sufficiency type, subset size, timing.

Faithfulness of a subset is the fraction of test instances whose prediction
survives the chosen treatment of the complement:

* baseline: one composed input against a fixed z,
* probabilistic: at least ``1 - delta`` of ``m`` uniform resamplings,
* robust: a sign-gradient attack inside the epsilon ball fails to flip it.

Evaluation is read-only over the parameters.  Randomized checks draw one
child stream per instance from the given seed, so results do not depend on
batching and are reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ConfigError, Dataset
from .masking import (
    BaselineMasking,
    MaskingStrategy,
    ProbabilisticMasking,
    RobustMasking,
    probabilistic_mask,
    robust_mask,
)
from .model import ModelParams, compose_masked_input, extract_subset, forward, predict_class

METRICS_SCHEMA = "sstlab.metrics.v1"
CROSS_SCHEMA = "sstlab.crossmask.v1"


@dataclass
class MetricsReport:
    accuracy_pct: float
    mean_size_pct: float
    mean_explain_seconds: float
    faithfulness: dict[str, float] = field(default_factory=dict)
    accuracy_gain_pct: float | None = None

    def to_dict(self) -> dict:
        out = {
            "schema": METRICS_SCHEMA,
            "accuracy_pct": round(self.accuracy_pct, 4),
            "mean_size_pct": round(self.mean_size_pct, 4),
            "mean_explain_seconds": self.mean_explain_seconds,
            "faithfulness": {k: round(v, 4) for k, v in self.faithfulness.items()},
        }
        if self.accuracy_gain_pct is not None:
            out["accuracy_gain_pct"] = round(self.accuracy_gain_pct, 4)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _instance_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(np.random.SeedSequence([seed, i])) for i in range(count)]


def model_subsets(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """The model's own explanation masks for a batch."""
    _, scores = forward(params, x)
    return extract_subset(scores, params.tau, params.group, params.image_shape)


def _resolve_subsets(params: ModelParams, testset: Dataset, subset_source) -> np.ndarray:
    if isinstance(subset_source, str) and subset_source == "model":
        return model_subsets(params, testset.x)
    masks = np.asarray(subset_source, dtype=bool)
    if masks.shape != testset.x.shape:
        raise ConfigError(
            f"external masks have shape {masks.shape}, dataset is {testset.x.shape}"
        )
    return masks


def prediction_preserved(
    params: ModelParams,
    x: np.ndarray,
    mask: np.ndarray,
    check: MaskingStrategy,
    rng: np.random.Generator,
    orig_class: int | None = None,
) -> bool:
    """Does the masked prediction match the clean prediction for one instance?"""
    if orig_class is None:
        orig_class = int(predict_class(params, x[None, :])[0])
    if isinstance(check, BaselineMasking):
        composed = compose_masked_input(x, mask, check.baseline_for(x.shape[-1]))
        return int(predict_class(params, composed[None, :])[0]) == orig_class
    if isinstance(check, ProbabilisticMasking):
        tiled = np.tile(x, (check.samples, 1))
        masks = np.tile(mask, (check.samples, 1))
        samples = probabilistic_mask(tiled, masks, check, rng)
        preserved = int((predict_class(params, samples) == orig_class).sum())
        return preserved >= (1.0 - check.delta) * check.samples - 1e-12
    if isinstance(check, RobustMasking):
        for _ in range(check.restarts):
            adv = robust_mask(x, mask, check, params, np.int64(orig_class), rng)
            if int(predict_class(params, adv[None, :])[0]) != orig_class:
                return False
        return True
    raise TypeError(f"unknown check strategy {type(check).__name__}")


def eval_faithfulness(
    params: ModelParams,
    testset: Dataset,
    subset_source,
    check: MaskingStrategy,
    seed: int = 0,
) -> float:
    """Percentage of test instances whose subset stays sufficient under ``check``.

    ``subset_source`` is either the string ``"model"`` (threshold the
    model's own explanation head) or an external (count, n) boolean array.
    """
    if len(testset) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    masks = _resolve_subsets(params, testset, subset_source)
    orig = predict_class(params, testset.x)

    if isinstance(check, BaselineMasking):
        z = check.baseline_for(testset.n)
        composed = compose_masked_input(testset.x, masks, np.broadcast_to(z, testset.x.shape))
        return float((predict_class(params, composed) == orig).mean() * 100.0)

    if isinstance(check, RobustMasking):
        faithful = np.ones(len(testset), dtype=bool)
        rngs = _instance_rngs(seed, len(testset))
        for _ in range(check.restarts):
            adv = np.empty_like(testset.x)
            for i, rng in enumerate(rngs):
                # per-instance stream: draw only this row's init noise here
                lo = np.maximum(testset.x[i] - check.epsilon, 0.0) if check.clamp_domain else testset.x[i] - check.epsilon
                hi = np.minimum(testset.x[i] + check.epsilon, 1.0) if check.clamp_domain else testset.x[i] + check.epsilon
                if check.random_init:
                    start = np.clip(testset.x[i] + rng.uniform(-check.epsilon, check.epsilon, size=testset.n), lo, hi)
                else:
                    start = testset.x[i].copy()
                adv[i] = compose_masked_input(testset.x[i], masks[i], start)
            frozen = RobustMasking(
                epsilon=check.epsilon,
                steps=check.steps,
                step_size=check.step_size,
                restarts=1,
                random_init=False,
                clamp_domain=check.clamp_domain,
            )
            attacked = _pgd_from(adv, testset.x, masks, frozen, params, orig)
            faithful &= predict_class(params, attacked) == orig
        return float(faithful.mean() * 100.0)

    if isinstance(check, ProbabilisticMasking):
        faithful = 0
        rngs = _instance_rngs(seed, len(testset))
        for i, rng in enumerate(rngs):
            if prediction_preserved(params, testset.x[i], masks[i], check, rng, int(orig[i])):
                faithful += 1
        return 100.0 * faithful / len(testset)

    raise TypeError(f"unknown check strategy {type(check).__name__}")


def _pgd_from(
    start: np.ndarray,
    x: np.ndarray,
    masks: np.ndarray,
    strategy: RobustMasking,
    params: ModelParams,
    targets: np.ndarray,
) -> np.ndarray:
    """Batched attack continuing from prepared start points."""
    from .masking import _prediction_loss_input_grad
    from .numerics import NumericError

    adv = start.copy()
    for step in range(strategy.steps):
        grad = _prediction_loss_input_grad(params, adv, targets)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"robust check: non-finite input gradient at step {step}")
        grad = np.where(masks, 0.0, grad)
        adv = adv + strategy.step_size * np.sign(grad)
        adv = np.clip(adv, x - strategy.epsilon, x + strategy.epsilon)
        if strategy.clamp_domain:
            adv = np.clip(adv, 0.0, 1.0)
        adv = compose_masked_input(x, masks, adv)
    return adv


def eval_accuracy(params: ModelParams, testset: Dataset) -> float:
    if len(testset) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    return float((predict_class(params, testset.x) == testset.y).mean() * 100.0)


def eval_size_and_time(
    params: ModelParams, testset: Dataset, timing_instances: int | None = None
) -> tuple[float, float]:
    """Mean subset size (percent of features) and mean per-instance wall time.

    Timing covers the forward pass plus the threshold extraction, one
    instance at a time on a monotonic clock.
    """
    masks = model_subsets(params, testset.x)
    size_pct = float(masks.mean() * 100.0)
    count = len(testset) if timing_instances is None else min(timing_instances, len(testset))
    total = 0.0
    for i in range(count):
        row = testset.x[i : i + 1]
        t0 = time.perf_counter()
        _, scores = forward(params, row)
        extract_subset(scores, params.tau, params.group, params.image_shape)
        total += time.perf_counter() - t0
    return size_pct, total / max(count, 1)


def metrics_report(
    params: ModelParams,
    testset: Dataset,
    checks: dict[str, MaskingStrategy],
    seed: int = 0,
    reference_accuracy_pct: float | None = None,
    timing_instances: int | None = None,
) -> MetricsReport:
    acc = eval_accuracy(params, testset)
    size_pct, secs = eval_size_and_time(params, testset, timing_instances)
    faith = {
        name: eval_faithfulness(params, testset, "model", check, seed=seed)
        for name, check in checks.items()
    }
    gain = None if reference_accuracy_pct is None else acc - reference_accuracy_pct
    return MetricsReport(
        accuracy_pct=acc,
        mean_size_pct=size_pct,
        mean_explain_seconds=secs,
        faithfulness=faith,
        accuracy_gain_pct=gain,
    )


def eval_cross(
    params_by_mask: dict[str, ModelParams],
    testset: Dataset,
    checks: dict[str, MaskingStrategy],
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Faithfulness of every trained-mask model under every check type."""
    if not params_by_mask or not checks:
        raise ConfigError("cross evaluation needs at least one model and one check")
    return {
        trained: {
            check_name: eval_faithfulness(params, testset, "model", check, seed=seed)
            for check_name, check in checks.items()
        }
        for trained, params in params_by_mask.items()
    }


def cross_to_csv(matrix: dict[str, dict[str, float]]) -> str:
    checks = list(next(iter(matrix.values())).keys())
    lines = [f"# schema: {CROSS_SCHEMA}", "trained_mask," + ",".join(checks)]
    for trained, row in matrix.items():
        lines.append(trained + "," + ",".join(f"{row[c]:.4f}" for c in checks))
    return "\n".join(lines) + "\n"
