"""Dual-propagation training.

Each step runs the network twice: once on the clean batch (prediction loss +
cardinality loss on the explanation scores), once on a masked batch built
from the thresholded scores (faithfulness loss against the clean-pass
predicted class, which is treated as a constant target).  The combined
objective is::

    L = L_pred + lam * L_faith + xi * L_card

A ``standard`` mode trains prediction only, for twin models used in
accuracy comparisons.  The loop is single-threaded over parameter state;
given a seed and a config the run is fully deterministic.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .data import ConfigError, Dataset
from .masking import (
    BaselineMasking,
    MaskingStrategy,
    ProbabilisticMasking,
    RobustMasking,
    apply_strategy,
    strategy_name,
)
from .model import (
    Grads,
    ModelParams,
    backward,
    extract_subset,
    forward_cached,
    init_params,
    predict_class,
    trunk_forward,
)
from .numerics import LossValue, l1_loss, sigmoid_backward, softmax_ce_loss

TRAINLOG_SCHEMA = "sstlab.trainlog.v1"
TRAINLOG_COLUMNS = "epoch,l_pred,l_faith,l_card,train_acc,val_acc,mean_size_pct,seconds"


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    xi: float = 1e-7
    tau: float = 0.5
    lr: float = 1e-4
    batch: int = 64
    epochs: int = 10
    seed: int = 0
    masking: MaskingStrategy = field(default_factory=BaselineMasking)
    mode: str = "sst"  # "sst" | "standard"
    grad_mode: str = "hard"  # "hard" | "straight_through"
    hidden: tuple[int, ...] = (128, 64)
    group: int = 1
    clip_norm: float | None = 10.0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lam < 0 or self.xi < 0:
            raise ConfigError("loss coefficients must be nonnegative")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("lr must be positive, batch >= 1, epochs >= 0")
        if self.mode not in ("sst", "standard"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.grad_mode not in ("hard", "straight_through"):
            raise ConfigError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    l_pred: float
    l_faith: float
    l_card: float
    train_acc: float
    val_acc: float
    mean_size_pct: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {TRAINLOG_SCHEMA}\n")
        buf.write(TRAINLOG_COLUMNS + "\n")
        for r in self.records:
            buf.write(
                f"{r.epoch},{r.l_pred:.6f},{r.l_faith:.6f},{r.l_card:.6f},"
                f"{r.train_acc:.4f},{r.val_acc:.4f},{r.mean_size_pct:.4f},{r.seconds:.3f}\n"
            )
        return buf.getvalue()


class Adam:
    """Adaptive moment estimation, written out explicitly.

    beta1=0.9, beta2=0.999, eps=1e-8 with bias correction.
    """

    def __init__(self, params: ModelParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params.flat()]
        self.v = [np.zeros_like(p) for p in params.flat()]

    def step(self, params: ModelParams, grads: Grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params.flat(), grads.flat(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _clip_global_norm(grads: Grads, max_norm: float | None) -> None:
    if not max_norm:
        return
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.flat()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.flat():
            g *= scale


def _check_finite(name: str, loss: LossValue) -> LossValue:
    if not np.isfinite(loss.value) or not np.all(np.isfinite(loss.gradient)):
        raise FloatingPointError(f"non-finite {name} loss during training step")
    return loss


def standard_step(
    params: ModelParams, opt: Adam, x: np.ndarray, y: np.ndarray, config: TrainConfig
) -> dict:
    """Plain cross-entropy step on the prediction head (no second pass)."""
    logits, cache = trunk_forward(params, x)
    l_pred = _check_finite("prediction", softmax_ce_loss(logits, y))
    grads, _ = backward(params, cache, dlogits=l_pred.gradient)
    _clip_global_norm(grads, config.clip_norm)
    opt.step(params, grads)
    return {
        "l_pred": l_pred.value,
        "l_faith": 0.0,
        "l_card": 0.0,
        "combined": l_pred.value,
        "acc": float((np.argmax(logits, axis=1) == y).mean()),
    }


def sst_step(
    params: ModelParams,
    opt: Adam,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> dict:
    """One combined gradient step of the dual-propagation objective.

    Returns the loss components; ``combined`` is exactly
    ``l_pred + lam * l_faith + xi * l_card``.
    """
    logits, scores, cache1 = forward_cached(params, x)
    l_pred = _check_finite("prediction", softmax_ce_loss(logits, y))
    l_card = _check_finite("cardinality", l1_loss(scores))

    dlogits1 = l_pred.gradient
    dpre_expl = None
    if config.xi > 0:
        dpre_expl = sigmoid_backward(scores, config.xi * l_card.gradient)

    l_faith_value = 0.0
    grads2 = None
    if config.lam > 0:
        mask = extract_subset(scores, config.tau, config.group, _shape_of(params))
        first_pass_pred = np.argmax(logits, axis=1)  # constant target, not differentiated
        masked = apply_strategy(x, mask, config.masking, params, y, rng)
        logits2, cache2 = trunk_forward(params, masked)
        l_faith = _check_finite("faithfulness", softmax_ce_loss(logits2, first_pass_pred))
        l_faith_value = l_faith.value
        need_dx = config.grad_mode == "straight_through"
        grads2, dmasked = backward(
            params, cache2, dlogits=config.lam * l_faith.gradient, need_dx=need_dx
        )
        if need_dx:
            # Identity relaxation of the threshold: the mask gradient is
            # dmasked * (x - z).  Selected coordinates of a robust mask have
            # no counterfactual replacement value, so they contribute zero.
            dscores = dmasked * (x - masked)
            st = sigmoid_backward(scores, dscores)
            dpre_expl = st if dpre_expl is None else dpre_expl + st

    grads, _ = backward(params, cache1, dlogits=dlogits1, dscores_pre=dpre_expl)
    if grads2 is not None:
        grads.add_scaled(grads2, 1.0)
    _clip_global_norm(grads, config.clip_norm)
    opt.step(params, grads)

    return {
        "l_pred": l_pred.value,
        "l_faith": l_faith_value,
        "l_card": l_card.value,
        "combined": l_pred.value + config.lam * l_faith_value + config.xi * l_card.value,
        "acc": float((np.argmax(logits, axis=1) == y).mean()),
    }


def _shape_of(params: ModelParams) -> tuple[int, int] | None:
    return params.image_shape


def _accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float((predict_class(params, x) == y).mean())


def mean_subset_size_pct(params: ModelParams, x: np.ndarray, tau: float | None = None) -> float:
    from .model import forward  # local import to keep module load light

    _, scores = forward(params, x)
    mask = extract_subset(scores, tau if tau is not None else params.tau, params.group, params.image_shape)
    return float(mask.mean() * 100.0)


def train(dataset: Dataset, config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Full training run; deterministic given (dataset, config)."""
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")

    perm = np.random.default_rng(np.random.SeedSequence([config.seed, 3])).permutation(len(dataset))
    n_val = int(round(config.val_fraction * len(dataset)))
    val_idx, train_idx = (perm[len(dataset) - n_val :], perm[: len(dataset) - n_val])
    if len(train_idx) == 0:
        raise ConfigError("validation fraction leaves no training data")
    xs, ys = dataset.x[train_idx], dataset.y[train_idx]
    xv, yv = (dataset.x[val_idx], dataset.y[val_idx]) if n_val else (xs, ys)

    params = init_params(
        dataset.n,
        dataset.c,
        hidden=config.hidden,
        seed=config.seed,
        group=config.group,
        tau=config.tau,
        image_shape=dataset.image_shape,
    )
    opt = Adam(params, config.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    mask_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    log = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(xs))
        sums = {"l_pred": 0.0, "l_faith": 0.0, "l_card": 0.0, "acc": 0.0}
        batches = 0
        for lo in range(0, len(xs), config.batch):
            idx = order[lo : lo + config.batch]
            if config.mode == "standard":
                out = standard_step(params, opt, xs[idx], ys[idx], config)
            else:
                out = sst_step(params, opt, xs[idx], ys[idx], config, mask_rng)
            for k in sums:
                sums[k] += out[k]
            batches += 1
        log.records.append(
            EpochRecord(
                epoch=epoch,
                l_pred=sums["l_pred"] / batches,
                l_faith=sums["l_faith"] / batches,
                l_card=sums["l_card"] / batches,
                train_acc=sums["acc"] / batches,
                val_acc=_accuracy(params, xv, yv),
                mean_size_pct=mean_subset_size_pct(params, xv),
                seconds=time.perf_counter() - t0,
            )
        )
    return params, log


def sweep_xi(
    dataset: Dataset,
    config: TrainConfig,
    xi_values: Iterable[float],
    testset: Dataset | None = None,
) -> list[dict]:
    """Train one model per cardinality coefficient and evaluate each.

    Rows come back sorted by xi with the faithfulness metric matching the
    training mask.  A failing cell is marked and the sweep continues.
    """
    from .evaluation import eval_faithfulness, eval_size_and_time

    xi_values = sorted(xi_values)
    if not xi_values:
        raise ConfigError("xi sweep needs at least one value")
    rows = []
    for xi in xi_values:
        row = {"xi": xi, "faithfulness_pct": None, "mean_size_pct": None, "error": ""}
        try:
            params, _ = train(dataset, replace(config, xi=xi))
            evalset = testset if testset is not None else dataset
            row["faithfulness_pct"] = eval_faithfulness(
                params, evalset, "model", config.masking, seed=config.seed
            )
            row["mean_size_pct"], _ = eval_size_and_time(params, evalset)
        except Exception as exc:  # noqa: BLE001 - cell failures must not kill the sweep
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def spearman(xs: Iterable[float], ys: Iterable[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    a = _ranks(np.asarray(list(xs), dtype=np.float64))
    b = _ranks(np.asarray(list(ys), dtype=np.float64))
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def _ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    ranks[order] = np.arange(1, len(v) + 1)
    # average ranks across ties
    for val in np.unique(v):
        sel = v == val
        ranks[sel] = ranks[sel].mean()
    return ranks
