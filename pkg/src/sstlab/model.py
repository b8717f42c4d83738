"""The self-explaining network: a shared ReLU trunk with two output heads.

``forward`` returns class logits from the prediction head and per-feature
scores in [0, 1] from the sigmoid explanation head.  Thresholding the scores
yields the explanation subset; ``compose_masked_input`` rebuilds an input
that keeps the subset's values and takes everything else from a replacement
vector.

Parameters are plain numpy arrays.  ``forward``/``extract_subset``/
``compose_masked_input`` never mutate them, so concurrent evaluation is safe;
only the training loop writes parameters.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DimensionError,
    affine_backward,
    affine_forward,
    relu,
    relu_backward,
    sigmoid,
)

CHECKPOINT_MAGIC = b"SSTM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Trunk + prediction head + explanation head weights.

    ``trunk`` is a list of ``(W, b)`` pairs applied as affine+ReLU.  The
    prediction head maps the last hidden layer to ``c`` logits; the
    explanation head maps it to ``n`` pre-sigmoid scores (the feature count,
    regardless of any grouping used at extraction time).
    """

    n: int
    c: int
    trunk: list[tuple[np.ndarray, np.ndarray]]
    pred_head: tuple[np.ndarray, np.ndarray]
    expl_head: tuple[np.ndarray, np.ndarray]
    group: int = 1
    tau: float = 0.5
    image_shape: tuple[int, int] | None = None

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(W.shape[1] for W, _ in self.trunk)

    def copy(self) -> "ModelParams":
        return ModelParams(
            n=self.n,
            c=self.c,
            trunk=[(W.copy(), b.copy()) for W, b in self.trunk],
            pred_head=(self.pred_head[0].copy(), self.pred_head[1].copy()),
            expl_head=(self.expl_head[0].copy(), self.expl_head[1].copy()),
            group=self.group,
            tau=self.tau,
            image_shape=self.image_shape,
        )

    def flat(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order."""
        out: list[np.ndarray] = []
        for W, b in self.trunk:
            out.extend((W, b))
        out.extend(self.pred_head)
        out.extend(self.expl_head)
        return out


@dataclass
class ForwardCache:
    """Intermediate activations kept for the backward pass."""

    x: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None
    scores: np.ndarray | None = None


def init_params(
    n: int,
    c: int,
    hidden: tuple[int, ...] = (128, 64),
    seed: int = 0,
    group: int = 1,
    tau: float = 0.5,
    image_shape: tuple[int, int] | None = None,
) -> ModelParams:
    """Uniform init scaled by 1/sqrt(fan_in); all biases start at zero.

    A zero explanation-head bias centres the initial scores on 0.5.
    """
    rng = np.random.default_rng(seed)

    def layer(fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
        bound = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return W, np.zeros(fan_out)

    dims = (n, *hidden)
    trunk = [layer(dims[i], dims[i + 1]) for i in range(len(hidden))]
    return ModelParams(
        n=n,
        c=c,
        trunk=trunk,
        pred_head=layer(dims[-1], c),
        expl_head=layer(dims[-1], n),
        group=group,
        tau=tau,
        image_shape=image_shape,
    )


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run both heads on a batch; returns ``(logits, scores)``."""
    logits, scores, _ = forward_cached(params, x)
    return logits, scores


def forward_cached(
    params: ModelParams, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.n:
        raise DimensionError(f"forward: input width {x.shape[1]}, model expects {params.n}")
    cache = ForwardCache(x=x)
    a = x
    for W, b in params.trunk:
        z = affine_forward(a, W, b)
        cache.pre.append(z)
        a = relu(z)
        cache.hidden.append(a)
    cache.logits = affine_forward(a, *params.pred_head)
    cache.scores = sigmoid(affine_forward(a, *params.expl_head))
    return cache.logits, cache.scores, cache


def trunk_forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Prediction head only; used by the masked pass and the input attack."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.n:
        raise DimensionError(f"forward: input width {x.shape[1]}, model expects {params.n}")
    cache = ForwardCache(x=x)
    a = x
    for W, b in params.trunk:
        z = affine_forward(a, W, b)
        cache.pre.append(z)
        a = relu(z)
        cache.hidden.append(a)
    cache.logits = affine_forward(a, *params.pred_head)
    return cache.logits, cache


@dataclass
class Grads:
    """Parameter gradients, same layout as :class:`ModelParams`."""

    trunk: list[tuple[np.ndarray, np.ndarray]]
    pred_head: tuple[np.ndarray, np.ndarray]
    expl_head: tuple[np.ndarray, np.ndarray]

    @staticmethod
    def zeros_like(params: ModelParams) -> "Grads":
        return Grads(
            trunk=[(np.zeros_like(W), np.zeros_like(b)) for W, b in params.trunk],
            pred_head=tuple(np.zeros_like(a) for a in params.pred_head),
            expl_head=tuple(np.zeros_like(a) for a in params.expl_head),
        )

    def flat(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for W, b in self.trunk:
            out.extend((W, b))
        out.extend(self.pred_head)
        out.extend(self.expl_head)
        return out

    def add_scaled(self, other: "Grads", scale: float) -> None:
        for mine, theirs in zip(self.flat(), other.flat()):
            mine += scale * theirs


def backward(
    params: ModelParams,
    cache: ForwardCache,
    dlogits: np.ndarray | None = None,
    dscores_pre: np.ndarray | None = None,
    need_dx: bool = False,
) -> tuple[Grads, np.ndarray | None]:
    """Backpropagate head gradients through the shared trunk.

    ``dlogits`` is the gradient at the prediction-head output and
    ``dscores_pre`` the gradient at the explanation head's *pre-sigmoid*
    output.  Either may be None.  Returns parameter gradients and, when
    ``need_dx`` is set, the gradient w.r.t. the input batch.
    """
    grads = Grads.zeros_like(params)
    last_hidden = cache.hidden[-1] if params.trunk else cache.x
    da = np.zeros_like(last_hidden)
    if dlogits is not None:
        dh, dWp, dbp = affine_backward(last_hidden, params.pred_head[0], dlogits)
        grads.pred_head = (dWp, dbp)
        da += dh
    if dscores_pre is not None:
        dh, dWe, dbe = affine_backward(last_hidden, params.expl_head[0], dscores_pre)
        grads.expl_head = (dWe, dbe)
        da += dh
    for i in reversed(range(len(params.trunk))):
        dz = relu_backward(cache.pre[i], da)
        a_prev = cache.hidden[i - 1] if i > 0 else cache.x
        da, dW, db = affine_backward(a_prev, params.trunk[i][0], dz)
        grads.trunk[i] = (dW, db)
    dx = da if need_dx else None
    return grads, dx


def predict_class(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Predicted class per row; ties resolve to the lowest class index."""
    logits, _ = trunk_forward(params, x)
    return np.argmax(logits, axis=1)


def _group_bounds(size: int, g: int) -> list[tuple[int, int]]:
    # trailing remainder band is simply smaller
    return [(lo, min(lo + g, size)) for lo in range(0, size, g)]


def extract_subset(
    scores: np.ndarray,
    tau: float,
    group: int = 1,
    image_shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Threshold explanation scores into a boolean selection mask.

    With ``group > 1`` the scores are interpreted as an image and selection
    happens per ``group x group`` patch: a patch is selected iff its mean
    score is >= tau, and the whole patch is selected together.  Images whose
    side is not divisible by ``group`` get smaller trailing patches.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"extract_subset: tau must be in (0,1), got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    squeeze = scores.ndim == 1
    scores = np.atleast_2d(scores)
    if group <= 1:
        mask = scores >= tau
        return mask[0] if squeeze else mask
    n = scores.shape[1]
    if image_shape is None:
        side = math.isqrt(n)
        if side * side != n:
            raise DimensionError(
                f"extract_subset: grouping needs an image shape; {n} is not a square"
            )
        image_shape = (side, side)
    h, w = image_shape
    if h * w != n:
        raise DimensionError(f"extract_subset: image shape {image_shape} does not cover {n}")
    imgs = scores.reshape(-1, h, w)
    mask = np.zeros_like(imgs, dtype=bool)
    for r0, r1 in _group_bounds(h, group):
        for c0, c1 in _group_bounds(w, group):
            sel = imgs[:, r0:r1, c0:c1].mean(axis=(1, 2)) >= tau
            mask[:, r0:r1, c0:c1] |= sel[:, None, None]
    mask = mask.reshape(-1, n)
    return mask[0] if squeeze else mask


def compose_masked_input(x: np.ndarray, mask: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Keep ``x`` where the mask selects, take ``z`` elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if x.shape[-1] != z.shape[-1] or x.shape[-1] != mask.shape[-1]:
        raise DimensionError(
            f"compose_masked_input: widths differ (x{x.shape}, mask{mask.shape}, z{z.shape})"
        )
    return np.where(mask, x, z)


def subset_indices(mask: np.ndarray) -> list[int]:
    """Selected feature indices in ascending order."""
    return [int(i) for i in np.flatnonzero(np.asarray(mask, dtype=bool))]


# --- checkpoint format -----------------------------------------------------
#
# Header (little endian): magic "SSTM", u32 version, u32 n, u32 c,
# u32 trunk-layer count, u32 per hidden dim, u32 group, f64 tau,
# u32 image height, u32 image width (0,0 when unset).  Then every weight
# block as little-endian f64 in declaration order (trunk W/b pairs, then
# the prediction head, then the explanation head).


def save_checkpoint(params: ModelParams, path: str) -> None:
    dims = params.hidden_dims
    ih, iw = params.image_shape if params.image_shape else (0, 0)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIII", CHECKPOINT_VERSION, params.n, params.c, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        f.write(struct.pack("<IdII", params.group, params.tau, ih, iw))
        for arr in params.flat():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: magic {magic!r}")
        version, n, c, depth = struct.unpack("<IIII", f.read(16))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dims = struct.unpack(f"<{depth}I", f.read(4 * depth)) if depth else ()
        group, tau, ih, iw = struct.unpack("<IdII", f.read(20))
        image_shape = (ih, iw) if ih and iw else None

        def read_block(shape: tuple[int, ...]) -> np.ndarray:
            count = int(np.prod(shape))
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError("truncated checkpoint payload")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        full_dims = (n, *dims)
        trunk = [
            (read_block((full_dims[i], full_dims[i + 1])), read_block((full_dims[i + 1],)))
            for i in range(depth)
        ]
        pred = (read_block((full_dims[-1], c)), read_block((c,)))
        expl = (read_block((full_dims[-1], n)), read_block((n,)))
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return ModelParams(
        n=n,
        c=c,
        trunk=trunk,
        pred_head=pred,
        expl_head=expl,
        group=group,
        tau=tau,
        image_shape=image_shape,
    )
