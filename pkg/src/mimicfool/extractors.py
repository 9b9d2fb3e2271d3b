"""Differentiable feature extractors.

``PlainCnnExtractor`` is a small conv/relu/pool stack ending in a dense
projection; it is many-to-one and is the main attack target.
``InvertibleExtractor`` is a bijective additive-coupling network with
space-to-channel downsampling, so every feature has exactly one preimage.

Both are scikit-learn transformers: ``fit(X, y)`` trains the extractor jointly
with a :class:`~mimicfool.heads.ClassifierHead` (kept as ``head_``) and
``transform(X)`` maps byte images to feature rows.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .heads import ClassifierHead, softmax
from .tensor import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    avgpool2d,
    backward,
    conv2d,
    dense,
    maxpool2d,
    relu,
    scale_shift,
)
from .validation import check_images_u8, check_in_range

__all__ = [
    "FeatureExtractor",
    "PlainCnnExtractor",
    "InvertibleExtractor",
    "init_extractor",
    "train_extractor_with_head",
    "fan_in_bound",
]

INPUT_RANGES = {"unit": (-1.0, 1.0), "byte": (0.0, 255.0)}


def fan_in_bound(fan_in: int) -> float:
    """Half-width of the He-uniform initializer."""
    return math.sqrt(6.0 / fan_in)


def bytes_to_input(images: np.ndarray, input_range: str) -> np.ndarray:
    """Byte images to the numeric range an extractor expects."""
    x = np.asarray(images, dtype=np.float64)
    return 2.0 * (x / 255.0) - 1.0 if input_range == "unit" else x


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Shared plumbing: range checks, batching, joint training, weight access."""

    input_shape: tuple[int, int, int]
    input_range: str
    feature_dim: int

    # subclasses set weights_ (list[Tensor]) and implement _forward / _weight_specs

    def _weight_specs(self) -> list[tuple[tuple[int, ...], int | None]]:
        """(shape, fan_in) per weight tensor; fan_in None means a zero-initialized bias."""
        raise NotImplementedError

    def _forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _check_config(self) -> None:
        if self.input_range not in INPUT_RANGES:
            raise ValueError(f"input_range must be one of {sorted(INPUT_RANGES)}, got {self.input_range!r}")
        if len(self.input_shape) != 3 or self.input_shape[2] != 3:
            raise ValueError(f"input_shape must be (H, W, 3), got {self.input_shape}")

    def initialize(self, seed: int | None = None) -> "FeatureExtractor":
        """Draw fresh He-uniform weights (biases zero). Same seed, same weights."""
        self._check_config()
        rng = np.random.default_rng(self.seed if seed is None else seed)
        weights = []
        for shape, fan_in in self._weight_specs():
            if fan_in is None:
                weights.append(Tensor(np.zeros(shape)))
            else:
                b = fan_in_bound(fan_in)
                weights.append(Tensor(rng.uniform(-b, b, size=shape)))
        self.weights_ = weights
        return self

    def set_weights(self, arrays: Sequence[np.ndarray]) -> "FeatureExtractor":
        self._check_config()
        specs = self._weight_specs()
        if len(arrays) != len(specs):
            raise ValueError(f"expected {len(specs)} weight tensors, got {len(arrays)}")
        for a, (shape, _) in zip(arrays, specs):
            if tuple(np.shape(a)) != tuple(shape):
                raise ValueError(f"weight shape {np.shape(a)} does not match architecture {shape}")
        self.weights_ = [Tensor(a) for a in arrays]
        return self

    def get_weights(self) -> list[np.ndarray]:
        check_is_fitted(self, "weights_")
        return [w.data.copy() for w in self.weights_]

    def extract(self, image: Tensor) -> Tensor:
        """Features of one ``(H, W, 3)`` image (1-D) or a batch (2-D), recorded on the active tape."""
        check_is_fitted(self, "weights_")
        shape = image.shape[-3:] if image.data.ndim == 4 else image.shape
        if image.data.ndim not in (3, 4) or tuple(shape) != tuple(self.input_shape):
            raise ValueError(f"extract: image shape {image.shape} does not match input shape {self.input_shape}")
        lo, hi = INPUT_RANGES[self.input_range]
        check_in_range(image.data, lo, hi, f"extract ({self.input_range} range)")
        return self._forward(image)

    def transform(self, X, batch_size: int = 64) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_images_u8(X)
        out = []
        for start in range(0, len(X), batch_size):
            x = Tensor(bytes_to_input(X[start:start + batch_size], self.input_range))
            out.append(self.extract(x).data.reshape(len(x.data), -1))
        return np.concatenate(out)

    def fit(self, X, y, head: ClassifierHead | None = None, epochs: int | None = None):
        head = head if head is not None else ClassifierHead(n_classes=int(np.max(y)) + 1, seed=self.seed)
        if not hasattr(self, "weights_"):
            self.initialize()
        train_extractor_with_head(self, head, X, y, self.epochs if epochs is None else epochs,
                                  seed=self.seed, batch_size=self.batch_size, lr=self.lr)
        return self


# ---------------------------------------------------------------- plain CNN


class PlainCnnExtractor(FeatureExtractor):
    """conv3x3-relu-pool stages (max, max, ..., avg) followed by a dense projection.

    Byte-range variants prepend a constant rescale to ``[-1, 1]`` so both
    variants share one architecture.
    """

    def __init__(self, input_shape=(32, 32, 3), feature_dim: int = 64, channels=(8, 16, 16),
                 input_range: str = "unit", seed: int = 0, epochs: int = 20, batch_size: int = 32,
                 lr: float = 2e-3):
        self.input_shape = input_shape
        self.feature_dim = feature_dim
        self.channels = channels
        self.input_range = input_range
        self.seed = seed
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr

    def _check_config(self) -> None:
        super()._check_config()
        h, w, _ = self.input_shape
        k = 2 ** len(self.channels)
        if h % k or w % k:
            raise ValueError(f"input_shape {self.input_shape} must be divisible by {k}")

    def _weight_specs(self):
        specs = []
        cin = self.input_shape[2]
        for cout in self.channels:
            specs.append(((3, 3, cin, cout), 9 * cin))
            specs.append(((cout,), None))
            cin = cout
        h, w, _ = self.input_shape
        k = 2 ** len(self.channels)
        flat = (h // k) * (w // k) * cin
        specs.append(((flat, self.feature_dim), flat))
        specs.append(((self.feature_dim,), None))
        return specs

    def _forward(self, x: Tensor) -> Tensor:
        batched = x.data.ndim == 4
        if self.input_range == "byte":
            x = scale_shift(x, 2.0 / 255.0, -1.0)
        ws = self.weights_
        n_conv = len(self.channels)
        for i in range(n_conv):
            x = relu(conv2d(x, ws[2 * i], ws[2 * i + 1], stride=1, padding=1))
            x = avgpool2d(x, 2) if i == n_conv - 1 else maxpool2d(x, 2)
        return dense(x, ws[-2], ws[-1], batched=batched)


# ---------------------------------------------------------------- invertible


def _space_to_channel_kernel(cin: int, rows: Sequence[int] = (0, 1)) -> np.ndarray:
    """One-hot 2x2 stride-2 kernel realizing space-to-channel.

    Output channel ``(di * 2 + dj) * cin + c`` holds input pixel offset
    ``(di, dj)`` of channel ``c``; only offsets with ``di`` in ``rows`` are kept,
    renumbered from zero.
    """
    cout = 2 * cin * len(rows)
    k = np.zeros((2, 2, cin, cout))
    o = 0
    for di in rows:
        for dj in range(2):
            for c in range(cin):
                k[di, dj, c, o] = 1.0
                o += 1
    return k


def _place_kernel(cin: int, cout: int, offset: int) -> np.ndarray:
    """1x1 kernel copying ``cin`` channels into positions ``offset..offset+cin`` of ``cout``."""
    k = np.zeros((1, 1, cin, cout))
    k[0, 0, np.arange(cin), offset + np.arange(cin)] = 1.0
    return k


def _depth_to_space(y: np.ndarray) -> np.ndarray:
    """Inverse of full space-to-channel on an (N, h, w, 4c) array."""
    n, h, w, c4 = y.shape
    c = c4 // 4
    return y.reshape(n, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c)


class InvertibleExtractor(FeatureExtractor):
    """Bijective additive-coupling network (i-RevNet style).

    The image is split by space-to-channel into two halves ``(a, b)``; blocks
    alternate ``b += F(a)`` and ``a += G(b)`` where ``F, G`` are
    conv-relu-conv residual nets. Halfway through, each half is downsampled
    by space-to-channel again. Element count is preserved everywhere, so the
    feature has ``H * W * 3`` entries. Splits, downsampling and the final
    concatenation are exact one-hot convolutions.
    """

    def __init__(self, input_shape=(16, 16, 3), n_blocks: int = 4, hidden=(16, 16, 32, 32),
                 input_range: str = "unit", seed: int = 0, epochs: int = 20, batch_size: int = 32,
                 lr: float = 1e-3):
        self.input_shape = input_shape
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.input_range = input_range
        self.seed = seed
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr

    @property
    def feature_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c

    def _check_config(self) -> None:
        super()._check_config()
        h, w, _ = self.input_shape
        if h % 4 or w % 4:
            raise ValueError(f"input_shape {self.input_shape} must be divisible by 4")
        if len(self.hidden) != self.n_blocks or self.n_blocks < 2:
            raise ValueError("need n_blocks >= 2 and one hidden width per block")

    def _half_channels(self, block: int) -> int:
        c = self.input_shape[2]
        return 2 * c if block < self.n_blocks // 2 else 8 * c

    def _weight_specs(self):
        specs = []
        for blk, hid in enumerate(self.hidden):
            c = self._half_channels(blk)
            specs += [((3, 3, c, hid), 9 * c), ((hid,), None), ((3, 3, hid, c), 9 * hid), ((c,), None)]
        return specs

    def _consts(self):
        c = self.input_shape[2]
        if getattr(self, "_const_cache", None) is None or self._const_cache[0] != c:
            self._const_cache = (
                c,
                Tensor(_space_to_channel_kernel(c, rows=(0,))),
                Tensor(_space_to_channel_kernel(c, rows=(1,))),
                Tensor(_space_to_channel_kernel(2 * c)),
                Tensor(_place_kernel(8 * c, 16 * c, 0)),
                Tensor(_place_kernel(8 * c, 16 * c, 8 * c)),
            )
        return self._const_cache[1:]

    def _residual(self, blk: int, x: Tensor) -> Tensor:
        w1, b1, w2, b2 = self.weights_[4 * blk:4 * blk + 4]
        return conv2d(relu(conv2d(x, w1, b1, padding=1)), w2, b2, padding=1)

    def _forward(self, x: Tensor) -> Tensor:
        if self.input_range == "byte":
            x = scale_shift(x, 2.0 / 255.0, -1.0)
        sel_a, sel_b, s2c, put_a, put_b = self._consts()
        a = conv2d(x, sel_a, stride=2)
        b = conv2d(x, sel_b, stride=2)
        for blk in range(self.n_blocks):
            if blk == self.n_blocks // 2:
                a = conv2d(a, s2c, stride=2)
                b = conv2d(b, s2c, stride=2)
            if blk % 2 == 0:
                b = add(b, self._residual(blk, a))
            else:
                a = add(a, self._residual(blk, b))
        return add(conv2d(a, put_a), conv2d(b, put_b))

    def invert(self, feature) -> Tensor:
        """The unique image whose features equal ``feature`` (in the extractor's input range)."""
        check_is_fitted(self, "weights_")
        f = np.asarray(feature.data if isinstance(feature, Tensor) else feature, dtype=np.float64)
        if f.size != self.feature_dim:
            raise ValueError(f"invert: feature length {f.size} != feature_dim {self.feature_dim}")
        h, w, c = self.input_shape
        y = f.reshape(1, h // 4, w // 4, 16 * c)
        a, b = y[..., :8 * c], y[..., 8 * c:]
        for blk in reversed(range(self.n_blocks)):
            if blk % 2 == 0:
                b = b - self._residual(blk, Tensor(a)).data
            else:
                a = a - self._residual(blk, Tensor(b)).data
            if blk == self.n_blocks // 2:
                a, b = _depth_to_space(a), _depth_to_space(b)
        x = _depth_to_space(np.concatenate([a, b], axis=-1))[0]
        if self.input_range == "byte":
            x = (x + 1.0) * (255.0 / 2.0)
        return Tensor(x)


def init_extractor(kind: str = "plain", seed: int = 0, **params) -> FeatureExtractor:
    """Build an extractor of ``kind`` (``plain`` or ``invertible``) with fresh weights."""
    classes = {"plain": PlainCnnExtractor, "invertible": InvertibleExtractor}
    if kind not in classes:
        raise ValueError(f"unknown extractor kind {kind!r}")
    return classes[kind](seed=seed, **params).initialize()


def _mean_cross_entropy(extractor, head, X, y, batch_size=128) -> tuple[float, float]:
    total, correct = 0.0, 0
    for start in range(0, len(X), batch_size):
        xb = Tensor(bytes_to_input(X[start:start + batch_size], extractor.input_range))
        logits = head.logits_tensor(extractor.extract(xb)).data
        p = softmax(logits)
        yb = y[start:start + batch_size]
        total -= np.sum(np.log(p[np.arange(len(yb)), yb] + 1e-300))
        correct += int(np.sum(logits.argmax(axis=1) == yb))
    return total / len(X), correct / len(X)


def train_extractor_with_head(extractor: FeatureExtractor, head: ClassifierHead, X, y,
                              epochs: int, seed: int = 0, batch_size: int = 32,
                              lr: float = 2e-3) -> dict:
    """Jointly train ``extractor`` and ``head`` with softmax cross-entropy and Adam.

    Returns a history dict with ``initial_loss``, per-epoch ``epoch_loss`` (full
    training-set mean after each epoch) and final ``train_accuracy``. Also
    stores ``head_`` and ``history_`` on the extractor.
    """
    X = check_images_u8(X)
    y = np.asarray(y, dtype=int).reshape(-1)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("training set must be non-empty with one label per image")
    if y.min() < 0 or y.max() >= head.n_classes:
        raise ValueError(f"labels must lie in [0, {head.n_classes})")
    if not hasattr(extractor, "weights_"):
        extractor.initialize()
    if not hasattr(head, "W_"):
        head.initialize(extractor.feature_dim)
    params = list(extractor.weights_) + head.parameters()
    states = [AdamState(p.size, lr) for p in params]
    onehot = np.eye(head.n_classes)[y]
    rng = np.random.default_rng(seed)
    init_loss, acc = _mean_cross_entropy(extractor, head, X, y)
    history = {"initial_loss": init_loss, "epoch_loss": [], "train_accuracy": acc}
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            for p in params:
                p.requires_grad = True
            with Tape() as tape:
                xb = Tensor(bytes_to_input(X[idx], extractor.input_range))
                logits = head.logits_tensor(extractor.extract(xb))
            backward(tape, logits, (softmax(logits.data) - onehot[idx]) / len(idx))
            for p, st in zip(params, states):
                adam_step(st, p.data, p.grad)
        loss, acc = _mean_cross_entropy(extractor, head, X, y)
        history["epoch_loss"].append(loss)
        history["train_accuracy"] = acc
    for p in params:
        p.requires_grad = False
        p.grad = None
    extractor.head_ = head
    extractor.history_ = history
    return history
