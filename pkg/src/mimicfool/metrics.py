"""Image-quality and caption-overlap metrics for attack results."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .attack import mimic_loss
from .tensor import Tensor
from .validation import check_image_u8

__all__ = ["psnr", "ssim", "bleu_n", "bleu", "feature_mse", "MetricsReport", "evaluate_pair"]

SSIM_WINDOW = 8
_C1 = (0.01 * 255) ** 2
_C2 = (0.03 * 255) ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = check_image_u8(a, "a").astype(np.float64)
    b = check_image_u8(b, "b").astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``20 log10(255 / sqrt(MSE))`` in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(255.0 / math.sqrt(mse))


def ssim(a, b) -> float:
    """Mean SSIM over non-overlapping 8x8 windows, computed per channel."""
    a, b = _pair(a, b)
    h, w, c = a.shape
    k = SSIM_WINDOW
    if h < k or w < k:
        raise ValueError(f"ssim needs images of at least {k}x{k}, got {h}x{w}")
    hh, ww = (h // k) * k, (w // k) * k

    def windows(x):
        return x[:hh, :ww].reshape(hh // k, k, ww // k, k, c).transpose(0, 2, 4, 1, 3).reshape(-1, k * k)

    wa, wb = windows(a), windows(b)
    mu_a, mu_b = wa.mean(axis=1), wb.mean(axis=1)
    da, db = wa - mu_a[:, None], wb - mu_b[:, None]
    var_a, var_b = (da * da).mean(axis=1), (db * db).mean(axis=1)
    cov = (da * db).mean(axis=1)
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    """Single-reference BLEU up to ``n``-grams, uniform weights, no smoothing.

    An order at which neither sequence has any n-grams (both shorter than n)
    counts as a full match, so identical sequences always score 1.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        cand = _ngrams(candidate, k)
        ref = _ngrams(reference, k)
        total = sum(cand.values())
        if total == 0:
            if not ref:
                continue
            return 0.0
        clipped = sum(min(cnt, ref[g]) for g, cnt in cand.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / n
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu(candidate, reference) -> list[float]:
    """BLEU-1 .. BLEU-4."""
    return [bleu_n(candidate, reference, n) for n in range(1, 5)]


def feature_mse(a, b) -> float:
    """Normalized squared feature distance; same arithmetic as the attack loss."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    return mimic_loss(Tensor(a), b).item()


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    feature_mse: float
    bleu: list[float] | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        if math.isinf(self.psnr_db):
            d["psnr_db"] = "inf"
        return d


def evaluate_pair(adversarial, start, original, feat_adv, feat_org,
                  tokens_adv=None, tokens_org=None) -> MetricsReport:
    """PSNR against the start image, SSIM against the original, feature MSE, optional BLEU."""
    return MetricsReport(
        psnr_db=psnr(adversarial, start),
        ssim=ssim(adversarial, original),
        feature_mse=feature_mse(feat_adv, feat_org),
        bleu=None if tokens_adv is None else bleu(tokens_adv, tokens_org),
    )
