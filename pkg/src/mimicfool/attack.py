"""Feature-mimicry attacks in two variants: maf (zero start) and oimo (one fixed start image).

Both minimize the normalized squared distance between the features of a
working image and the features of a target image, using Adam on the image
itself (MaF, starting from zero) or on an additive offset to a fixed natural
start image (OIMO, optionally confined to an l-inf ball).

Two parameterizations keep the working image in range:

* ``trunc``: the variable lives in byte units and is clamped to ``[0, 255]``
  before every feature extraction. The clamp passes gradient where the value
  is inside the closed interval and blocks it outside.
* ``tanh``: the variable is unconstrained and squashed by ``tanh`` into
  ``[-1, 1]``. The OIMO start image enters as ``arctanh(lam * start)``.

Each run executes exactly ``max_iter`` Adam steps and returns the final
image, quantized to bytes once at the end.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin

from .tensor import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    clamp,
    scale_shift,
    sumsq,
    tanh,
)
from .validation import check_image_u8, check_images_u8, check_in_range

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackError",
    "scale_to_unit",
    "unscale_from_tanh",
    "atanh_safe",
    "mimic_loss",
    "clip_linf",
    "run_attack",
    "attack_many",
    "MimicryAttack",
    "DEFAULT_SETTINGS",
]

VARIANTS = ("maf", "oimo")
PARAMETERIZATIONS = ("trunc", "tanh")

# (max_iter, lr) per variant and parameterization; tanh rows follow the
# [-1, 1]-input extractor settings, trunc rows the byte-input ones.
DEFAULT_SETTINGS = {
    ("maf", "tanh"): (1000, 0.025),
    ("maf", "trunc"): (2000, 0.0125),
    ("oimo", "tanh"): (300, 0.0125),
    ("oimo", "trunc"): (500, 0.00625),
}


class AttackError(RuntimeError):
    """The optimization produced a non-finite loss."""


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "maf"
    parameterization: str = "tanh"
    max_iter: int | None = None
    lr: float | None = None
    lam: float = 0.9999
    epsilon_linf: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}, got {self.parameterization!r}")
        iters, lr = DEFAULT_SETTINGS[(self.variant, self.parameterization)]
        if self.max_iter is None:
            object.__setattr__(self, "max_iter", iters)
        if self.lr is None:
            object.__setattr__(self, "lr", lr)
        if int(self.max_iter) != self.max_iter or self.max_iter < 0:
            raise ValueError(f"max_iter must be a non-negative integer, got {self.max_iter}")
        object.__setattr__(self, "max_iter", int(self.max_iter))
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lam must lie strictly inside (0, 1), got {self.lam}")
        if self.epsilon_linf is not None:
            if self.variant != "oimo":
                raise ValueError("epsilon_linf only applies to the oimo variant")
            if not self.epsilon_linf >= 0:
                raise ValueError(f"epsilon_linf must be >= 0, got {self.epsilon_linf}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class AttackResult:
    adversarial_image: np.ndarray
    loss_trace: list[float]
    final_loss: float
    iterations_run: int
    wall_time_ms: int

    def __eq__(self, other):
        """Equal when everything but the wall time matches, bit for bit."""
        if not isinstance(other, AttackResult):
            return NotImplemented
        return (self.adversarial_image.tobytes() == other.adversarial_image.tobytes()
                and self.adversarial_image.shape == other.adversarial_image.shape
                and self.loss_trace == other.loss_trace
                and self.final_loss == other.final_loss
                and self.iterations_run == other.iterations_run)

    def summary(self) -> dict:
        trace = self.loss_trace
        return {
            "initial_loss": trace[0] if trace else None,
            "final_loss": self.final_loss,
            "min_loss": min(trace) if trace else None,
            "iterations_run": self.iterations_run,
        }


# ---------------------------------------------------------------- range maps


def scale_to_unit(image) -> Tensor:
    """Byte image to ``[-1, 1]``: ``v -> 2 v / 255 - 1``."""
    return Tensor(2.0 * (np.asarray(image, dtype=np.float64) / 255.0) - 1.0)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def unscale_from_tanh(t) -> np.ndarray:
    """``[-1, 1]`` values to bytes: ``v -> 255 (v + 1) / 2``, rounded half away from zero."""
    v = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    check_in_range(v, -1.0, 1.0, "unscale_from_tanh")
    return np.clip(_round_half_away(255.0 * (v + 1.0) / 2.0), 0, 255).astype(np.uint8)


def _bytes_from_continuous(v: np.ndarray) -> np.ndarray:
    return np.clip(_round_half_away(v), 0, 255).astype(np.uint8)


def atanh_safe(x):
    """``0.5 * ln((1 + x) / (1 - x))``; rejects ``|x| >= 1``."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(np.abs(arr) >= 1.0):
        worst = float(np.max(np.abs(arr)))
        raise ValueError(f"atanh_safe: need |x| < 1, got |x| = {worst}")
    out = 0.5 * np.log((1.0 + arr) / (1.0 - arr))
    return float(out) if np.ndim(x) == 0 else out


# ---------------------------------------------------------------- loss


def mimic_loss(feature_adv: Tensor, feature_target) -> Tensor:
    """``||feature_adv - feature_target||^2 / d`` as a differentiable scalar."""
    target = np.asarray(feature_target.data if isinstance(feature_target, Tensor) else feature_target,
                        dtype=np.float64)
    if target.size != feature_adv.size:
        raise ValueError(f"mimic_loss: feature lengths differ, {feature_adv.size} vs {target.size}")
    diff = scale_shift(feature_adv, 1.0, -target.reshape(feature_adv.shape))
    return scale_shift(sumsq(diff), 1.0 / target.size, 0.0)


def clip_linf(values, center, epsilon: float, lo: float = 0.0, hi: float = 255.0) -> np.ndarray:
    """Project onto the l-inf ball of radius ``epsilon`` around ``center``, then into ``[lo, hi]``."""
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if v.shape != c.shape:
        raise ValueError(f"clip_linf: shape mismatch {v.shape} vs {c.shape}")
    return np.clip(np.clip(v, c - epsilon, c + epsilon), lo, hi)


# ---------------------------------------------------------------- engine


def _to_extractor_range(x: Tensor, have: str, want: str) -> Tensor:
    if have == want:
        return x
    if want == "byte":
        return scale_shift(x, 127.5, 127.5)
    return scale_shift(x, 2.0 / 255.0, -1.0)


def _target_input(extractor, image: np.ndarray) -> Tensor:
    if extractor.input_range == "unit":
        return scale_to_unit(image)
    return Tensor(image.astype(np.float64))


def _features(extractor, image: np.ndarray) -> np.ndarray:
    return extractor.extract(_target_input(extractor, image)).data.reshape(-1)


def starting_image(extractor, config: AttackConfig, start_image=None) -> np.ndarray:
    """The byte image the optimization begins from.

    For MaF this is the zero variable seen through the parameterization:
    all-zero bytes under trunc, mid-gray ``tanh(0)`` under tanh.
    """
    if config.variant == "oimo":
        return check_image_u8(start_image, "start_image")
    shape = tuple(extractor.input_shape)
    if config.parameterization == "trunc":
        return np.zeros(shape, dtype=np.uint8)
    return unscale_from_tanh(np.zeros(shape))


def starting_input(extractor, config: AttackConfig, start_image=None) -> Tensor:
    """Extractor input at iteration 0, before any byte quantization."""
    shape = tuple(extractor.input_shape)
    if config.variant == "oimo":
        img = check_image_u8(start_image, "start_image")
        if config.parameterization == "tanh":
            unit = np.tanh(atanh_safe(config.lam * scale_to_unit(img).data))
            return _to_extractor_range(Tensor(unit), "unit", extractor.input_range)
        return _target_input(extractor, img)
    if config.parameterization == "trunc":
        return _to_extractor_range(Tensor(np.zeros(shape)), "byte", extractor.input_range)
    return _to_extractor_range(Tensor(np.zeros(shape)), "unit", extractor.input_range)


def attack_objective(extractor, f_target, config: AttackConfig, base=None):
    """The differentiable loss the attack minimizes, as a function of the offset variable.

    ``base`` is the re-parameterized start image for OIMO (``None`` for MaF).
    """
    base_t = None if base is None else Tensor(base)
    tanh_mode = config.parameterization == "tanh"

    def loss(param: Tensor) -> Tensor:
        z = param if base_t is None else add(base_t, param)
        if tanh_mode:
            x = _to_extractor_range(tanh(z), "unit", extractor.input_range)
        else:
            x = _to_extractor_range(clamp(z, 0.0, 255.0), "byte", extractor.input_range)
        return mimic_loss(extractor.extract(x), f_target)

    return loss


def run_attack(extractor, target_image, start_image=None, config: AttackConfig | None = None) -> AttackResult:
    """Optimize an image whose features mimic those of ``target_image``."""
    config = config or AttackConfig()
    t0 = time.perf_counter()
    shape = tuple(extractor.input_shape)
    target = check_image_u8(target_image, "target_image")
    if target.shape != shape:
        raise ValueError(f"target_image shape {target.shape} != extractor input shape {shape}")
    if config.variant == "maf":
        if start_image is not None:
            raise ValueError("maf starts from the zero image; start_image must be omitted")
        start = None
    else:
        if start_image is None:
            raise ValueError("oimo needs a start_image")
        start = check_image_u8(start_image, "start_image")
        if start.shape != shape:
            raise ValueError(f"start_image shape {start.shape} != extractor input shape {shape}")

    f_target = _features(extractor, target)
    tanh_mode = config.parameterization == "tanh"
    eps = config.epsilon_linf

    if start is None:
        base = None
    elif tanh_mode:
        base = atanh_safe(config.lam * scale_to_unit(start).data)
    else:
        base = start.astype(np.float64)
    objective = attack_objective(extractor, f_target, config, base)
    param = Tensor(np.zeros(shape), requires_grad=True)
    state = AdamState(param.size, config.lr)

    trace: list[float] = []
    for it in range(config.max_iter):
        with Tape() as tape:
            loss = objective(param)
        value = loss.item()
        if not math.isfinite(value):
            raise AttackError(f"non-finite loss {value} at iteration {it}")
        trace.append(value)
        backward(tape, loss)
        adam_step(state, param.data, param.grad)
        if eps is not None:
            _project(param.data, base, start, eps, tanh_mode, config.lam)

    z = param.data if base is None else base + param.data
    if tanh_mode:
        adv = unscale_from_tanh(np.tanh(z))
    else:
        adv = _bytes_from_continuous(z)
    final = float(mimic_loss(Tensor(_features(extractor, adv)), f_target).item())
    return AttackResult(
        adversarial_image=adv,
        loss_trace=trace,
        final_loss=final,
        iterations_run=len(trace),
        wall_time_ms=int(round((time.perf_counter() - t0) * 1000)),
    )


def _project(delta: np.ndarray, base: np.ndarray, start: np.ndarray, eps: float,
             tanh_mode: bool, lam: float) -> None:
    """Pull the working image back into the eps-ball around ``start`` (in byte units), in place."""
    center = start.astype(np.float64)
    if not tanh_mode:
        delta[...] = clip_linf(base + delta, center, eps) - base
        return
    img = 255.0 * (np.tanh(base + delta) + 1.0) / 2.0
    clipped = clip_linf(img, center, eps)
    moved = clipped != img
    if moved.any():
        unit = np.clip(2.0 * clipped[moved] / 255.0 - 1.0, -lam, lam)
        delta[moved] = atanh_safe(unit) - base[moved]


def attack_many(extractor, jobs: Sequence[tuple], n_jobs: int = 1) -> list[AttackResult]:
    """Run ``(target, start, config)`` jobs; results come back in job order."""
    if n_jobs == 1:
        return [run_attack(extractor, t, s, c) for t, s, c in jobs]
    return Parallel(n_jobs=n_jobs)(delayed(run_attack)(extractor, t, s, c) for t, s, c in jobs)


class MimicryAttack(TransformerMixin, BaseEstimator):
    """scikit-learn front end: ``transform`` maps target images to adversarial images.

    ``variant="oimo"`` needs ``start_image``. Per-image results land in
    ``results_`` after each ``transform`` call.
    """

    def __init__(self, extractor=None, variant: str = "maf", parameterization: str = "tanh",
                 max_iter: int | None = None, lr: float | None = None, lam: float = 0.9999,
                 epsilon_linf: float | None = None, start_image=None, n_jobs: int = 1, seed: int = 0):
        self.extractor = extractor
        self.variant = variant
        self.parameterization = parameterization
        self.max_iter = max_iter
        self.lr = lr
        self.lam = lam
        self.epsilon_linf = epsilon_linf
        self.start_image = start_image
        self.n_jobs = n_jobs
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.extractor is None or not hasattr(self.extractor, "weights_"):
            raise ValueError("MimicryAttack needs a fitted extractor")
        self.config_ = AttackConfig(self.variant, self.parameterization, self.max_iter, self.lr,
                                    self.lam, self.epsilon_linf, self.seed)
        if self.variant == "oimo":
            if self.start_image is None:
                raise ValueError("oimo needs start_image")
            check_image_u8(self.start_image, "start_image")
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "config_"):
            self.fit()
        X = check_images_u8(X)
        jobs = [(x, self.start_image, self.config_) for x in X]
        self.results_ = attack_many(self.extractor, jobs, self.n_jobs)
        return np.stack([r.adversarial_image for r in self.results_])
