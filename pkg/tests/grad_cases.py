"""Random small instances of every tensor op, and a reverse-mode vs finite-difference checker."""

import numpy as np

from mimicfool.tensor import OP_KINDS, Tape, Tensor, backward, finite_diff_grad, op_forward

from oracles import max_rel_err, max_scaled_err

INSTANCES_PER_OP = 20


def _away_from(x, points, gap=1e-3):
    """Nudge entries sitting within ``gap`` of a kink so finite differences stay on one side."""
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return x


def make_case(kind: str, rng: np.random.Generator):
    """(inputs, params) for one random instance of ``kind``."""
    if kind == "conv2d":
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        size = int(rng.integers(k, 6))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        batch = int(rng.integers(1, 3))
        x = rng.normal(size=(batch, size, size, cin))
        w = rng.normal(size=(k, k, cin, cout))
        b = rng.normal(size=cout)
        return [x, w, b], {"stride": stride, "padding": padding}
    if kind == "dense":
        n, m, batch = (int(v) for v in rng.integers(1, 6, size=3))
        return [rng.normal(size=(batch, n)), rng.normal(size=(n, m)), rng.normal(size=m)], {"batched": True}
    shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    if kind == "relu":
        return [_away_from(rng.normal(size=shape), [0.0])], {}
    if kind == "tanh":
        return [rng.normal(size=shape) * 2], {}
    if kind in ("avgpool2d", "maxpool2d"):
        k = int(rng.integers(1, 4))
        reps = rng.integers(1, 3, size=2)
        x = rng.normal(size=(int(rng.integers(1, 3)), k * int(reps[0]), k * int(reps[1]), int(rng.integers(1, 4))))
        return [x], {"k": k}
    if kind == "add":
        return [rng.normal(size=shape), rng.normal(size=shape)], {}
    if kind == "scale-shift":
        return [rng.normal(size=shape)], {"scale": float(rng.normal()), "shift": float(rng.normal())}
    if kind == "sumsq":
        return [rng.normal(size=shape)], {}
    if kind == "clamp":
        return [_away_from(rng.normal(size=shape), [-0.5, 0.5])], {"lo": -0.5, "hi": 0.5}
    raise ValueError(kind)


def check_gradients(forward, arrays, rng, h=1e-5, metric=max_rel_err) -> float:
    """Worst error over all inputs of ``sum(forward(*inputs) * r)`` for a random ``r``."""
    with Tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = forward(*leaves)
    r = rng.normal(size=out.size)
    backward(tape, out, seed=r)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def scalar(t, i=i):
            args = [t if j == i else Tensor(a) for j, a in enumerate(arrays)]
            return float(np.dot(forward(*args).data.reshape(-1), r))
        numeric = finite_diff_grad(scalar, Tensor(arrays[i]), h=h)
        worst = max(worst, metric(leaf.grad, numeric))
    return worst


def op_gradient_errors(kind: str, seed: int = 0) -> list[float]:
    rng = np.random.default_rng([seed, OP_KINDS.index(kind)])
    errors = []
    for _ in range(INSTANCES_PER_OP):
        arrays, params = make_case(kind, rng)
        errors.append(check_gradients(lambda *xs: op_forward(kind, xs, **params), arrays, rng))
    return errors


def attack_loss_errors(extractor, seed: int = 0, instances: int = INSTANCES_PER_OP,
                       metric=max_rel_err) -> list[float]:
    """Gradient check of the attack objective w.r.t. its optimization variable.

    Cycles through MaF/OIMO and tanh/trunc; trunc offsets stay clear of the clamp edges.
    Coordinates with gradients near 1e-8 sit below what central differences at
    h = 1e-5 resolve, so callers usually pass ``metric=max_scaled_err``.
    """
    from mimicfool.attack import AttackConfig, atanh_safe, attack_objective, scale_to_unit

    rng = np.random.default_rng(seed)
    shape = tuple(extractor.input_shape)
    errors = []
    for i in range(instances):
        variant = ("maf", "oimo")[i % 2]
        param_kind = ("tanh", "trunc")[(i // 2) % 2]
        config = AttackConfig(variant, param_kind)
        target = rng.integers(0, 256, size=shape).astype(np.uint8)
        f_target = extractor.transform(target[None])[0]
        if variant == "oimo":
            start = rng.integers(20, 236, size=shape).astype(np.uint8)
            base = (atanh_safe(config.lam * scale_to_unit(start).data) if param_kind == "tanh"
                    else start.astype(np.float64))
        else:
            base = None
        if param_kind == "tanh":
            p = rng.normal(scale=0.5, size=shape)
        elif base is None:
            p = rng.uniform(5.0, 250.0, size=shape)
        else:
            p = rng.uniform(-10.0, 10.0, size=shape)
        objective = attack_objective(extractor, f_target, config, base)
        errors.append(check_gradients(objective, [p], rng, metric=metric))
    return errors
