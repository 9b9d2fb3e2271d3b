import json
import logging
from pathlib import Path

import numpy as np
import pytest
from sklearn.base import clone

from mimicfool.data import as_arrays, render_sample, synth_dataset
from mimicfool.extractors import (
    InvertibleExtractor, PlainCnnExtractor, bytes_to_input, fan_in_bound, init_extractor,
    train_extractor_with_head,
)
from mimicfool.heads import ClassifierHead
from mimicfool.tensor import Tensor

GOLDENS = json.loads((Path(__file__).parent / "goldens.json").read_text())
log = logging.getLogger(__name__)


def _unit(image):
    return Tensor(bytes_to_input(image, "unit"))


def test_zero_weights_give_zero_features():
    ex = PlainCnnExtractor().initialize()
    ex.set_weights([np.zeros_like(w) for w in ex.get_weights()])
    f = ex.extract(_unit(render_sample(0, 0).image))
    assert f.shape == (64,)
    assert not f.data.any()


@pytest.mark.parametrize("input_range", ["unit", "byte"])
def test_invertible_round_trip(input_range):
    ex = InvertibleExtractor(input_range=input_range, seed=2).initialize()
    rng = np.random.default_rng(0)
    for _ in range(10):
        img = rng.integers(0, 256, size=(16, 16, 3))
        x = Tensor(bytes_to_input(img, input_range))
        back = ex.invert(ex.extract(x))
        assert np.max(np.abs(back.data - x.data)) < 1e-6 * (255 if input_range == "byte" else 1)


def test_invert_of_perturbed_feature_moves_the_image():
    ex = InvertibleExtractor(seed=2).initialize()
    x = _unit(render_sample(0, 1, size=16).image)
    f = ex.extract(x).data.reshape(-1)
    noise = np.random.default_rng(1).normal(size=f.shape)
    f_pert = f + 1e-3 * noise / np.linalg.norm(noise)
    dist = np.linalg.norm(ex.invert(f_pert).data - x.data)
    log.info("image distance after a 1e-3 feature perturbation: %.3e", dist)
    assert dist > 0


def test_single_coupling_block_inverts():
    ex = InvertibleExtractor(seed=4).initialize()
    rng = np.random.default_rng(0)
    x1, x2 = rng.normal(size=(1, 8, 8, 6)), rng.normal(size=(1, 8, 8, 6))
    y2 = x2 + ex._residual(0, Tensor(x1)).data
    recovered = y2 - ex._residual(0, Tensor(x1)).data
    # equal up to the rounding of one add and one subtract
    np.testing.assert_allclose(recovered, x2, rtol=0, atol=4 * np.finfo(float).eps * np.abs(y2).max())


@pytest.mark.parametrize("kind", ["plain", "invertible"])
def test_init_is_seeded(kind):
    a, b, c = init_extractor(kind, 3), init_extractor(kind, 3), init_extractor(kind, 4)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.get_weights(), b.get_weights()))
    assert any(not np.array_equal(x, y) for x, y in zip(a.get_weights(), c.get_weights()))


@pytest.mark.parametrize("kind", ["plain", "invertible"])
def test_init_respects_fan_in_bound(kind):
    ex = init_extractor(kind, 0)
    for w, (shape, fan_in) in zip(ex.get_weights(), ex._weight_specs()):
        if fan_in is None:
            assert not w.any()
        else:
            assert np.abs(w).max() <= fan_in_bound(fan_in)


def test_features_are_deterministic_and_batch_consistent():
    ex = init_extractor("plain", 0)
    X, _ = as_arrays(synth_dataset(4, seed=9))
    a, b = ex.transform(X), ex.transform(X)
    assert a.tobytes() == b.tobytes()
    single = np.stack([ex.extract(_unit(x)).data for x in X])
    np.testing.assert_allclose(single, a, rtol=0, atol=1e-12)


def test_golden_feature_vector():
    ex = init_extractor("plain", 0)
    f = ex.extract(_unit(render_sample(0, 0).image)).data
    golden = np.array([float.fromhex(h) for h in GOLDENS["plain_seed0_feature_sample_0_0"]])
    assert f.tobytes() == golden.tobytes()


def test_extract_rejects_wrong_shape_and_range():
    ex = init_extractor("plain", 0)
    with pytest.raises(ValueError, match="input shape"):
        ex.extract(Tensor(np.zeros((16, 16, 3))))
    with pytest.raises(ValueError, match="range"):
        ex.extract(Tensor(np.full((32, 32, 3), 2.0)))


def test_zero_epochs_leave_weights_unchanged():
    ex = init_extractor("plain", 0)
    before = ex.get_weights()
    X, y = as_arrays(synth_dataset(20, seed=1))
    train_extractor_with_head(ex, ClassifierHead(seed=0), X, y, epochs=0)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, ex.get_weights()))


def test_first_epoch_lowers_loss():
    ex = init_extractor("plain", 0)
    X, y = as_arrays(synth_dataset(200, seed=1))
    hist = train_extractor_with_head(ex, ClassifierHead(seed=0), X, y, epochs=1)
    assert hist["epoch_loss"][0] < hist["initial_loss"]


@pytest.mark.slow
def test_twenty_epochs_reach_training_accuracy(plain_bundle):
    assert plain_bundle.meta["train_accuracy"] >= 0.9
    assert plain_bundle.meta["epoch_loss"][-1] < plain_bundle.meta["initial_loss"]


@pytest.mark.slow
def test_lipschitz_estimate_is_logged(plain_bundle):
    X, _ = as_arrays(synth_dataset(40, seed=5))
    F = plain_bundle.extractor.transform(X)
    Xu = bytes_to_input(X, "unit").reshape(len(X), -1)
    ratios = [np.linalg.norm(F[i] - F[j]) / np.linalg.norm(Xu[i] - Xu[j])
              for i in range(len(X)) for j in range(i + 1, len(X))]
    log.info("empirical Lipschitz estimate of the trained plain extractor: %.4f", max(ratios))
    assert np.isfinite(max(ratios))


def test_sklearn_params_and_clone():
    ex = PlainCnnExtractor(feature_dim=32, seed=5)
    assert ex.get_params()["feature_dim"] == 32
    twin = clone(ex)
    assert twin.get_params() == ex.get_params()
    assert InvertibleExtractor(input_shape=(8, 8, 3)).feature_dim == 192


def test_fit_transform_shapes():
    X, y = as_arrays(synth_dataset(12, seed=2))
    ex = PlainCnnExtractor(epochs=1, seed=0).fit(X, y)
    assert ex.transform(X).shape == (12, 64)
    assert ex.head_.predict(ex.transform(X)).shape == (12,)
