from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mimicfool import checkpoint, config
from mimicfool.attack import AttackConfig
from mimicfool.data import ANSWERS, COLORS, N_CLASSES, QUESTIONS, SHAPES, describe, label_of, synth_dataset
from mimicfool.models import ModelBundle, train_bundle
from mimicfool.ppm import PpmError, decode_ppm, encode_ppm, read_ppm, write_ppm


# ---------------------------------------------------------------- data

def test_dataset_is_deterministic():
    a, b = synth_dataset(8, seed=3), synth_dataset(8, seed=3)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert synth_dataset(8, seed=4)[0].image.tobytes() != a[0].image.tobytes()


def test_single_sample_is_consistent():
    (s,) = synth_dataset(1, seed=0)
    attrs = s.attributes
    assert s.label == label_of(attrs["shape"], attrs["color"])
    assert s.tokens == describe(attrs)
    assert [ANSWERS[a] for _, a in s.qa_pairs()] == [attrs[key] for _, key, _ in QUESTIONS]
    assert s.image.shape == (32, 32, 3) and s.image.dtype == np.uint8


def test_class_balance_at_500():
    counts = Counter(s.label for s in synth_dataset(500, seed=0))
    assert set(counts) == set(range(N_CLASSES))
    expected = 500 / N_CLASSES
    assert all(abs(c - expected) <= 0.2 * expected for c in counts.values())


def test_shape_color_is_visible():
    # the rendered shape's dominant channel follows its colour
    for s in synth_dataset(30, seed=2):
        ch = COLORS.index(s.attributes["color"])
        assert s.attributes["shape"] in SHAPES
        mask = s.image[..., ch].astype(int) - s.image.mean(axis=2) > 40
        assert mask.sum() > 0


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        synth_dataset(0, seed=0)


# ---------------------------------------------------------------- ppm

def test_ppm_single_red_pixel_bytes():
    img = np.array([[[255, 0, 0]]], dtype=np.uint8)
    assert encode_ppm(img) == b"P6\n1 1\n255\n" + bytes([255, 0, 0])


def test_ppm_round_trip_file(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    path = tmp_path / "x.ppm"
    write_ppm(img, path)
    back = read_ppm(path)
    assert np.array_equal(back, img)
    write_ppm(back, tmp_path / "y.ppm")
    assert path.read_bytes() == (tmp_path / "y.ppm").read_bytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip_property(img):
    assert np.array_equal(decode_ppm(encode_ppm(img)), img)


def test_ppm_header_comments_are_skipped():
    data = b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6))
    assert decode_ppm(data).reshape(-1).tolist() == list(range(6))


@pytest.mark.parametrize("data,needle", [
    (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
    (b"P3\n1 1\n255\n" + bytes(3), "magic"),
    (b"P6\n2 2\n255\n" + bytes(5), "truncated raster"),
    (b"P6\n2 2", "truncated header"),
    (b"P6\n2 x\n255\n" + bytes(12), "non-numeric"),
    (b"P6\n0 2\n255\n", "width"),
])
def test_ppm_rejects_malformed(data, needle):
    with pytest.raises(PpmError, match=needle) as err:
        decode_ppm(data)
    assert 0 <= err.value.offset <= len(data)


def test_ppm_error_offset_points_at_maxval():
    data = b"P6\n1 1\n65535\n" + bytes(6)
    with pytest.raises(PpmError) as err:
        decode_ppm(data)
    assert data[err.value.offset:].startswith(b"65535")


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = [rng.normal(size=(3, 3, 2, 4)), np.array([np.pi, -0.0, 1e-300]), np.zeros((0, 2)), np.array(5.0)]
    checkpoint.save_tensors(tensors, tmp_path / "w.mimw")
    back = checkpoint.load_tensors(tmp_path / "w.mimw")
    assert [a.shape for a in back] == [np.shape(a) for a in tensors]
    assert all(a.tobytes() == np.asarray(b).tobytes() for a, b in zip(back, tensors))


@pytest.mark.parametrize("mutate,needle", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_checkpoint_rejects_damage(mutate, needle):
    buf = checkpoint.encode_tensors([np.ones(4)])
    with pytest.raises(checkpoint.CheckpointError, match=needle):
        checkpoint.decode_tensors(mutate(buf))


def test_vocab_round_trip(tmp_path):
    vocab = ["<bos>", "<eos>", "rouge", "carré"]
    checkpoint.save_vocab(vocab, tmp_path / "v.txt")
    assert checkpoint.load_vocab(tmp_path / "v.txt") == vocab
    with pytest.raises(ValueError):
        checkpoint.save_vocab(["a\nb"], tmp_path / "bad.txt")


def test_bundle_save_load_is_exact(tmp_path):
    bundle = train_bundle("plain", seed=0, n_train=30, epochs=1)
    bundle.save(tmp_path / "m")
    loaded = ModelBundle.load(tmp_path / "m")
    X = np.stack([s.image for s in synth_dataset(4, seed=7)])
    F = bundle.extractor.transform(X)
    assert loaded.extractor.transform(X).tobytes() == F.tobytes()
    assert loaded.decoder.predict(F) == bundle.decoder.predict(F)
    assert np.array_equal(loaded.qa.predict(F, [0, 1, 2, 3]), bundle.qa.predict(F, [0, 1, 2, 3]))
    assert loaded.meta["arch"] == "plain"


def test_bundle_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        ModelBundle.load(tmp_path / "nothing")


# ---------------------------------------------------------------- config files

def test_config_parses_typed_values():
    values = config.parse_config(
        "# comment\nvariant = oimo\nmax_iter = 30\nlr=0.5\nlambda = 0.99\n"
        "eps_sweep = 2, 5,10\ntask = vqa\nmodels = m/plain  # trailing\n")
    assert values == {"variant": "oimo", "max_iter": 30, "lr": 0.5, "lam": 0.99,
                      "eps_sweep": (2.0, 5.0, 10.0), "task": "vqa", "models_dir": "m/plain"}
    spec = config.campaign_spec_from(values)
    assert spec.attack == AttackConfig("oimo", "tanh", 30, 0.5, 0.99)
    assert spec.eps_sweep == (2.0, 5.0, 10.0)


@pytest.mark.parametrize("text,needle", [
    ("colour = red\n", "unknown key"),
    ("max_iter = many\n", "bad value"),
    ("just words\n", "config"),
])
def test_config_errors(text, needle):
    with pytest.raises(config.ConfigError, match=needle):
        config.parse_config(text)


def test_config_file_utf8(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("out_dir = résultats\nseed = 4\n", encoding="utf-8")
    assert config.load_config(p) == {"out_dir": "résultats", "seed": 4}
