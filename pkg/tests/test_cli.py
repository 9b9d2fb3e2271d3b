import json
import shutil

import numpy as np
import pytest

from mimicfool import cli
from mimicfool.cli import main
from mimicfool.data import synth_dataset
from mimicfool.models import train_bundle
from mimicfool.ppm import read_ppm, write_ppm


@pytest.fixture(scope="module")
def tiny_models(tmp_path_factory):
    out = tmp_path_factory.mktemp("models") / "plain"
    train_bundle("plain", seed=0, n_train=30, epochs=1).save(out)
    return out


def test_max_iter_zero_is_rejected(tiny_models, tmp_path, capsys):
    target = tmp_path / "t.ppm"
    write_ppm(synth_dataset(1, seed=0)[0].image, target)
    code = main(["attack", "--variant", "maf", "--max-iter", "0", "--models", str(tiny_models),
                 "--target", str(target)])
    assert code == 1
    assert "max-iter" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["campaign", "--config", str(tmp_path / "c.cfg")]) == 1


def test_unknown_flag_prints_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--bogus"])
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_invert_check_seed_7(capsys):
    assert main(["invert-check", "--seed", "7"]) == 0
    line = capsys.readouterr().out
    assert float(line.rsplit(":", 1)[1]) < 1e-6


def test_gen_data_then_metrics(tmp_path, capsys):
    assert main(["gen-data", "--n", "3", "--seed", "2", "--out", str(tmp_path)]) == 0
    labels = json.loads((tmp_path / "labels.json").read_text())
    assert [s["file"] for s in labels["samples"]] == ["sample_0000.ppm", "sample_0001.ppm", "sample_0002.ppm"]
    assert np.array_equal(read_ppm(tmp_path / "sample_0000.ppm"), synth_dataset(3, seed=2)[0].image)
    capsys.readouterr()
    a = str(tmp_path / "sample_0000.ppm")
    assert main(["metrics", a, a]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == {"psnr_db": "inf", "ssim": 1.0}


def test_attack_writes_image_and_summary(tiny_models, tmp_path, capsys):
    target, start = tmp_path / "t.ppm", tmp_path / "s.ppm"
    images = synth_dataset(2, seed=5)
    write_ppm(images[0].image, target)
    write_ppm(images[1].image, start)
    out = tmp_path / "adv.ppm"
    code = main(["attack", "--variant", "oimo", "--max-iter", "3", "--epsilon", "4", "--models", str(tiny_models),
                 "--target", str(target), "--start", str(start), "--out", str(out)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["config"]["epsilon_linf"] == 4.0
    adv = read_ppm(out)
    assert np.abs(adv.astype(int) - images[1].image.astype(int)).max() <= 4


def test_campaign_from_config_file(tiny_models, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"variant = maf\nmax_iter = 2\nn_images = 2\nmodels = {tiny_models}\n", encoding="utf-8")
    out = tmp_path / "run"
    assert main(["campaign", "--config", str(cfg), "--out", str(out), "--task", "caption"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["spec"]["task"] == "caption"
    assert report["spec"]["attack"]["max_iter"] == 2
    assert len(report["records"]) == 2


def test_bad_config_value_exits_1(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("max_iter = lots\n", encoding="utf-8")
    assert main(["campaign", "--config", str(cfg)]) == 1


def test_corrupt_model_is_invalid_input(tiny_models, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(tiny_models, broken)
    path = broken / "extractor.mimw"
    path.write_bytes(path.read_bytes()[:-5])
    target = tmp_path / "t.ppm"
    write_ppm(synth_dataset(1, seed=0)[0].image, target)
    code = main(["attack", "--variant", "maf", "--max-iter", "1", "--models", str(broken), "--target", str(target)])
    assert code == 1


def test_failure_mid_run_exits_2(tiny_models, tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise FloatingPointError("overflow in step 3")

    monkeypatch.setattr(cli, "run_attack", explode)
    target = tmp_path / "t.ppm"
    write_ppm(synth_dataset(1, seed=0)[0].image, target)
    assert main(["attack", "--variant", "maf", "--models", str(tiny_models), "--target", str(target)]) == 2
