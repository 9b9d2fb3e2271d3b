import copy
import json

import numpy as np
import pytest

from mimicfool.attack import AttackConfig, AttackResult, run_attack
from mimicfool.campaign import SCHEMA_VERSION, CampaignSpec, run_campaign
from mimicfool.heads import QaHead
from mimicfool.models import train_bundle
from mimicfool.ppm import read_ppm


@pytest.fixture(scope="module")
def tiny_bundle():
    return train_bundle("plain", seed=0, n_train=40, epochs=2)


def echo_target(extractor, target, start, config):
    """Stand-in attack returning the target itself, so every output matches."""
    return AttackResult(target.copy(), [1.0, 0.0], 0.0, 2, 0)


class CountingAttack:
    def __init__(self, inner=echo_target, fail_on=()):
        self.calls = 0
        self.inner = inner
        self.fail_on = set(fail_on)

    def __call__(self, extractor, target, start, config):
        self.calls += 1
        if self.calls - 1 in self.fail_on:
            raise FloatingPointError("diverged")
        return self.inner(extractor, target, start, config)


def test_vqa_runs_one_attack_per_image(tiny_bundle):
    attack = CountingAttack()
    spec = CampaignSpec(task="vqa", attack=AttackConfig("maf", "tanh"), n_images=6, seed=1)
    report = run_campaign(spec, tiny_bundle, attack_fn=attack)
    agg = report.aggregate
    assert attack.calls == 6 == report.attack_invocations
    assert agg["total_pairs"] == 6 * 5
    assert agg["filtered"] + agg["evaluated"] == agg["total_pairs"]
    assert agg["success_rate"] == 1.0 or agg["no_evaluable_pairs"]
    for rec in report.records:
        pairs = rec["heads"]["vqa"]
        assert all((p["match"] is None) == p["filtered"] for p in pairs)


def test_three_questions_one_image(tiny_bundle):
    bundle = copy.copy(tiny_bundle)
    qa = QaHead(n_questions=3, n_answers=12, seed=0).initialize(64)
    bundle.qa = qa
    attack = CountingAttack()
    report = run_campaign(CampaignSpec(task="vqa", n_images=1), bundle, attack_fn=attack)
    assert attack.calls == 1
    assert report.aggregate["total_pairs"] == 3
    assert report.aggregate["evaluated"] <= 3


def test_all_pairs_filtered_flags_empty_denominator(tiny_bundle):
    bundle = copy.copy(tiny_bundle)
    qa = QaHead(n_questions=5, n_answers=12, seed=0).initialize(64)
    qa.W_[:] = 0.0  # answers never depend on the image, so every pair is bias-filtered
    bundle.qa = qa
    report = run_campaign(CampaignSpec(task="vqa", n_images=3), bundle, attack_fn=echo_target)
    agg = report.aggregate
    assert agg["filtered"] == agg["total_pairs"] == 15
    assert agg["evaluated"] == 0
    assert agg["no_evaluable_pairs"] is True
    assert agg["success_rate"] is None
    assert all(r["success"] is None for r in report.records)


def test_filter_uses_start_image_for_oimo(tiny_bundle, tmp_path):
    spec = CampaignSpec(task="vqa", attack=AttackConfig("oimo", "tanh"), n_images=4, out_dir=str(tmp_path))
    report = run_campaign(spec, tiny_bundle, attack_fn=echo_target)
    start = read_ppm(tmp_path / "start.ppm")
    f_start = tiny_bundle.extractor.transform(start[None])
    answers = [int(tiny_bundle.qa.predict(f_start, [q])[0]) for q in range(5)]
    for rec in report.records:
        assert [p["start"] for p in rec["heads"]["vqa"]] == answers


def test_failed_attacks_are_recorded_and_skipped(tiny_bundle):
    attack = CountingAttack(fail_on={1})
    report = run_campaign(CampaignSpec(n_images=3), tiny_bundle, attack_fn=attack)
    assert attack.calls == 3
    assert "diverged" in report.records[1]["error"]
    assert report.aggregate["errors"] == 1
    assert report.aggregate["evaluated"] == 2
    assert report.aggregate["success_rate"] == 1.0


def test_success_rate_is_successes_over_evaluated(tiny_bundle):
    def start_only(extractor, target, start, config):
        return AttackResult(np.zeros_like(target), [], 0.0, 0, 0)

    report = run_campaign(CampaignSpec(n_images=9), tiny_bundle, attack_fn=start_only)
    agg = report.aggregate
    assert agg["success_rate"] == agg["successes"] / agg["evaluated"]
    assert agg["successes"] == sum(r["success"] for r in report.records)


def test_report_files_and_determinism(tiny_bundle, tmp_path):
    cfg = AttackConfig("oimo", "tanh", max_iter=5, epsilon_linf=6)
    texts = []
    for run in ("a", "b"):
        out = tmp_path / run
        run_campaign(CampaignSpec(task="caption", attack=cfg, n_images=3, out_dir=str(out)), tiny_bundle)
        texts.append((out / "report.json").read_bytes())
        assert (out / "timing.json").exists()
        assert sorted(p.name for p in out.glob("adv_*.ppm")) == ["adv_0000.ppm", "adv_0001.ppm", "adv_0002.ppm"]
    assert texts[0] == texts[1]
    doc = json.loads(texts[0])
    assert doc["schema_version"] == SCHEMA_VERSION
    assert "wall_time" not in texts[0].decode()
    assert list(doc) == sorted(doc)


def test_parallel_workers_match_serial(tiny_bundle):
    cfg = AttackConfig("maf", "trunc", max_iter=3)
    a = run_campaign(CampaignSpec(attack=cfg, n_images=3), tiny_bundle)
    b = run_campaign(CampaignSpec(attack=cfg, n_images=3, n_jobs=2), tiny_bundle)
    assert a.dumps() == b.dumps()


def test_eps_sweep_runs_one_campaign_per_epsilon(tiny_bundle, tmp_path):
    attack = CountingAttack(inner=run_attack)
    spec = CampaignSpec(attack=AttackConfig("oimo", "tanh", max_iter=3), n_images=2,
                        eps_sweep=(1, 4), out_dir=str(tmp_path))
    report = run_campaign(spec, tiny_bundle, attack_fn=attack)
    assert attack.calls == 4
    assert [r.spec["attack"]["epsilon_linf"] for r in report.sweep] == [1.0, 4.0]
    doc = json.loads((tmp_path / "report.json").read_text())
    assert [s["epsilon_linf"] for s in doc["sweep"]] == [1.0, 4.0]
    assert (tmp_path / "eps_4" / "adv_0001.ppm").exists()


def test_caption_failures_carry_bleu(tiny_bundle):
    def noise(extractor, target, start, config):
        rng = np.random.default_rng(int(target.sum()))
        return AttackResult(rng.integers(0, 256, size=target.shape).astype(np.uint8), [], 0.0, 0, 0)

    report = run_campaign(CampaignSpec(task="caption", n_images=6), tiny_bundle, attack_fn=noise)
    for rec in report.records:
        cap = rec["heads"]["caption"]
        assert ("bleu" in cap) == (not cap["match"])
        if "bleu" in cap:
            assert all(0.0 <= v <= 1.0 for v in cap["bleu"])


def test_spec_validation_and_missing_models(tmp_path):
    with pytest.raises(ValueError):
        CampaignSpec(task="segment")
    with pytest.raises(ValueError):
        CampaignSpec(n_images=0)
    with pytest.raises(ValueError, match="oimo"):
        CampaignSpec(eps_sweep=(2,))
    with pytest.raises(FileNotFoundError):
        run_campaign(CampaignSpec(models_dir=str(tmp_path / "none")))
