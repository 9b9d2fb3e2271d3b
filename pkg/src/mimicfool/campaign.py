"""Attack campaigns: one attack per target image, every head evaluated on the result.

A campaign renders ``n_images`` targets from the synthetic generator, runs one
attack per target, then asks each available head whether the adversarial image
yields the same output as the original. The ``task`` picks which head decides
success. For ``vqa`` a question is dropped from the denominator when the head
already answers it the same way on the starting image as on the original.

``report.json`` holds everything except wall-clock numbers, which go to
``timing.json``; two runs of the same spec produce byte-identical reports.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .attack import AttackConfig, AttackResult, run_attack, starting_image
from .data import render_sample, synth_dataset
from .heads import answer, classify, decode, outputs_match
from .metrics import bleu, evaluate_pair
from .models import ModelBundle
from .ppm import read_ppm, write_ppm

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
TASKS = ("classify", "caption", "vqa")
# Sample index reserved for the default OIMO start image; targets use 0..n-1.
START_INDEX = 2 ** 31 - 1


@dataclass(frozen=True)
class CampaignSpec:
    task: str = "classify"
    attack: AttackConfig = field(default_factory=AttackConfig)
    n_images: int = 100
    seed: int = 0
    eps_sweep: tuple[float, ...] | None = None
    out_dir: str | None = None
    models_dir: str | None = None
    start_image_path: str | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if int(self.n_images) != self.n_images or self.n_images < 1:
            raise ValueError(f"n_images must be a positive integer, got {self.n_images}")
        if self.n_jobs == 0:
            raise ValueError("n_jobs must be non-zero")
        if self.eps_sweep is not None:
            sweep = tuple(float(e) for e in self.eps_sweep)
            if not sweep:
                raise ValueError("eps_sweep must list at least one value")
            if self.attack.variant != "oimo":
                raise ValueError("eps_sweep needs the oimo variant")
            if any(not e >= 0 for e in sweep):
                raise ValueError(f"eps_sweep values must be >= 0, got {sweep}")
            object.__setattr__(self, "eps_sweep", sweep)

    def to_dict(self) -> dict:
        # paths and worker count do not influence results, so they stay out of the report
        return {
            "task": self.task,
            "attack": self.attack.to_dict(),
            "n_images": self.n_images,
            "seed": self.seed,
            "eps_sweep": list(self.eps_sweep) if self.eps_sweep is not None else None,
            "start_image": "custom" if self.start_image_path else "synthetic",
        }


@dataclass
class ReportRecord:
    """Per-image records plus campaign aggregates; ``sweep`` holds one child per epsilon."""

    spec: dict
    records: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    attack_invocations: int = 0
    wall_time_s: float = 0.0
    record_times_ms: list[int | None] = field(default_factory=list)
    sweep: list["ReportRecord"] | None = None

    @property
    def success_rate(self) -> float | None:
        if self.sweep is not None:
            return None
        return self.aggregate["success_rate"]

    def to_json(self) -> dict:
        doc = {"schema_version": SCHEMA_VERSION, "spec": self.spec}
        if self.sweep is not None:
            doc["sweep"] = [
                {"epsilon_linf": r.spec["attack"]["epsilon_linf"], "aggregate": r.aggregate,
                 "attack_invocations": r.attack_invocations, "records": r.records}
                for r in self.sweep]
            doc["attack_invocations"] = sum(r.attack_invocations for r in self.sweep)
        else:
            doc.update(aggregate=self.aggregate, attack_invocations=self.attack_invocations,
                       records=self.records)
        return _jsonable(doc)

    def timing_json(self) -> dict:
        doc = {"schema_version": SCHEMA_VERSION, "wall_time_s": self.wall_time_s}
        if self.sweep is not None:
            doc["sweep"] = [r.timing_json() for r in self.sweep]
        else:
            doc["record_wall_time_ms"] = self.record_times_ms
        return doc

    def dumps(self) -> str:
        return dumps_report(self.to_json())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def default_start_image(seed: int, size: int) -> np.ndarray:
    """The OIMO start image used when none is supplied: a synthetic sample outside the target range."""
    return render_sample(seed, START_INDEX, size=size).image


def _safe_attack(attack_fn, extractor, target, start, config):
    try:
        return attack_fn(extractor, target, start, config), None
    except Exception as exc:  # recorded per image; the campaign goes on
        return None, f"{type(exc).__name__}: {exc}"


def _head_outputs(bundle: ModelBundle, features: np.ndarray) -> dict:
    """Every available head's output for each feature row."""
    out = {"classify": [classify(bundle.classifier, f) for f in features]}
    if bundle.decoder is not None:
        out["caption"] = [decode(bundle.decoder, f) for f in features]
    if bundle.qa is not None:
        out["vqa"] = [[answer(bundle.qa, f, q) for q in range(bundle.qa.n_questions)] for f in features]
    return out


def _mean_std(values: Sequence[float]) -> dict:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return {"mean": None, "std": None, "n": 0, "n_infinite": len(values)}
    a = np.asarray(vals)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": len(vals),
            "n_infinite": len(values) - len(vals)}


def _rate(successes: int, evaluated: int) -> float | None:
    return successes / evaluated if evaluated else None


def _run_single(spec: CampaignSpec, bundle: ModelBundle, attack_fn: Callable,
                targets: list, start: np.ndarray | None, out_dir: Path | None) -> ReportRecord:
    t0 = time.perf_counter()
    ex = bundle.extractor
    config = spec.attack
    task_head = spec.task

    images = np.stack([s.image for s in targets])
    start_bytes = starting_image(ex, config, start)
    f_org = ex.transform(images)
    f_start = ex.transform(start_bytes[None])
    org_out = _head_outputs(bundle, f_org)
    if task_head not in org_out:
        raise ValueError(f"task {spec.task!r} needs a {task_head} head, which this model bundle lacks")
    start_out = {k: v[0] for k, v in _head_outputs(bundle, f_start).items()}

    jobs = [(s.image, start, config) for s in targets]
    if spec.n_jobs == 1:
        results = [_safe_attack(attack_fn, ex, *job) for job in jobs]
    else:
        results = Parallel(n_jobs=spec.n_jobs)(delayed(_safe_attack)(attack_fn, ex, *job) for job in jobs)
    invocations = len(results)

    ok = [i for i, (res, _) in enumerate(results) if res is not None]
    adv_images = {i: results[i][0].adversarial_image for i in ok}
    f_adv = dict(zip(ok, ex.transform(np.stack([adv_images[i] for i in ok])))) if ok else {}
    adv_out = {}
    if ok:
        per_head = _head_outputs(bundle, np.stack([f_adv[i] for i in ok]))
        adv_out = {i: {k: v[n] for k, v in per_head.items()} for n, i in enumerate(ok)}

    records, times = [], []
    for i, sample in enumerate(targets):
        res, err = results[i]
        rec = {"index": i, "true_label": sample.label, "error": err}
        times.append(res.wall_time_ms if res is not None else None)
        if res is None:
            log.warning("attack on image %d failed: %s", i, err)
            records.append(rec)
            continue
        adv = adv_images[i]
        org = {k: v[i] for k, v in org_out.items()}
        heads = {}
        for name in ("classify", "caption"):
            if name not in org:
                continue
            o, a = org[name], adv_out[i][name]
            entry = {"original": o.to_json(), "adversarial": a.to_json(), "match": outputs_match(o, a)}
            if name == "caption" and not entry["match"]:
                entry["bleu"] = bleu(a.value, o.value)
            heads[name] = entry
        if "vqa" in org:
            pairs = []
            for q, (o, a, st) in enumerate(zip(org["vqa"], adv_out[i]["vqa"], start_out["vqa"])):
                filtered = outputs_match(o, st)
                pairs.append({"question": q, "original": o.to_json(), "adversarial": a.to_json(),
                              "start": st.to_json(), "filtered": filtered,
                              "match": None if filtered else outputs_match(o, a)})
            heads["vqa"] = pairs
        rec["heads"] = heads
        tokens = (adv_out[i]["caption"].value, org["caption"].value) if "caption" in org else (None, None)
        rec["metrics"] = evaluate_pair(adv, start_bytes, sample.image, f_adv[i], f_org[i],
                                       *tokens).to_json()
        rec["attack"] = res.summary()
        if task_head == "vqa":
            evaluated = [p["match"] for p in heads["vqa"] if not p["filtered"]]
            rec["success"] = None if not evaluated else all(evaluated)
        else:
            rec["success"] = heads[task_head]["match"]
        records.append(rec)
        if out_dir is not None:
            write_ppm(adv, out_dir / f"adv_{i:04d}.ppm")

    report = ReportRecord(spec=spec.to_dict(), records=records, attack_invocations=invocations,
                          record_times_ms=times)
    report.aggregate = _aggregate(spec.task, records)
    report.wall_time_s = time.perf_counter() - t0
    return report


def _aggregate(task: str, records: list[dict]) -> dict:
    done = [r for r in records if r["error"] is None]
    agg = {"task": task, "n_images": len(records), "errors": len(records) - len(done)}

    heads = {}
    for name in ("classify", "caption"):
        if done and name in done[0]["heads"]:
            matches = [r["heads"][name]["match"] for r in done]
            heads[name] = {"evaluated": len(matches), "successes": int(sum(matches)),
                           "success_rate": _rate(sum(matches), len(matches))}
    if done and "vqa" in done[0]["heads"]:
        pairs = [p for r in done for p in r["heads"]["vqa"]]
        kept = [p for p in pairs if not p["filtered"]]
        wins = sum(p["match"] for p in kept)
        heads["vqa"] = {"total_pairs": len(pairs), "filtered": len(pairs) - len(kept),
                        "evaluated": len(kept), "successes": int(wins),
                        "success_rate": _rate(wins, len(kept)),
                        "no_evaluable_pairs": not kept}
    agg["heads"] = heads

    primary = heads.get(task, {"evaluated": 0, "successes": 0, "success_rate": None})
    agg["evaluated"] = primary["evaluated"]
    agg["successes"] = primary["successes"]
    agg["success_rate"] = primary["success_rate"]
    agg["no_evaluable_pairs"] = primary["evaluated"] == 0
    if task == "vqa":
        agg["total_pairs"] = primary.get("total_pairs", 0)
        agg["filtered"] = primary.get("filtered", 0)

    agg["psnr_db"] = _mean_std([_float(r["metrics"]["psnr_db"]) for r in done])
    agg["ssim"] = _mean_std([r["metrics"]["ssim"] for r in done])
    agg["abs_ssim_mean"] = float(np.mean([abs(r["metrics"]["ssim"]) for r in done])) if done else None
    mse = [r["metrics"]["feature_mse"] for r in done]
    agg["feature_mse"] = {"median": float(np.median(mse)) if mse else None,
                          "mean": float(np.mean(mse)) if mse else None}

    failures = [r["heads"]["caption"]["bleu"] for r in done
                if "caption" in r["heads"] and not r["heads"]["caption"]["match"]]
    agg["caption_failure_bleu"] = {
        "count": len(failures),
        "mean": [float(np.mean(col)) for col in zip(*failures)] if failures else None,
    }
    return agg


def _float(v) -> float:
    return math.inf if v == "inf" else float(v)


def run_campaign(spec: CampaignSpec, bundle: ModelBundle | None = None,
                 attack_fn: Callable[..., AttackResult] = run_attack) -> ReportRecord:
    """Run a campaign and, when ``spec.out_dir`` is set, write report, timings and images there.

    ``attack_fn(extractor, target, start, config)`` is called exactly once per target image.
    """
    if bundle is None:
        if spec.models_dir is None:
            raise ValueError("run_campaign needs a model bundle or spec.models_dir")
        bundle = ModelBundle.load(spec.models_dir)
    size = bundle.image_size
    targets = synth_dataset(spec.n_images, seed=spec.seed, size=size)
    start = None
    if spec.attack.variant == "oimo":
        start = read_ppm(spec.start_image_path) if spec.start_image_path else default_start_image(spec.seed, size)
        if start.shape != tuple(bundle.extractor.input_shape):
            raise ValueError(f"start image shape {start.shape} does not match extractor input "
                             f"{tuple(bundle.extractor.input_shape)}")
    out = Path(spec.out_dir) if spec.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if start is not None:
            write_ppm(start, out / "start.ppm")

    if spec.eps_sweep is None:
        report = _run_single(spec, bundle, attack_fn, targets, start, out)
    else:
        t0 = time.perf_counter()
        children = []
        for eps in spec.eps_sweep:
            sub = replace(spec, attack=replace(spec.attack, epsilon_linf=eps), eps_sweep=None)
            sub_dir = None
            if out is not None:
                sub_dir = out / f"eps_{eps:g}"
                sub_dir.mkdir(exist_ok=True)
            children.append(_run_single(sub, bundle, attack_fn, targets, start, sub_dir))
            log.info("eps %g: success rate %s", eps, children[-1].aggregate["success_rate"])
        report = ReportRecord(spec=spec.to_dict(), sweep=children)
        report.wall_time_s = time.perf_counter() - t0

    if out is not None:
        write_report(report, out)
    return report


def write_report(report: ReportRecord, directory: str | os.PathLike) -> None:
    d = Path(directory)
    with open(d / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.dumps())
    with open(d / "timing.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(report.timing_json(), indent=2, sort_keys=True) + "\n")
