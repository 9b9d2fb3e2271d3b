"""Command-line entry point: ``mimicfool <command> [options]``.

Exit status is 0 on success, 1 for invalid input (bad flags, bad config,
unreadable files) and 2 when a run fails part way.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from .attack import run_attack, starting_image
from .campaign import run_campaign
from .data import synth_dataset
from .extractors import InvertibleExtractor, bytes_to_input
from .heads import classify
from .metrics import feature_mse, psnr, ssim
from .models import ARCHITECTURES, ModelBundle, train_bundle
from .ppm import read_ppm, write_ppm
from .tensor import Tensor

log = logging.getLogger("mimicfool")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--config", default=None, help="key = value config file; flags override it")


def _attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=("maf", "oimo"), default=None)
    p.add_argument("--parameterization", choices=("trunc", "tanh"), default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epsilon", dest="epsilon_linf", type=float, default=None,
                   help="l-infinity budget in byte units (oimo only)")
    p.add_argument("--models", dest="models_dir", default=None, help="model bundle directory")
    p.add_argument("--start", dest="start_image_path", default=None, help="oimo start image (PPM)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mimicfool", description="Feature-mimicry adversarial attacks on toy vision models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render synthetic samples to PPM files")
    _common(p, "output directory")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("train", help="train an extractor and its heads")
    _common(p, "model bundle directory")
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="plain")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--heads", default="caption,vqa", help="comma list of extra heads (caption, vqa)")

    p = sub.add_parser("attack", help="attack a single target image")
    _common(p, "adversarial image path (PPM)")
    _attack_flags(p)
    p.add_argument("--target", required=True, help="target image (PPM)")

    p = sub.add_parser("campaign", help="run an attack campaign and write a report")
    _common(p, "output directory for report.json, timing.json and images")
    _attack_flags(p)
    p.add_argument("--task", choices=("classify", "caption", "vqa"), default=None)
    p.add_argument("--n-images", dest="n_images", type=int, default=None)
    p.add_argument("--eps-sweep", dest="eps_sweep", default=None, help="comma list of epsilons")
    p.add_argument("--n-jobs", dest="n_jobs", type=int, default=None)

    p = sub.add_parser("invert-check", help="reconstruct random images through the invertible extractor")
    _common(p, "unused")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--models", dest="models_dir", default=None,
                   help="use trained invertible weights instead of a fresh initialization")

    p = sub.add_parser("metrics", help="PSNR and SSIM between two PPM images")
    _common(p, "write the metrics JSON here instead of stdout")
    p.add_argument("a")
    p.add_argument("b")
    return parser


def _merged(args: argparse.Namespace, keys) -> dict:
    """Config-file values overridden by any flags given on the command line."""
    values = cfg.load_config(args.config) if args.config else {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _check_iters(values: dict) -> None:
    if "max_iter" in values and values["max_iter"] < 1:
        raise UsageError(f"--max-iter must be >= 1, got {values['max_iter']}")


def _emit(doc: dict, out: str | None = None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    index = []
    for i, s in enumerate(synth_dataset(args.n, seed, size=args.size)):
        name = f"sample_{i:04d}.ppm"
        write_ppm(s.image, out / name)
        index.append({"file": name, "label": s.label, "tokens": list(s.tokens), "attributes": s.attributes})
    _emit({"seed": seed, "samples": index}, str(out / "labels.json"))
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    heads = tuple(h.strip() for h in args.heads.split(",") if h.strip())
    unknown = set(heads) - {"caption", "vqa"}
    if unknown:
        raise UsageError(f"unknown heads: {sorted(unknown)}")
    bundle = train_bundle(args.arch, seed=args.seed or 0, n_train=args.n_train, epochs=args.epochs, heads=heads)
    out = args.out or f"models/{args.arch}"
    bundle.save(out)
    print(f"trained {args.arch}: train accuracy {bundle.meta['train_accuracy']:.3f}; saved to {out}")
    return 0


def cmd_attack(args) -> int:
    values = _merged(args, ("variant", "parameterization", "max_iter", "lr", "lam", "epsilon_linf",
                            "models_dir", "start_image_path"))
    _check_iters(values)
    config = cfg.attack_config_from(values)
    if "models_dir" not in values:
        raise UsageError("attack needs --models")
    bundle = ModelBundle.load(values["models_dir"])
    target = read_ppm(args.target)
    start = read_ppm(values["start_image_path"]) if values.get("start_image_path") else None
    if config.variant == "oimo" and start is None:
        raise UsageError("oimo needs --start")
    result = run_attack(bundle.extractor, target, start, config)
    out = args.out or "adversarial.ppm"
    write_ppm(result.adversarial_image, out)
    ex = bundle.extractor
    f_org, f_adv = ex.transform(np.stack([target, result.adversarial_image]))
    original, adversarial = classify(bundle.classifier, f_org), classify(bundle.classifier, f_adv)
    _emit({
        "config": config.to_dict(),
        "attack": result.summary(),
        "wall_time_ms": result.wall_time_ms,
        "label_original": original.to_json(),
        "label_adversarial": adversarial.to_json(),
        "match": original == adversarial,
        "feature_mse": feature_mse(f_adv, f_org),
        "psnr_vs_start_db": _finite(psnr(result.adversarial_image, starting_image(ex, config, start))),
        "output": out,
    })
    return 0


def _finite(x: float):
    return "inf" if x == float("inf") else x


def cmd_campaign(args) -> int:
    values = _merged(args, ("variant", "parameterization", "max_iter", "lr", "lam", "epsilon_linf",
                            "models_dir", "start_image_path", "task", "n_images", "n_jobs"))
    if args.eps_sweep is not None:
        values["eps_sweep"] = cfg.parse_eps_list(args.eps_sweep)
    if args.out is not None:
        values["out_dir"] = args.out
    values.setdefault("out_dir", "campaign")
    _check_iters(values)
    spec = cfg.campaign_spec_from(values)
    if spec.models_dir is None:
        raise UsageError("campaign needs --models (or models = ... in the config)")
    bundle = ModelBundle.load(spec.models_dir)
    report = run_campaign(spec, bundle)
    if report.sweep is not None:
        rates = {f"{r.spec['attack']['epsilon_linf']:g}": r.aggregate["success_rate"] for r in report.sweep}
        print(json.dumps({"success_rate_by_epsilon": rates}, sort_keys=True))
    else:
        a = report.aggregate
        print(json.dumps({"success_rate": a["success_rate"], "evaluated": a["evaluated"],
                          "psnr_db_mean": a["psnr_db"]["mean"], "ssim_mean": a["ssim"]["mean"]}, sort_keys=True))
    print(f"report written to {Path(spec.out_dir) / 'report.json'}")
    return 0


def cmd_invert_check(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    seed = args.seed or 0
    if args.models_dir:
        ex = ModelBundle.load(args.models_dir).extractor
        if not isinstance(ex, InvertibleExtractor):
            raise UsageError(f"{args.models_dir} does not hold an invertible extractor")
    else:
        ex = InvertibleExtractor(seed=seed).initialize()
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(args.n, *ex.input_shape), dtype=np.uint8)
    worst = 0.0
    for x in bytes_to_input(images, ex.input_range):
        x = Tensor(x)
        back = ex.invert(ex.extract(x))
        worst = max(worst, float(np.max(np.abs(back.data - x.data))))
    print(f"max reconstruction error over {args.n} images: {worst:.3e}")
    return 0 if worst < 1e-6 else 2


def cmd_metrics(args) -> int:
    a, b = read_ppm(args.a), read_ppm(args.b)
    _emit({"psnr_db": _finite(psnr(a, b)), "ssim": ssim(a, b)}, args.out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "campaign": cmd_campaign,
    "invert-check": cmd_invert_check,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"mimicfool {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"mimicfool {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
