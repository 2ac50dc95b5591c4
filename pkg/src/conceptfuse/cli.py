"""Command-line entry points: pretrain, demo-data, tune, fuse, sample, eval."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import formats
from .adapter import tokenize
from .errors import ConceptFuseError, TuningDiverged
from .evaluation import eval_identity
from .fusion import (
    CLOSED_FORM,
    ITERATIVE,
    FusionConfig,
    capture_activations,
    default_capture_prompts,
    gradient_fuse_model,
    weight_fuse,
    weight_fuse_report,
)
from .region import RegionSpec, sample_with_regions
from .toy_diffusion import NoiseSchedule, sample_reverse
from .tuning import TuningConfig, tune_concept


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError(f"no seeds in {text!r}")
    return seeds


def _split_list(text: str) -> list[str]:
    return [p for p in (s.strip() for s in text.split(",")) if p]


def cmd_pretrain(args):
    from .world import pretrain_base

    model = pretrain_base(steps=args.steps, seed=args.seed, log_every=args.log_every)
    formats.save_model(model, args.out)
    print(f"wrote base model {args.out} (fingerprint {model.fingerprint():016x})")


def cmd_demo_data(args):
    from .demo import demo_datasets

    out = Path(args.out)
    for data in demo_datasets():
        target = out / data.concept_name.strip("<>")
        formats.save_dataset(data, target)
        print(f"wrote {target}")


def cmd_tune(args):
    base = formats.load_model(args.base)
    data = formats.load_dataset(args.dataset)
    cfg = TuningConfig(steps=args.steps, rng_seed=args.seed, rank=args.rank)
    adapter = tune_concept(base, data, cfg)
    formats.save_adapter(adapter, args.out)
    print(f"wrote adapter {args.out} for {data.concept_name}")


def cmd_fuse(args):
    base = formats.load_model(args.base)
    adapters = [formats.load_adapter(p, base) for p in _split_list(args.adapters)]
    if args.method == "weight":
        weights = [float(w) for w in _split_list(args.weights)] if args.weights else None
        fused = weight_fuse(base, adapters, weights)
        report = weight_fuse_report(adapters, weights)
    else:
        mode = {"closed": CLOSED_FORM, "iterative": ITERATIVE}[args.mode]
        batches = [
            capture_activations(base, a, default_capture_prompts(a), args.samples,
                                steps=args.capture_steps, rng_seed=args.seed)
            for a in adapters
        ]
        fused, report = gradient_fuse_model(base, adapters, batches, FusionConfig(mode=mode))
    formats.save_model(fused, args.out)
    report_path = Path(str(args.out) + ".report.json")
    formats.atomic_write(report_path, report.to_json() + "\n")
    print(f"wrote fused model {args.out} and {report_path}")


def _parse_region(spec: str) -> RegionSpec:
    if ":" not in spec:
        raise ValueError(f"region must be MASKFILE:PROMPT, got {spec!r}")
    path, prompt = spec.split(":", 1)
    return RegionSpec(formats.load_mask(path), tokenize(prompt))


def cmd_sample(args):
    model = formats.load_model(args.model)
    schedule = NoiseSchedule.for_config(model.config)
    regions = [_parse_region(r) for r in args.region or []]
    if regions:
        z = sample_with_regions(model, tokenize(args.prompt), regions, None, schedule, args.steps, args.seed)
    else:
        from .adapter import build_prompt

        z = sample_reverse(model, build_prompt(args.prompt, model), schedule, args.steps, args.seed)
    formats.save_grid(z, args.out)
    print(f"wrote {args.out}")


def cmd_eval(args):
    base = formats.load_model(args.base)
    fused = formats.load_model(args.fused)
    adapters = [formats.load_adapter(p, base) for p in _split_list(args.adapters)]
    try:
        prompts = json.loads(Path(args.prompts).read_text())
    except json.JSONDecodeError as exc:
        raise formats.ParseError(f"prompts file is not JSON: {exc}", args.prompts) from exc
    report = eval_identity(base, fused, adapters, prompts, _parse_seeds(args.seeds), args.steps)
    formats.atomic_write(args.out, formats.report_to_csv(report))
    print(f"wrote {args.out}: mean change {report.mean_change:+.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a base model on the synthetic shape world")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("demo-data", help="write the two-concept demo datasets")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demo_data)

    p = sub.add_parser("tune", help="tune one concept adapter")
    p.add_argument("--dataset", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank", type=int, default=4)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("fuse", help="fuse adapters into one model")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", required=True, help="comma-separated adapter files")
    p.add_argument("--method", choices=["weight", "gradient"], default="gradient")
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="comma-separated fusion weights (weight method); default 1/n each")
    p.add_argument("--samples", type=int, default=4, help="capture samples per prompt")
    p.add_argument("--capture-steps", type=int, default=10)
    p.add_argument("--mode", choices=["closed", "iterative"], default="closed")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("sample", help="sample a latent grid")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--region", action="append", metavar="MASKFILE:PROMPT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="identity preservation of fused concepts")
    p.add_argument("--base", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--prompts", required=True, help="JSON file mapping concept token to prompts")
    p.add_argument("--seeds", default="1..50")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TuningDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConceptFuseError, OSError, ValueError, KeyError, UnicodeDecodeError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
