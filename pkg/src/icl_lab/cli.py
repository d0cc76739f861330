"""Command-line entry point: icl-lab <subcommand> [options].

Subcommands mirror the experiment kinds: train, sweep, lowrank, transfer,
theory, gradcheck. Each takes either --config (JSON) or --preset, writes
CSVs plus a manifest.json and rendered figures into the output directory,
and exits 0 only if every configured check passed and all files were
written.
"""

import argparse
import sys

from .config import EXPERIMENTS, PRESETS, build_config, load_config
from .errors import IclLabError, ParseError, ValidationError
from .experiments import run_experiment


def _parse_list(text, cast):
    return [cast(part) for part in text.split(",") if part != ""]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="icl-lab",
        description="softmax-attention in-context learning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="path to a JSON config file")
        p.add_argument("--preset", choices=sorted(PRESETS),
                       help="named preset supplying defaults")
        p.add_argument("--seed", type=int, help="override the config's first seed")
        p.add_argument("--trials", type=int,
                       help="replicate over this many consecutive derived seeds")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel seed workers (1 = bit-reproducible reference mode)")
        p.add_argument("--out", help="output directory (else config, else $ICL_LAB_OUT)")
        p.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering, write CSVs only")
        p.add_argument("--L", help="comma list overriding L_values, e.g. 0.5,2")
        p.add_argument("--sigma", help="comma list overriding sigma_values")
        p.add_argument("--n", help="comma list overriding n_values")
        p.add_argument("--iterations", type=int, help="override training iterations")
    return parser


def config_from_args(args):
    if args.config:
        cfg = load_config(args.config)
        overrides = {}
    else:
        preset = args.preset or args.command
        if preset not in PRESETS:
            raise ValidationError("preset", f"subcommand {args.command!r} needs --config or --preset")
        cfg = build_config({"preset": preset})
        overrides = {}
    data = cfg.to_dict()
    if args.preset and args.config:
        raise ValidationError("preset", "give either --config or --preset, not both")
    data["experiment"] = args.command
    if args.L:
        data["L_values"] = _parse_list(args.L, float)
    if args.sigma:
        data["sigma_values"] = _parse_list(args.sigma, float)
    if args.n:
        data["n_values"] = _parse_list(args.n, int)
    if args.iterations is not None:
        data["iterations"] = args.iterations
    if args.seed is not None:
        seeds = list(data["seeds"])
        seeds[0] = args.seed
        data["seeds"] = seeds
    if args.trials is not None:
        base = data["seeds"][0]
        data["seeds"] = [base + i for i in range(args.trials)]
    return build_config(data)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        code, result = run_experiment(cfg, out_dir=args.out, jobs=max(1, args.jobs),
                                      render_figures=not args.no_figures)
    except (ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IclLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if "error" in result:
        print(f"run aborted: {result['error']}", file=sys.stderr)
    status = "ok" if code == 0 else "CHECKS FAILED"
    print(f"{args.command}: {status}")
    return code


if __name__ == "__main__":
    sys.exit(main())
