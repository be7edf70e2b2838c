"""Command line entry point: ``rmlab {compile,env,run,verify,scale}``."""
from __future__ import annotations

import argparse
import sys

from .core import RMError
from .envs import feature_catalog, load_map, render
from .harness import ConfigError, load_config, run_batch, scaling_report, verify_policy
from .translate import compile_rm, export_dot, format_rm, parse_bindings, parse_rm


def _span(text):
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",")]


def cmd_compile(args):
    with open(args.input, encoding="utf-8") as fh:
        num_rm = parse_rm(fh.read())
    with open(args.bindings, encoding="utf-8") as fh:
        bindings = parse_bindings(fh.read())
    rm = compile_rm(num_rm, bindings, args.to)
    text = format_rm(rm)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as fh:
            fh.write(export_dot(rm))
    return 0


def cmd_env_show(args):
    m = load_map(args.map)
    if args.offices:
        m = m.with_offices(args.offices)
    cat = feature_catalog(m)
    print(render(m))
    print(f"kind: {m.kind}  size: {m.height}x{m.width}  agent: {m.agent_start}")
    print("features:", " ".join(cat.features))
    for w in cat.numerics:
        print(f"numeric: {w.name} in {w.lower}..{w.upper}  bound to {' '.join(cat.bindings[w.name])}")
    return 0


def cmd_run(args):
    config = load_config(args.config)
    if args.output:
        config.output = args.output
    batch = run_batch(config)
    for res in batch.runs:
        last = res.rows[-1] if res.rows else None
        avg = f"{last.avg_reward_per_step:.5f}" if last else "n/a"
        print(f"seed {res.seed}: steps={res.learner.steps} episodes={res.learner.episodes} "
              f"avg_reward_per_step={avg} K*={res.optimal_length}")
    for seed, err in batch.errors.items():
        print(f"seed {seed}: error {err}")
    print(f"wrote {batch.output}/aggregate.csv")
    return 1 if batch.errors else 0


def cmd_verify(args):
    verdict = verify_policy(args.checkpoint)
    print(f"{verdict} (greedy length {verdict.length}, optimal {verdict.optimal_length})")
    return 0 if verdict.status == "optimal" else 1


def cmd_scale(args):
    report = scaling_report(args.domain, _span(args.sizes), args.algos.split(","), args.steps,
                            args.seed, timeout=args.timeout)
    print(report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmlab", description="Reward machine translation and learning.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="unroll a numeric reward machine")
    c.add_argument("--in", dest="input", required=True, help="numeric machine text file")
    c.add_argument("--to", choices=("boolean", "agenda", "coupled"), required=True)
    c.add_argument("--bindings", required=True, help="file with lines 'var: feat1 feat2 ...'")
    c.add_argument("--dot", help="also write a Graphviz rendering here")
    c.add_argument("--out", help="write the machine here instead of stdout")
    c.set_defaults(func=cmd_compile)

    e = sub.add_parser("env", help="inspect environments")
    esub = e.add_subparsers(dest="env_command", required=True)
    show = esub.add_parser("show", help="render a map and list its features")
    show.add_argument("--map", required=True, help="map file or shipped map name")
    show.add_argument("--offices", type=int, help="restrict an office map to its first N offices")
    show.set_defaults(func=cmd_env_show)

    r = sub.add_parser("run", help="train every seed of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--output", help="override the config's output directory")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="check a checkpoint's greedy policy against the oracle")
    v.add_argument("--checkpoint", required=True)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("scale", help="update-count and runtime scaling table")
    s.add_argument("--domain", choices=("delivery", "office"), default="delivery")
    s.add_argument("--sizes", default="2..5", help="'2..5' or '2,3,4'")
    s.add_argument("--algos", default="corm,crm,qrm", help="comma list, e.g. corm,crm:agenda,qrm")
    s.add_argument("--steps", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timeout", type=float, default=600.0, help="seconds per cell")
    s.set_defaults(func=cmd_scale)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RMError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
