"""``ropwatch`` command line.

Exit status: 0 success, 2 when ``analyze`` raises an alert, 1 on any error
(including usage errors). Machine-readable output always goes to files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import corpus, gadgets, harness, indicators, plotting
from .isa import AssemblyError, DecodeError, assemble
from .traceio import TraceFormatError, read_trace, write_trace
from .vm import BUFFER_WORDS, DEFAULT_STEPS, MachineFault, exploit_run, run

EXIT_OK, EXIT_ERROR, EXIT_ALERT = 0, 1, 2
BUILTIN_IMAGE = "@vulnerable"
_SOURCES = {"code": gadgets.CODE_SEGMENT, "library": gadgets.LIBRARY}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("ROPWATCH_SEED")
    if env is None:
        return 0
    try:
        return int(env, 0)
    except ValueError:
        raise CliError(f"ROPWATCH_SEED must be an integer, got {env!r}") from None


def load_image(ref: str, with_lib: bool = True):
    if ref == BUILTIN_IMAGE:
        return corpus.vulnerable_image()
    source = Path(ref).read_text()
    return corpus.link(source) if with_lib else assemble(source)


def load_inputs(path: str | None) -> list[int]:
    if path is None:
        return []
    tokens = Path(path).read_text().replace(",", " ").split()
    try:
        return [int(t, 0) for t in tokens]
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


def _write_json(path: str, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _analyzer_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gadget-max", type=int, default=indicators.GADGET_MAX)
    p.add_argument("--run-len", type=int, default=indicators.RUN_LEN)


def _ip_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int, default=indicators.IP_WINDOW)
    p.add_argument("--k", type=int, default=indicators.IP_REVISIT_K)
    p.add_argument("--radius", type=int, default=indicators.IP_RADIUS)
    p.add_argument("--stride", type=int, default=None)


# ------------------------------------------------------------- subcommands

def cmd_run(args) -> int:
    image = load_image(args.image, not args.no_lib)
    record = run(image, load_inputs(args.input), max_steps=args.max_steps)
    write_trace(record.events, args.out)
    print(f"{record.exit}: {len(record.events)} events -> {args.out}")
    if record.state.output:
        print("output:", " ".join(str(v) for v in record.state.output))
    return EXIT_OK


def _chain_for(args, image):
    if args.chain:
        return gadgets.RopChain.from_json(json.loads(Path(args.chain).read_text()), image)
    return gadgets.base_chain(image, _SOURCES[args.source], seed=_seed(args.seed))


def cmd_exploit(args) -> int:
    image = load_image(args.image)
    chain = _chain_for(args, image)
    record = exploit_run(image, chain, padding=args.padding, max_steps=args.max_steps)
    write_trace(record.events, args.out)
    print(f"{record.exit}: {len(record.events)} events, {len(chain.slots)} gadgets -> {args.out}")
    return EXIT_OK


def cmd_scan(args) -> int:
    image = load_image(args.image, not args.no_lib)
    found = gadgets.scan_gadgets(image, args.max_len, segment=args.segment)
    rows = [{"addr": f"{g.addr:#x}", "mnemonics": g.mnemonics, "text": str(g),
             "effect_sig": g.effect_sig} for g in found]
    _write_json(args.out, rows)
    print(f"{len(rows)} gadgets -> {args.out}")
    return EXIT_OK


def cmd_chains(args) -> int:
    image = load_image(args.image)
    seed = _seed(args.seed)
    if args.jmp:
        chains = [gadgets.jmp_gadget_chain(image, seed=seed)]
    elif args.source == "both":
        chains = gadgets.generate_attacks(image, args.cap, seed=seed)
    else:
        base = gadgets.base_chain(image, _SOURCES[args.source], seed=seed)
        pools = gadgets.source_pools(image, base)
        print(f"{gadgets.count_variants(base, pools, seed=seed)} variants available")
        chains = gadgets.enumerate_variants(base, pools, cap=args.cap, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, chain in enumerate(chains):
        _write_json(str(out / f"chain-{i:04d}.json"), chain.to_json())
    print(f"{len(chains)} chains -> {out}/")
    return EXIT_OK


def cmd_analyze(args) -> int:
    events = read_trace(args.trace)
    if args.indicator == "ip":
        series = indicators.ip_features(events, args.window, args.k, args.radius, args.stride)
        if len(series) == 1:
            Path(args.out).write_text(next(iter(series.values())).to_csv())
        else:
            lines = ["tid,window_start_seq,revisit_score,scatter_score"]
            for tid, s in series.items():
                lines += [f"{tid},{row}" for row in s.to_csv().splitlines()[1:]]
            Path(args.out).write_text("\n".join(lines) + "\n")
        windows = sum(len(s.records) for s in series.values())
        print(f"{windows} windows -> {args.out}")
        return EXIT_OK
    analyzer = indicators.make_analyzer(args.indicator, args.gadget_max, args.run_len)
    verdicts = analyzer.feed_all(events).verdicts()
    _write_json(args.out, [v.to_json() for v in verdicts.values()])
    alerts = [v for v in verdicts.values() if v.alert]
    for v in verdicts.values():
        state = f"ALERT at seq {v.trigger_seq}" if v.alert else "clean"
        print(f"tid {v.tid}: {args.indicator} {state} {v.evidence}")
    return EXIT_ALERT if alerts else EXIT_OK


def cmd_eval(args) -> int:
    if args.indicator == "ip":
        raise CliError("the ip indicator has no alert rule; use analyze or plot")
    thresholds = {"gadget_max": args.gadget_max, "run_len": args.run_len}
    if args.plan:
        plan = harness.ExperimentPlan.from_json(json.loads(Path(args.plan).read_text()))
        plan = plan.with_indicator(args.indicator, **thresholds)
    else:
        counts = harness.FULL_COUNTS if args.full_counts else (args.legit, args.attacks)
        plan = harness.build_corpus(_seed(args.seed), counts, args.indicator,
                                    cap=max(args.cap, counts[1]), padding=args.padding, **thresholds)
    if args.save_plan:
        _write_json(args.save_plan, plan.to_json())
    report = harness.run_experiment(plan, n_jobs=args.jobs)
    Path(args.out).write_text(report.dumps(timing=args.timing))
    print(report.render(tables=args.paper_shape), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    events = read_trace(args.trace)
    params = {}
    if args.kind == "ipfeat":
        params = {"window": args.window, "k": args.k, "radius": args.radius, "stride": args.stride}
    series = plotting.make_series(args.kind, events, args.tid, label=Path(args.trace).stem, **params)
    prefix = Path(args.out)
    prefix.with_suffix(".csv").write_text(series.to_csv())
    prefix.with_suffix(".svg").write_text(plotting.to_svg(series))
    print(f"{len(series.points)} points -> {prefix.with_suffix('.csv')}, {prefix.with_suffix('.svg')}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ropwatch", description="Toy-ISA ROP detection lab.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("run", help="execute a program and write its trace")
    s.add_argument("--image", default=BUILTIN_IMAGE, help="assembly file or @vulnerable")
    s.add_argument("--input", help="file of input words (decimal or 0x hex)")
    s.add_argument("--no-lib", action="store_true", help="do not link the toy library")
    s.add_argument("--max-steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--out", required=True, help="JSONL trace path")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("exploit", help="overflow the vulnerable program with a chain")
    s.add_argument("--image", default=BUILTIN_IMAGE)
    s.add_argument("--chain", help="chain JSON; default is the base chain of --source")
    s.add_argument("--source", choices=("code", "library"), default="library")
    s.add_argument("--padding", type=int, default=BUFFER_WORDS)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_exploit)

    s = sub.add_parser("scan", help="list gadgets as JSON")
    s.add_argument("--image", default=BUILTIN_IMAGE)
    s.add_argument("--no-lib", action="store_true")
    s.add_argument("--segment", help="restrict to a segment (code, lib)")
    s.add_argument("--max-len", type=int, default=gadgets.MAX_GADGET_LEN)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("chains", help="write base and variant chains")
    s.add_argument("--image", default=BUILTIN_IMAGE)
    s.add_argument("--source", choices=("code", "library", "both"), default="both")
    s.add_argument("--cap", type=int, default=gadgets.DEFAULT_CAP)
    s.add_argument("--jmp", action="store_true", help="build the JMP-linked chain instead")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_chains)

    s = sub.add_parser("analyze", help="run an indicator over a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--indicator", choices=("parity", "gap", "ip"), default="parity")
    _analyzer_args(s)
    _ip_args(s)
    s.add_argument("--out", required=True, help="verdict JSON (CSV for ip)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("eval", help="run the labelled experiment")
    s.add_argument("--indicator", choices=("parity", "gap", "ip"), default="parity")
    _analyzer_args(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--legit", type=int, default=harness.DEFAULT_COUNTS[0])
    s.add_argument("--attacks", type=int, default=harness.DEFAULT_COUNTS[1])
    s.add_argument("--full-counts", action="store_true", help="270 legitimate, 730 attacks")
    s.add_argument("--cap", type=int, default=gadgets.DEFAULT_CAP)
    s.add_argument("--padding", type=int, default=BUFFER_WORDS)
    s.add_argument("--plan", help="load a saved plan instead of building one")
    s.add_argument("--save-plan")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--timing", action="store_true", help="include per-run wall clock")
    s.add_argument("--paper-shape", action="store_true")
    s.add_argument("--out", required=True, help="report JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="plot series CSV and SVG from a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--kind", choices=plotting.KINDS, default="retcall")
    s.add_argument("--tid", type=int)
    _ip_args(s)
    s.add_argument("--out", required=True, help="output prefix (.csv and .svg)")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, KeyError, AssemblyError, DecodeError,
            TraceFormatError, MachineFault, gadgets.ChainBuildError) as exc:
        print(f"ropwatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
