"""Command-line entry point: ``bookmark-memory <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .gateway import ConfigError, configure, load_kv, verify_cache, ResponseCache
from .harness import (
    ABLATIONS,
    METHODS,
    ResumeError,
    RunConfig,
    build_report,
    check_invariants,
    read_traces,
    replay,
    report_csv,
    report_json,
    write_run_outputs,
)
from .haystack import NEEDLE_KINDS, HaystackSpec, run_haystack
from .storyline import StorylineError, load_storyline, splittable_characters


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bookmark-memory",
        description="Bookmark memory for role-playing action prediction: replay, evaluate, inspect.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    v = sub.add_parser("validate", help="check a storyline JSON Lines file")
    v.add_argument("storyline", help="path to a .jsonl storyline")

    r = sub.add_parser("run", help="replay a benchmark split under one method")
    r.add_argument("--config", required=True, help="flat key = value config (oracle + run keys)")
    r.add_argument("--method", choices=METHODS, help="override run.method")
    r.add_argument(
        "--ablation",
        help=f"comma-separated ablation flags for method=bookmarks ({', '.join(ABLATIONS)}); overrides run.ablation",
    )
    r.add_argument("--characters", help="comma-separated target characters; overrides run.characters")
    r.add_argument("--out", required=True, help="output directory (traces, state, reports); re-running resumes")

    h = sub.add_parser("haystack", help="run synthetic haystack instances")
    h.add_argument("--spec", required=True, help="JSON haystack spec (single instance or suite)")
    h.add_argument("--method", choices=METHODS, default="bookmarks")
    h.add_argument("--out", help="write per-instance results as JSON Lines here")

    rep = sub.add_parser("report", help="rebuild a report from trace files")
    rep.add_argument("--traces", required=True, help="a traces.jsonl file or a directory containing them")
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    rep.add_argument("--out", help="write to this file instead of stdout")

    cs = sub.add_parser("cache-stats", help="summarize an oracle response cache")
    cs.add_argument("--cache", required=True, help="cache JSON Lines file")

    cv = sub.add_parser("cache-verify", help="verify per-record checksums in an oracle cache")
    cv.add_argument("--cache", required=True, help="cache JSON Lines file")
    return p


def _cmd_validate(args) -> int:
    story = load_storyline(args.storyline)
    chars = splittable_characters(story)
    print(f"ok: {len(story)} actions, {len(story.characters)} characters, "
          f"{len(chars)} splittable ({', '.join(chars)})")
    return 0


def _cmd_run(args) -> int:
    kv = load_kv(args.config)
    base = Path(args.config).resolve().parent
    cfg = RunConfig.from_kv(kv, base_dir=base)
    overrides = {}
    if args.method:
        overrides["method"] = args.method
        if args.method != "bookmarks" and args.ablation is None:
            overrides["ablation"] = ()
    if args.ablation is not None:
        overrides["ablation"] = tuple(a.strip() for a in args.ablation.split(",") if a.strip())
    if args.characters is not None:
        overrides["characters"] = tuple(c.strip() for c in args.characters.split(",") if c.strip())
    if overrides:
        cfg = replace(cfg, **overrides)
    gateway = configure(kv, base_dir=base)
    traces, report = replay(cfg, gateway, args.out)
    write_run_outputs(args.out, cfg, report)
    failures = check_invariants(traces, report)
    sys.stdout.write(report_csv(report))
    for f in failures:
        print(f"invariant failed: {f}", file=sys.stderr)
    return 1 if failures else 0


def _load_haystack_specs(path: str) -> list[HaystackSpec]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if "suite" not in raw:
        return [HaystackSpec(**raw)]
    suite = raw["suite"]
    specs = []
    for kind in suite.get("kinds", list(NEEDLE_KINDS)):
        for depth in suite.get("depths", [100, 500, 900]):
            for seed in suite.get("seeds", list(range(10))):
                specs.append(HaystackSpec(
                    filler_count=suite.get("filler_count", 1000),
                    kind=kind,
                    needle_depth=depth,
                    distractor_count=suite.get("distractor_count", 3),
                    seed=seed,
                    control=suite.get("control", False),
                ))
    return specs


def _cmd_haystack(args) -> int:
    specs = _load_haystack_specs(args.spec)
    results = [run_haystack(s, args.method) for s in specs]
    if args.out:
        Path(args.out).write_text(
            "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in results), encoding="utf-8"
        )
    by_kind: dict[str, list[bool]] = {}
    for r in results:
        by_kind.setdefault(r.spec.kind + (" (control)" if r.spec.control else ""), []).append(r.success)
    for kind, oks in by_kind.items():
        print(f"{kind}: {sum(oks)}/{len(oks)} recovered")
    return 0


def _collect_traces(path: str) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        out = []
        for f in sorted(p.rglob("traces.jsonl")):
            out.extend(read_traces(f))
        return out
    return read_traces(p)


def _cmd_report(args) -> int:
    traces = _collect_traces(args.traces)
    report = build_report(traces)
    text = report_csv(report) if args.format == "csv" else report_json(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 1 if check_invariants(traces, report) else 0


def _cmd_cache_stats(args) -> int:
    cache = ResponseCache(args.cache)
    stats = verify_cache(args.cache)
    print(json.dumps({"entries": len(cache), **stats}, indent=2))
    return 0


def _cmd_cache_verify(args) -> int:
    stats = verify_cache(args.cache)
    print(f"valid={stats['valid']} corrupt={stats['corrupt']} duplicates={stats['duplicates']}")
    return 1 if stats["corrupt"] else 0


_COMMANDS = {
    "validate": _cmd_validate,
    "run": _cmd_run,
    "haystack": _cmd_haystack,
    "report": _cmd_report,
    "cache-stats": _cmd_cache_stats,
    "cache-verify": _cmd_cache_verify,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (StorylineError, ConfigError, ResumeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
