"""Command-line entry point: ``labelhunt <stage|run|bench> ...``.

Exit codes: 0 success, 1 a stage failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence

from .errors import ConfigError
from .pipeline import STAGES, PipelineConfig, run

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True,
                   help="pipeline config JSON, or a bundled name: demo, control")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workdir", help="override the config workdir")
    p.add_argument("--force", action="store_true", help="rerun stages even if their inputs are unchanged")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelhunt", description="Log labeling and cluster hunting pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _add_common(sub.add_parser(stage, help=f"run the {stage} stage only"))
    p = sub.add_parser("run", help="run the pipeline")
    _add_common(p)
    p.add_argument("--stages", help="comma-separated subset of stages to run")
    b = sub.add_parser("bench", help="measure labeling + inference + hunting throughput")
    b.add_argument("--duration", type=float, default=15000.0, help="scenario seconds (about 13 rows/s)")
    b.add_argument("--per-kind", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", help="write the result JSON here")
    return parser


def _stage_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    stages = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"--stages: unknown stage(s) {bad}; choose from {', '.join(STAGES)}")
    return stages


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench":
        from .bench import bench_scenario, run_bench, write_result
        result = run_bench(bench_scenario(args.duration, args.per_kind, args.seed), repeats=args.repeats)
        doc = result.to_dict()
        if args.out:
            write_result(result, args.out)
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        cfg = PipelineConfig.load(args.config, workdir=args.workdir)
        if args.seed is not None:
            cfg.seed = args.seed
        stages = [args.command] if args.command != "run" else _stage_list(args.stages)
        report = run(cfg, stages, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for s in report.stages:
        if s.status == "disabled":
            continue
        line = f"{s.name:16s} {s.status:10s} {s.seconds:7.2f}s"
        if s.error:
            line += f"  {s.error}"
        print(line)
    if report.failed_stage:
        print(f"stage {report.failed_stage!r} failed; see {cfg.workdir / 'stage_report.json'}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
