"""Command-line front end: gen-data, run, resume, report.

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numeric
aborts. Setting SLLAB_JUDGE_URL points runs at a remote judge endpoint;
without it the deterministic mock judge is used.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .datagen import write_corpora
from .errors import (CheckpointError, ConfigError, DataError, ScheduleError,
                     TrainingDiverged)
from .experiment import (MetricsRow, parse_config_file, read_log, resume_run,
                         run_stream)
from .metrics import HttpJudge

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _judge_from_env():
    url = os.environ.get("SLLAB_JUDGE_URL")
    return HttpJudge(url) if url else None


def _cmd_gen_data(args) -> int:
    paths = write_corpora(args.out, args.domains, args.records, args.seed)
    for p in paths:
        print(p)
    return 0


def _cmd_run(args) -> int:
    cfg = parse_config_file(args.config)
    if args.replay_fraction is not None:
        cfg = replace(cfg, stream=replace(cfg.stream,
                                          replay_fraction=args.replay_fraction))
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    log = run_stream(cfg, judge=_judge_from_env())
    print(f"wrote {len(log.rows)} log rows to {cfg.output_dir} "
          f"in {log.wall_seconds:.1f}s")
    return 0


def _cmd_resume(args) -> int:
    log = resume_run(args.dir, judge=_judge_from_env())
    print(f"run complete: {len(log.rows)} log rows in {args.dir}")
    return 0


def _print_table(header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def _matrix_table(rows: list[MetricsRow], chunks: list[int], value, fmt: str):
    domains = list(dict.fromkeys(r.eval_domain for r in rows))
    cell = {(r.chunk, r.eval_domain): r for r in rows}
    present = [c for c in chunks if any((c, d) in cell for d in domains)]
    if not present:
        raise DataError(f"no log rows for requested chunks {chunks}")
    out = []
    for c in present:
        out.append([str(c)] + [format(value(cell[(c, d)]), fmt)
                               if (c, d) in cell else "-" for d in domains])
    _print_table(["Chunk", *domains], out)


def _cmd_report(args) -> int:
    rows = read_log(args.log)
    if args.table == 1:
        trained = sorted((r for r in rows if r.eval_domain == r.trained_domain),
                         key=lambda r: r.chunk)
        _print_table(
            ["Chunk", "Domain", "Perplexity", "Avg Loss", "Time per Step (s)"],
            [[str(r.chunk), r.trained_domain, f"{r.perplexity:.2f}",
              f"{r.avg_loss:.2f}", f"{r.time_per_step_s:.2f}"] for r in trained],
        )
    elif args.table == 2:
        _matrix_table(rows, args.chunks, lambda r: r.similarity, ".2f")
    else:
        _matrix_table(rows, args.chunks, lambda r: r.judge_rating, ".1f")
    return 0


def _chunk_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad chunk list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sllab",
        description="Streaming LoRA continual-learning laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="emit synthetic domain corpora")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--domains", type=int, default=3,
                     help="number of synthetic domains (1-3)")
    gen.add_argument("--records", type=int, default=200,
                     help="records per domain")
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_gen_data)

    run = sub.add_parser("run", help="execute a streaming experiment")
    run.add_argument("--config", required=True, help="flat key=value config file")
    run.add_argument("--replay-fraction", type=float, default=None,
                     help="override the config's replay_fraction (0 = ablation)")
    run.add_argument("--output-dir", default=None,
                     help="override the config's output_dir")
    run.set_defaults(func=_cmd_run)

    res = sub.add_parser("resume", help="continue a checkpointed run")
    res.add_argument("--dir", required=True, help="run output directory")
    res.set_defaults(func=_cmd_resume)

    rep = sub.add_parser("report", help="render tables from a run log")
    rep.add_argument("--log", required=True, help="path to log.csv")
    rep.add_argument("--table", type=int, choices=(1, 2, 3), required=True)
    rep.add_argument("--chunks", type=_chunk_list, default=[0, 3, 5],
                     help="chunk rows for tables 2/3 (default 0,3,5)")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ScheduleError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, ArithmeticError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
