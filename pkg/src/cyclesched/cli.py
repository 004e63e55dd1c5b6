"""Command-line entry point.

    cyclesched simulate --trace T [--config C] [--policy P] [--seed N] --out DIR
    cyclesched compare  --trace T [--config C] [--seed N] --out DIR
    cyclesched synth    --spec S [--seed N] --out DIR
    cyclesched profile  --events E --out DIR

Failures print one JSON error object on stderr and exit with 2 (usage),
3 (input) or 4 (simulation).  Outputs are staged in a temporary directory
and only moved into ``--out`` once every file has been written.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

from .errors import InputError, InvalidSpec, IoFailure, SchedError
from .sim import Policy, SimConfig, SimReport, run_simulation
from .trace import (TraceEntry, WorkloadSpec, WorkloadTrace, dumps_trace, entry_to_record, parse_events,
                    parse_trace, profile_job, synthesize_workload)

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_SIM = 0, 2, 3, 4


class UsageError(SchedError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x):
    """Round floats for diffable output."""
    if isinstance(x, float):
        return round(x, 4) + 0.0  # normalises -0.0
    if isinstance(x, dict):
        return {k: _fmt(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_fmt(v) for v in x]
    return x


def _dump_json(obj) -> str:
    return json.dumps(_fmt(obj), sort_keys=True, indent=2) + "\n"


def _cdf_csv(rows) -> str:
    lines = ["normalized_delay,cumulative_fraction"]
    lines += [f"{v:.4f},{f:.4f}" for v, f in rows]
    return "\n".join(lines) + "\n"


def _timeline_csv(gantt) -> str:
    lines = ["group,job,kind,start,end"]
    lines += [f"{g},{job},{kind},{s:.4f},{e:.4f}" for g, job, kind, s, e in gantt]
    return "\n".join(lines) + "\n"


def _events_jsonl(events) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)


def report_files(report: SimReport, config: SimConfig | None = None) -> dict[str, str]:
    """File name -> contents for one simulation report."""
    summary = report.summary()
    summary["bubble_ratio"] = {j: m.bubble_ratio for j, m in sorted(report.jobs.items())}
    if config is not None:
        summary["config"] = config.to_dict()
    return {
        "summary.json": _dump_json(summary),
        "cdf.csv": _cdf_csv(report.cdf),
        "timeline.csv": _timeline_csv(report.gantt),
        "events.jsonl": _events_jsonl(report.events),
    }


def emit_report(report: SimReport, outdir, config: SimConfig | None = None) -> list[Path]:
    return write_outputs(report_files(report, config), outdir)


def write_outputs(files: dict[str, str], outdir) -> list[Path]:
    """Write all files or none of them."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=outdir))
    except OSError as exc:
        raise IoFailure(f"cannot create {outdir}: {exc}") from None
    written = []
    try:
        for name, text in files.items():
            (staging / name).write_text(text, encoding="utf-8")
        for name in files:
            os.replace(staging / name, outdir / name)
            written.append(outdir / name)
        return written
    except OSError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        raise IoFailure(f"writing {outdir}: {exc}") from None
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def _load_config(args) -> SimConfig:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "policy", None):
        cfg = replace(cfg, policy=Policy.parse(args.policy))
    return cfg


def cmd_simulate(args) -> dict[str, str]:
    trace = parse_trace(args.trace)
    cfg = _load_config(args)
    return report_files(run_simulation(trace, cfg), cfg)


def compare_files(trace: WorkloadTrace, cfg: SimConfig) -> dict[str, str]:
    reports = {p: run_simulation(trace, replace(cfg, policy=p)) for p in Policy}
    base = reports[Policy.ISOLATED].makespan
    table = {}
    files = {}
    for p, rep in reports.items():
        table[p.value] = {
            "makespan": rep.makespan,
            "makespan_vs_isolated": rep.makespan / base if base > 0 else 0.0,
            "mean_normalized_delay": rep.summary()["mean_normalized_delay"],
            "slo_violations": len(rep.summary()["slo_violations"]),
        }
        files[f"cdf_{p.value}.csv"] = _cdf_csv(rep.cdf)
    files["summary.json"] = _dump_json({"policies": table, "config": cfg.to_dict()})
    lines = ["policy,makespan,makespan_vs_isolated,mean_normalized_delay"]
    for name, row in table.items():
        lines.append(f"{name},{row['makespan']:.4f},{row['makespan_vs_isolated']:.4f},"
                     f"{row['mean_normalized_delay']:.4f}")
    files["compare.csv"] = "\n".join(lines) + "\n"
    return files


def cmd_compare(args) -> dict[str, str]:
    return compare_files(parse_trace(args.trace), _load_config(args))


def cmd_synth(args) -> dict[str, str]:
    path = Path(args.spec)
    if not path.is_file():
        raise InvalidSpec(f"spec file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise InvalidSpec("generator spec must be a JSON object")
    try:
        spec = WorkloadSpec.from_dict(data)
    except TypeError as exc:
        raise InvalidSpec(str(exc)) from None
    trace = synthesize_workload(spec, args.seed if args.seed is not None else 0)
    return {"trace.jsonl": dumps_trace(trace)}


def cmd_profile(args) -> dict[str, str]:
    by_job = defaultdict(list)
    for ev in parse_events(args.events):
        by_job[ev.job_id].append(ev)
    records = [entry_to_record(TraceEntry(profile_job(evs))) for _, evs in sorted(by_job.items())]
    for rec in records:
        del rec["arrival_s"], rec["cycles"]
    return {"profiles.json": _dump_json({"profiles": records})}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cyclesched", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, policy=False):
        p.add_argument("--trace", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        if policy:
            p.add_argument("--policy")
        p.add_argument("--out", required=True)

    common(sub.add_parser("simulate", help="run one policy"), policy=True)
    common(sub.add_parser("compare", help="run all four policies"))
    p = sub.add_parser("synth", help="generate a synthetic trace")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p = sub.add_parser("profile", help="extract job profiles from an event log")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"simulate": cmd_simulate, "compare": cmd_compare, "synth": cmd_synth, "profile": cmd_profile}


def _fail(err: dict, code: int) -> int:
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        files = COMMANDS[args.verb](args)
        for path in write_outputs(files, args.out):
            print(path)
        return EXIT_OK
    except UsageError as exc:
        return _fail(exc.to_dict(), EXIT_USAGE)
    except InputError as exc:
        return _fail(exc.to_dict(), EXIT_INPUT)
    except SchedError as exc:
        return _fail(exc.to_dict(), EXIT_SIM)
    except Exception as exc:  # a bug, still reported as an error object
        return _fail({"error": type(exc).__name__, "kind": "internal", "message": str(exc)}, EXIT_SIM)


if __name__ == "__main__":
    sys.exit(main())
