"""Command-line entry point.

Subcommands mirror the pipeline stages: pretrain / prune / transfer / eval
run the grid up to that stage (computing missing upstream artifacts), run
executes everything and writes the report plus export, fid reports the
dataset-pair distance, export renders CSVs and figures from an existing
report. Exit code 0 only when every cell succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment

STAGES = ("pretrain", "prune", "transfer", "eval")


def _parse_seeds(text):
    if text is None:
        return None
    return [int(s) for s in text.split(",") if s.strip() != ""]


def _load_config(path) -> dict:
    return json.loads(Path(path).read_text())


def _add_common(p):
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default=None, help="comma-separated seed list overriding the config")
    p.add_argument("--resume", action="store_true", default=True, help="reuse cached artifacts (default)")
    p.add_argument("--fresh", action="store_true", help="discard cached artifacts before running")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for independent cells")


def cmd_stage(args, stage: str) -> int:
    cfg = experiment.ExperimentConfig.from_dict(_load_config(args.config))
    run_ctx = experiment.ExperimentRun(cfg, args.out, seeds=_parse_seeds(args.seeds))
    resolved = run_ctx.resolved
    cells = run_ctx.plan_cells()

    pretrain_items = sorted({(c["pretrain_scheme"], c["seed"]) for c in cells})
    for scheme, seed in pretrain_items:
        experiment.run_pretrain_item(resolved, args.out, scheme, seed)
    if stage == "pretrain":
        print(f"pretrained {len(pretrain_items)} checkpoints into {run_ctx.out / 'checkpoints'}")
        return 0

    ticket_items = sorted({(c["pretrain_scheme"], c["prune_scheme"], c["sparsity"], c["seed"]) for c in cells}, key=str)
    for pre, prune_scheme, sparsity, seed in ticket_items:
        experiment.run_ticket_item(resolved, args.out, pre, prune_scheme, sparsity, seed)
    if stage == "prune":
        print(f"drew {len(ticket_items)} tickets into {run_ctx.out / 'tickets'}")
        return 0

    for cell in cells:
        experiment.run_transfer_item(resolved, args.out, cell)
    if stage == "transfer":
        print(f"transferred {len(cells)} models into {run_ctx.out / 'models'}")
        return 0

    failures = 0
    for cell in cells:
        key = experiment.run_eval_item(resolved, args.out, cell)
        record = json.loads(run_ctx.cell_path(key).read_text())
        if record["status"] != "ok":
            failures += 1
            print(f"cell failed: {record['key']}: {record['error']}", file=sys.stderr)
    print(f"evaluated {len(cells)} cells, {failures} failed")
    return 1 if failures else 0


def cmd_run(args) -> int:
    result = experiment.run(
        _load_config(args.config), args.out, seeds=_parse_seeds(args.seeds), jobs=args.jobs, resume=not args.fresh
    )
    ok = sum(1 for c in result.report["cells"] if c["status"] == "ok")
    print(f"report: {result.report_path} ({ok}/{len(result.report['cells'])} cells ok)")
    exported = experiment.export_report(result.report, Path(args.out) / "export")
    print(f"export: {len(exported)} files in {Path(args.out) / 'export'}")
    return 0 if result.all_ok else 1


def cmd_fid(args) -> int:
    cfg = experiment.ExperimentConfig.from_dict(_load_config(args.config))
    run_ctx = experiment.ExperimentRun(cfg, args.out, seeds=_parse_seeds(args.seeds))
    resolved = run_ctx.resolved
    scheme = "natural" if "natural" in resolved["pretrain_schemes"] else resolved["pretrain_schemes"][0]
    values = {}
    for seed in resolved["seeds"]:
        experiment.run_pretrain_item(resolved, args.out, scheme, seed)
        values[str(seed)] = experiment.run_fid(resolved, args.out, seed)
        print(f"seed {seed}: fid = {values[str(seed)]:.6f}")
    (run_ctx.out / "fid.json").write_text(json.dumps(values, indent=2, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    report_path = Path(args.report) if args.report else Path(args.out) / "report.json"
    if not report_path.exists():
        print(f"no report at {report_path}; run the pipeline first", file=sys.stderr)
        return 1
    report = json.loads(report_path.read_text())
    written = experiment.export_report(report, Path(args.out) / "export")
    for p in written:
        print(p)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ticketlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the pipeline through the {stage} stage")
        _add_common(p)
        p.set_defaults(func=lambda a, s=stage: cmd_stage(a, s))

    p_run = sub.add_parser("run", help="full pipeline plus report and export")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_fid = sub.add_parser("fid", help="feature-space distance between the dataset pair")
    _add_common(p_fid)
    p_fid.set_defaults(func=cmd_fid)

    p_exp = sub.add_parser("export", help="CSV tables and figures from an existing report")
    p_exp.add_argument("--out", required=True, help="output directory of a previous run")
    p_exp.add_argument("--report", default=None, help="explicit report path (default: OUT/report.json)")
    p_exp.set_defaults(func=cmd_export)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
