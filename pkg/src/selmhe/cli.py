"""Command line front end: benchmark runs, sweeps, and rank diagnostics."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import EstimationError
from . import harness
from .cstr import CstrScenario


def _parse_values(text, cast):
    return tuple(cast(part) for part in text.split(",") if part.strip())


def _scenario_from(args, file_cfg) -> CstrScenario:
    scenario = harness.apply_scenario_config(file_cfg.get("scenario"))
    if getattr(args, "steps", None):
        scenario = replace(scenario, steps=args.steps)
    return scenario


def _seeds_from(args):
    if getattr(args, "seed", None) is not None:
        return (args.seed,)
    if getattr(args, "seeds", None):
        return _parse_values(args.seeds, int)
    return harness.DEFAULT_SEEDS


def _spec_from(args, file_cfg) -> harness.CaseSpec:
    spec = harness.make_case(args.case)
    sel = file_cfg.get("selection", {})
    fields = {k: v for k, v in sel.items()
              if k in ("alpha", "fixed_count", "forced", "policy_mode",
                       "exit_margin", "entry_confirm", "entry_bypass")}
    return replace(spec, **fields) if fields else spec


def _cmd_run(args) -> int:
    file_cfg = harness.load_config(args.config) if args.config else {}
    scenario = _scenario_from(args, file_cfg)
    report = harness.run_case(_spec_from(args, file_cfg), _seeds_from(args),
                              scenario,
                              config_overrides=file_cfg.get("estimator"))
    files = harness.export_report(args.out, report)
    print(f"case {report.spec.case} ({report.spec.label}): "
          f"median RMSE {report.median_rmse:.2f}% over {len(report.seeds)} seed(s)")
    for r in report.results:
        print(f"  seed {r.seed}: total {r.rmse_total:.2f}%  "
              f"states {r.rmse_states:.2f}%  params {r.rmse_params:.2f}%  "
              f"({r.runtime:.1f}s)")
    print("wrote: " + ", ".join(str(p) for p in files))
    return 0


def _cmd_sweep(args) -> int:
    file_cfg = harness.load_config(args.config) if args.config else {}
    scenario = _scenario_from(args, file_cfg)
    seeds = _seeds_from(args)
    overrides = file_cfg.get("estimator")
    if args.param == "n":
        values = _parse_values(args.values, int) if args.values else (4, 5, 6, 7, 8)
        table = harness.sweep_fixed_n(values, seeds, scenario, overrides)
    else:
        values = (_parse_values(args.values, float) if args.values
                  else (1.0, 2.0, 3.0, 4.0, 5.0))
        table = harness.sweep_alpha(values, seeds, scenario, overrides)
    print(f"sweep over {args.param} ({len(seeds)} seed(s) each):")
    for key, report in table.items():
        print(f"  {args.param}={key:g}: median RMSE {report.median_rmse:.2f}%")
    if args.out:
        import pathlib
        out = pathlib.Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"sweep_{args.param}.csv"
        with open(path, "w") as fh:
            fh.write(f"{args.param},median_rmse_percent\n")
            for key, report in table.items():
                fh.write(f"{key:g},{report.median_rmse:.6f}\n")
        print(f"wrote: {path}")
    return 0


def _cmd_diagnose(args) -> int:
    file_cfg = harness.load_config(args.config) if args.config else {}
    scenario = replace(_scenario_from(args, file_cfg), seed=args.seed)
    result = harness.run_case_single(harness.make_case(args.case), scenario,
                                     config_overrides=file_cfg.get("estimator"))
    ranks = [rec.rank.rank for rec in result.records]
    conds = [rec.rank.condition_number for rec in result.records]
    full = sum(1 for r in ranks if r >= harness.N_AUG)
    if args.out:
        import pathlib

        from .sensitivity import write_rank_trace

        out = pathlib.Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "rank_trace.csv"
        write_rank_trace(path, [rec.rank for rec in result.records],
                         [rec.step for rec in result.records])
        print(f"wrote: {path}")
    print(f"case {args.case}, seed {args.seed}, {len(ranks)} steps")
    print(f"rank: min {min(ranks)}, max {max(ranks)}, "
          f"full-rank steps {full}/{len(ranks)}")
    print(f"condition number: min {min(conds):.3e}, max {max(conds):.3e}")
    if args.rank:
        print("step rank cond")
        stride = max(1, len(ranks) // 25)
        for k in range(0, len(ranks), stride):
            print(f"{k:4d} {ranks[k]:4d} {conds[k]:.3e}")
    print(f"total RMSE {result.rmse_total:.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selmhe",
        description="Joint state/parameter moving-horizon estimation with "
                    "sensitivity-ranked variable selection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one benchmark case across seeds")
    p.add_argument("--case", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--seed", type=int, default=None,
                   help="run a single seed instead of the default set")
    p.add_argument("--seeds", type=str, default=None,
                   help="comma-separated seed list")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", type=str, default=None, help="INI options file")
    p.add_argument("--out", type=str, default="selmhe-out")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="sweep the budget n or the threshold alpha")
    p.add_argument("--param", choices=("n", "alpha"), required=True)
    p.add_argument("--values", type=str, default=None,
                   help="comma-separated values; defaults per parameter")
    p.add_argument("--seeds", type=str, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("diagnose", help="rank and conditioning of one run")
    p.add_argument("--case", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--rank", action="store_true",
                   help="print a thinned per-step rank table")
    p.add_argument("--out", type=str, default=None,
                   help="also write the full rank trace CSV here")
    p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
