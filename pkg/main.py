#!/usr/bin/env python3
"""
Semi-Implicit Studio - Main Entry Point

Usage:
    python main.py run --config configs/nb.json --seed 1 --out output/nb

    python main.py validate --config configs/logistic.yaml

    python main.py draws --posterior output/nb/posterior.json --count 5000
"""

import argparse
import json
import sys
import traceback

from rich.panel import Panel
from rich.table import Table

from config.run_log import configure_logging, console
from config.settings import RunDefaults
from flows import pipeline
from tools.errors import ConfigError, TrainingDiverged

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INTERRUPTED = 130


# ============================================================
# CLI Argument Parser
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Semi-Implicit Studio - semi-implicit variational inference experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Negative binomial posterior on the red-mite counts, with Gibbs and MFVI
  python main.py run --config configs/nb.json

  # Same run, different seed, separate output directory
  python main.py run --config configs/nb.json --seed 7 --out output/nb_seed7

  # Check a config without running anything
  python main.py validate --config configs/toy_laplace.json

  # Fresh draws from a trained posterior
  python main.py draws --posterior output/nb/posterior.json --count 10000 --seed 3
        """,
    )
    parser.add_argument("--log-level", default=RunDefaults.LOG_LEVEL, help="Console log level")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="Run an experiment config")
    run_p.add_argument("--config", required=True, help="JSON or YAML run config")
    run_p.add_argument("--seed", type=int, default=None, help="Override the config seed")
    run_p.add_argument("--out", default=None, help="Override the output directory")

    val_p = sub.add_parser("validate", help="Validate a config (no computation)")
    val_p.add_argument("--config", required=True)
    val_p.add_argument("--json", action="store_true", help="Print issues as JSON")

    draws_p = sub.add_parser("draws", help="Sample a serialized posterior")
    draws_p.add_argument("--posterior", required=True, help="posterior.json from a run")
    draws_p.add_argument("--count", type=int, default=RunDefaults.DRAWS)
    draws_p.add_argument("--seed", type=int, default=RunDefaults.SEED)
    draws_p.add_argument("--out", default=None, help="Output CSV (or directory)")
    return parser


# ============================================================
# Commands
# ============================================================

def print_issues(errors: list[dict]) -> None:
    table = Table(title="Config issues", border_style="red")
    for column in ("loc", "type", "message", "line:col"):
        table.add_column(column)
    for e in errors:
        where = f"{e.get('line')}:{e.get('column')}" if e.get("line") is not None else ""
        table.add_row(e.get("loc") or "-", e.get("type", ""), e.get("msg", ""), where)
    console.print(table)


def cmd_run(args) -> int:
    report = pipeline.run(args.config, seed=args.seed, out=args.out)
    table = Table(title=f"KS ({report.experiment.value})")
    for column in ("method", "reference", "variable", "K", "D", "p-value"):
        table.add_column(column)
    for e in report.ks_table + report.k_sweep:
        table.add_row(e.method, e.reference, e.variable, "" if e.K is None else str(e.K),
                      f"{e.statistic:.4f}", f"{e.p_value:.3g}")
    if report.ks_table or report.k_sweep:
        console.print(table)
    out_dir = report.config.get("output_dir")
    console.print(f"\n[bold green]Run completed[/bold green]  artifacts in {out_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    issues = pipeline.validate(args.config)
    if args.json:
        print(json.dumps([i.model_dump() for i in issues], indent=2))
    elif issues:
        print_issues([i.model_dump() for i in issues])
    else:
        console.print(f"[green]{args.config}: ok[/green]")
    return EXIT_CONFIG if issues else EXIT_OK


def cmd_draws(args) -> int:
    path = pipeline.draws(args.posterior, args.count, args.seed, args.out)
    console.print(f"[green]Wrote {args.count} draws to {path}[/green]")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "draws": cmd_draws}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level.upper())

    console.print(Panel(
        "[bold]Semi-Implicit Studio[/bold]\n"
        "[dim]Semi-implicit variational inference with Gibbs and mean-field baselines[/dim]",
        border_style="bright_blue",
    ))

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        console.print(f"[red]{e}[/red]")
        print_issues(e.errors)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        console.print(f"[red]Training diverged at iteration {e.iteration}: {e}[/red]")
        console.print("[yellow]The partial bound trace was written to the output directory.[/yellow]")
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        console.print("\n[yellow]Interrupted by user.[/yellow]")
        return EXIT_INTERRUPTED
    except Exception as e:
        console.print(f"\n[red]Run failed: {e}[/red]")
        traceback.print_exc()
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
