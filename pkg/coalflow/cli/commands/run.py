from pathlib import Path
from typing import Optional
import os
import sys

import typer
from loguru import logger

from coalflow.core.config import configure_logging, settings
from coalflow.core.exceptions import CoalflowError, ConfigError, ResourceGuardError
from coalflow.models.schemas import load_config
from coalflow.services.study_service import StudyService
from coalflow.utils.persistence import report_store

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_GUARD = 3


def _summary(report) -> str:
    if report.p_hat:
        values = ", ".join(f"{p:.4f}" for p in report.p_hat)
        body = f"{report.parameter}={report.ladder} p_hat=[{values}]"
    else:
        body = ", ".join(f"{k}={v}" for k, v in report.extra.items() if isinstance(v, (int, float, bool)))
    return f"{report.study}/{report.model}: {body} monotone={report.monotone_flag} ({report.wall_time:.1f}s)"


def run(
    config: Path = typer.Argument(..., help="Experiment config (JSON)"),
    samples: Optional[int] = typer.Option(None, "--samples", help="Override the number of replicas"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the seed"),
    raw: bool = typer.Option(False, "--raw", help="Also write raw.jsonl with one record per replica"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker processes (default: available CPUs)"),
    quiet: bool = typer.Option(False, "--quiet", help="Only warnings and the summary line"),
):
    """Run the study named in CONFIG and write report.json, report.csv and optionally raw.jsonl."""
    configure_logging(quiet=quiet)
    try:
        cfg = load_config(str(config), {"samples": samples, "seed": seed})
        service = StudyService(workers=threads, progress=not quiet and sys.stderr.isatty())
        report, records = service.run(cfg)
    except ConfigError as e:
        typer.echo(f"invalid config: {e}", err=True)
        raise typer.Exit(EXIT_INVALID)
    except ResourceGuardError as e:
        typer.echo(f"resource guard: {e}", err=True)
        raise typer.Exit(EXIT_GUARD)
    except (ValueError, CoalflowError) as e:
        # geometry and lattice problems are input problems of the config
        status = EXIT_INVALID if isinstance(e, ValueError) else EXIT_FAILURE
        typer.echo(f"{config}: {e}", err=True)
        raise typer.Exit(status)

    out_dir = str(out or cfg.output or os.path.join(settings.OUTPUT_DIR, cfg.name or Path(config).stem))
    try:
        report_store.write_report(report, out_dir)
        if raw:
            report_store.write_raw(records, out_dir)
    except OSError as e:
        logger.error(f"Could not write results: {e}")
        typer.echo(f"cannot write to {out_dir}: {e}", err=True)
        raise typer.Exit(EXIT_FAILURE)
    typer.echo(_summary(report))
