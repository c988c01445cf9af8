from enum import Enum
from pathlib import Path

import typer

from coalflow.core.exceptions import ConfigError
from coalflow.utils.persistence import report_store


class ReportFormat(str, Enum):
    TABLE = "table"
    CSV = "csv"


def render(report, fmt: ReportFormat) -> str:
    frame = report_store.table_frame(report)
    if fmt is ReportFormat.CSV:
        return frame.to_csv(index=False, float_format="%.17g")
    lines = [f"# {report.study} on {report.model}, {report.samples} samples, seed {report.seed}, "
             f"monotone={report.monotone_flag}"]
    if frame.empty:
        lines.append("  ".join(str(c) for c in frame.columns))
    else:
        lines.append(frame.to_string(index=False))
    return "\n".join(lines) + "\n"


def report(
    path: Path = typer.Argument(..., help="report.json written by `coalflow run`"),
    fmt: ReportFormat = typer.Option(ReportFormat.TABLE, "--format", "-f", help="table or csv"),
):
    """Render a report as a ladder table or as CSV."""
    try:
        loaded = report_store.read_report(str(path))
    except ConfigError as e:
        typer.echo(f"malformed report: {e}", err=True)
        raise typer.Exit(2)
    typer.echo(render(loaded, fmt), nl=False)
