import typer

from coalflow.cli.commands import report, run
from coalflow.core.config import settings

app = typer.Typer(
    name="coalflow",
    help=f"{settings.PROJECT_NAME} {settings.VERSION}: coalescing flows, tube crossings and their convergence studies",
    no_args_is_help=True,
    add_completion=False,
)

app.command("run")(run.run)
app.command("report")(report.report)


def main():
    app()


if __name__ == "__main__":
    main()
