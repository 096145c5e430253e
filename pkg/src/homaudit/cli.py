"""Command-line entry point.

Exit codes: 0 ok, 1 config error, 2 runtime error, 3 missing stage dependency.
"""

from __future__ import annotations

import sys

import click

from .core import ConfigError, HomAuditError
from .report import STAGES, DependencyError, run_pipeline


def _run(stages: list[str], config: str, seed: int | None, backend: str | None, out: str | None) -> None:
    try:
        run_pipeline(config, stages, seed=seed, backend=backend, out_dir=out, log=click.echo)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    except DependencyError as exc:
        click.echo(f"dependency missing: {exc}", err=True)
        sys.exit(3)
    except HomAuditError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


def _stage_command(name: str, help_text: str):
    @click.command(name=name, help=help_text)
    @click.option("--config", required=True, type=click.Path(), help="Study config file (TOML).")
    @click.option("--seed", type=int, default=None, help="Override the simulator/embedding seed.")
    @click.option("--backend", type=click.Choice(["live", "sim"]), default=None, help="Override the backend kind.")
    @click.option("--out", type=click.Path(), default=None, help="Output directory (default from config).")
    def command(config, seed, backend, out):
        stages = list(STAGES) if name == "all" else [name]
        _run(stages, config, seed, backend, out)

    return command


@click.group(help="Homogeneity-bias audit pipeline: generate stories, embed, pair, fit, report.")
def main():
    pass


main.add_command(_stage_command("generate", "Generate stories for every planned (stimulus, setting, replicate)."))
main.add_command(_stage_command("embed", "Embed the corpus with the configured provider."))
main.add_command(_stage_command("observe", "Enumerate within-condition pairs and standardize cosines."))
main.add_command(_stage_command("fit", "Fit the per-setting and pooled mixed models."))
main.add_command(_stage_command("report", "Render tables, figure data and the manifest."))
main.add_command(_stage_command("all", "Run every stage in order."))


if __name__ == "__main__":
    main()
