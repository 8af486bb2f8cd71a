"""Command-line interface.

Exit codes: 0 success, 1 config error, 2 backend error, 3 data error.
"""

from __future__ import annotations

import sys
from functools import wraps
from pathlib import Path

import click

from .corpus import load_dataset, save_dataset, split_dataset
from .exceptions import BackendError, ConfigError, DataError
from .harness import (
    ExperimentConfig,
    aggregate_random_runs,
    emit_report,
    load_artifact,
    run_all_seeds,
)

_EXIT_CODES = ((ConfigError, 1), (BackendError, 2), (DataError, 3))


def _guarded(command):
    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigError, BackendError, DataError) as exc:
            code = next(code for cls, code in _EXIT_CODES if isinstance(exc, cls))
            click.echo(f"error: {exc}", err=True)
            sys.exit(code)

    return wrapper


@click.group()
@click.version_option(package_name="dialoscope")
def main() -> None:
    """Rate task-oriented dialogues for user satisfaction with an LLM backend."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path),
              help="Experiment config file (JSON).")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path),
              help="Artifact directory for this run.")
@_guarded
def run(config_path: Path, out_dir: Path) -> None:
    """Run an experiment and persist its artifact(s).

    With the random selector and several seeds, one artifact is written per
    seed under seed-<n>/ plus an aggregate.json of the mean report.
    """
    config = ExperimentConfig.from_file(config_path)
    artifacts, aggregate = run_all_seeds(config, out_dir)
    for artifact in artifacts:
        flat_seed = artifact.config.get("selection_seed")
        label = f" (seed {flat_seed})" if flat_seed is not None else ""
        click.echo(
            f"{artifact.path}{label}: {artifact.report.n_scored} scored, "
            f"{artifact.report.n_parse_failed} parse failures, "
            f"macro F1 {artifact.report.macro_avg.f1:.4f}"
        )
    if aggregate is not None:
        click.echo(f"aggregate over seeds {list(aggregate.seeds)}: "
                   f"mean macro F1 {aggregate.mean['macro_f1']:.4f}")


@main.command()
@click.argument("artifact_dirs", nargs=-1, required=True,
                type=click.Path(path_type=Path, exists=False))
@click.option("--output", type=click.Path(path_type=Path), default=None,
              help="Write the aggregate JSON here instead of stdout.")
@_guarded
def aggregate(artifact_dirs: tuple[Path, ...], output: Path | None) -> None:
    """Mean report across run artifacts that differ only in selection seed."""
    import json

    artifacts = [load_artifact(path) for path in artifact_dirs]
    result = aggregate_random_runs(artifacts)
    payload = json.dumps(result.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n"
    if output is not None:
        output.write_text(payload, encoding="utf-8")
    else:
        click.echo(payload, nl=False)


@main.command()
@click.argument("artifact_dir", type=click.Path(path_type=Path))
@click.option("--format", "format_", type=click.Choice(["md", "csv", "json"]),
              default="md", show_default=True)
@click.option("--output", type=click.Path(path_type=Path), default=None,
              help="Write the rendering here instead of stdout.")
@_guarded
def report(artifact_dir: Path, format_: str, output: Path | None) -> None:
    """Render a run artifact's metrics report."""
    artifact = load_artifact(artifact_dir)
    payload = emit_report(artifact.report, format_, output)
    if output is None:
        click.echo(payload, nl=False)


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(path_type=Path),
              help="Dataset JSONL to split.")
@click.option("--fraction", default=0.10, show_default=True, type=float,
              help="Fraction of dialogues held out as test.")
@click.option("--seed", default=13, show_default=True, type=int)
@click.option("--train-out", type=click.Path(path_type=Path), default=None,
              help="Train split destination [default: <input>.train.jsonl].")
@click.option("--test-out", type=click.Path(path_type=Path), default=None,
              help="Test split destination [default: <input>.test.jsonl].")
@_guarded
def split(input_path: Path, fraction: float, seed: int,
          train_out: Path | None, test_out: Path | None) -> None:
    """Deterministically split a dataset into train and test JSONL files."""
    dialogues = load_dataset(input_path)
    result = split_dataset(dialogues, fraction, seed)
    train_out = train_out or input_path.with_suffix(".train.jsonl")
    test_out = test_out or input_path.with_suffix(".test.jsonl")
    save_dataset(result.train, train_out)
    save_dataset(result.test, test_out)
    click.echo(f"{len(result.train)} train -> {train_out}")
    click.echo(f"{len(result.test)} test -> {test_out}")


if __name__ == "__main__":
    main()
