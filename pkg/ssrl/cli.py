"""Main CLI entry point for ssrl-desk."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click
import numpy as np
import torch

from .clustering import argmax_assign, write_assignments
from .config import (
    CorpusSpec,
    RunConfig,
    apply_overrides,
    load_config,
    load_corpus_spec,
    parse_override,
)
from .encoder import encode, load_checkpoint, predict
from .errors import ErrorHandlingGroup
from .logging import ConfigError, configure_logging, get_logger
from .metrics import cosine_scores, det_points
from .pipeline import ablation_matrix, evaluate, read_epoch_log, run_training
from .plot import write_labeling_evolution
from .synth import generate_corpus, read_corpus, write_corpus

logger = get_logger(__name__)


@click.group(cls=ErrorHandlingGroup)
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging to stderr")
@click.option(
    "--json-log",
    metavar="FILE",
    envvar="SSRL_DESK_LOG",
    default="auto",
    help='JSON log file path (default: auto, "none" to disable)',
)
def cli(verbose: bool, json_log: str):
    """ssrl-desk: self-supervised reflective learning on synthetic speakers."""
    # Allow "none" to disable file logging
    log_file = None if json_log == "none" else json_log
    configure_logging(verbose=verbose, json_log=log_file)


def _split_assignment(raw: str, option: str) -> tuple[str, str]:
    name, sep, value = raw.partition("=")
    if not sep or not name:
        raise ConfigError(f"{option} expects name=value, got {raw!r}")
    return name.strip(), value.strip()


def _resolve_config(config_path: Path | None, overrides: tuple[str, ...]) -> RunConfig:
    config = load_config(config_path) if config_path else RunConfig().validate()
    parsed = {}
    for raw in overrides:
        name, value = _split_assignment(raw, "--set")
        parsed[name] = parse_override(name, value)
    return apply_overrides(config, parsed) if parsed else config


@cli.command("gen-data")
@click.option(
    "--spec", "spec_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Corpus spec JSON (defaults to the desk-scale corpus)",
)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def gen_data(spec_path: Path | None, out_dir: Path):
    """Generate a synthetic corpus and trial list into OUT."""
    spec = load_corpus_spec(spec_path) if spec_path else CorpusSpec().validate()
    corpus = generate_corpus(spec)
    write_corpus(corpus, out_dir)
    click.echo(
        json.dumps(
            {
                "out": str(out_dir),
                "train_samples": corpus.num_train,
                "held_out_samples": len(corpus.features) - corpus.num_train,
                "trials": len(corpus.trials),
            }
        )
    )


@cli.command()
@click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="RunConfig JSON; missing keys take defaults",
)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option(
    "--set", "overrides", multiple=True, metavar="NAME=VALUE",
    help="Override a config field, e.g. --set use_ema=false --set corpus.seed=3",
)
def train(config_path: Path | None, out_dir: Path, overrides: tuple[str, ...]):
    """Warm up on k-means labels, then run SSRL; outputs go to OUT."""
    config = _resolve_config(config_path, overrides)
    result = run_training(config, out_dir)
    click.echo(json.dumps(dataclasses.asdict(result.final)))


@cli.command("eval")
@click.option(
    "--checkpoint", "checkpoint_path", required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
@click.option(
    "--corpus", "corpus_dir", required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--det", "det_path", type=click.Path(dir_okay=False, path_type=Path),
              help="Write threshold,far,frr operating points")
@click.option("--assignments", "assignments_path", type=click.Path(dir_okay=False, path_type=Path),
              help="Write the model's argmax cluster per training sample")
def eval_cmd(
    checkpoint_path: Path,
    corpus_dir: Path,
    det_path: Path | None,
    assignments_path: Path | None,
):
    """Score a checkpoint on a corpus directory written by gen-data."""
    torch.set_num_threads(1)
    model = load_checkpoint(checkpoint_path)
    corpus = read_corpus(corpus_dir)
    with torch.no_grad():
        z = encode(model, corpus.features)
        assigned = argmax_assign(predict(model, z[: corpus.num_train]).numpy())
    metrics = evaluate(model, model, corpus, assigned)

    if det_path is not None:
        scores = cosine_scores(z.numpy(), corpus.trials.pairs)
        points = det_points(scores, corpus.trials.is_target)
        det_path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(
            det_path,
            np.column_stack([points.thresholds, points.far, points.frr]),
            fmt="%.17g",
            delimiter=",",
            header="threshold,far,frr",
            comments="",
        )
    if assignments_path is not None:
        write_assignments(assignments_path, np.arange(corpus.num_train), assigned)

    result = dataclasses.asdict(metrics)
    del result["student_eer_pct"]
    click.echo(json.dumps(result))


def _parse_axis(raw: str) -> tuple[str, list[str]]:
    name, values = _split_assignment(raw, "--axis")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"--axis {name} has no values")
    return name, items


@cli.command()
@click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Base RunConfig JSON",
)
@click.option(
    "--axis", "axes", multiple=True, metavar="NAME=V1,V2,...",
    help="Config field (or 'variant') and the values to sweep; repeat for a grid",
)
@click.option("--set", "overrides", multiple=True, metavar="NAME=VALUE",
              help="Override a base config field")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def ablate(config_path: Path | None, axes: tuple[str, ...], overrides: tuple[str, ...], out_dir: Path):
    """Run every combination of the axes and write OUT/ablation.csv.

    \b
    Examples:
        ssrl-desk ablate --out runs/abl --axis variant=full,no_ema,no_queue,no_gmm
        ssrl-desk ablate --out runs/l --axis queue_length=1,5,10,20
    """
    base = _resolve_config(config_path, overrides)
    parsed: dict[str, list[str]] = {}
    for raw in axes:
        name, values = _parse_axis(raw)
        if name in parsed:
            raise ConfigError(f"Axis {name} given twice")
        parsed[name] = values
    rows = ablation_matrix(base, parsed, out_dir)
    click.echo(json.dumps([dataclasses.asdict(row) for row in rows]))


@cli.command()
@click.option("--log", "log_path", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="epochs.jsonl written by train")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path),
              help="Output directory (default: next to the log)")
def plot(log_path: Path, out_dir: Path | None):
    """Write labeling-evolution curves (CSV, plus PNG when matplotlib is available)."""
    records = read_epoch_log(log_path)
    written = write_labeling_evolution(records, out_dir or log_path.parent)
    click.echo(json.dumps([str(p) for p in written]))
