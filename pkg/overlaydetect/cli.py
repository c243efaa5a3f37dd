"""Command-line interface: gen-data, train-fusion, eval, compare and emit-finetune."""

import logging
import typing

import fsspec
import typer

from . import dataset, finetune, fusion_model, harness, prompting
from .config import load_model
from .errors import OverlayDetectError
from .vlm_client import build_client

logger = logging.getLogger(__name__)

app = typer.Typer(help='Detect artificial text overlays in images and compare detectors.')


def _fail(exc: Exception):
    typer.secho(f'Error: {exc}', fg=typer.colors.RED, err=True)
    raise typer.Exit(code=1)


@app.callback()
def main(verbose: bool = typer.Option(False, '--verbose', '-v', help='Log at DEBUG level.')):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


@app.command('gen-data')
def gen_data(
    spec: str = typer.Option(..., '--spec', help='YAML file describing the synthetic corpus.'),
    out: str = typer.Option(..., '--out', help='Output directory.'),
    n_jobs: int = typer.Option(1, '--n-jobs', help='Images rendered in parallel.'),
):
    """Generate a seeded synthetic corpus with token sidecars and a manifest."""
    try:
        corpus = dataset.generate_synthetic_corpus(
            load_model(spec, dataset.SyntheticSpec), out, {'n_jobs': n_jobs}
        )
    except (OverlayDetectError, OSError, ValueError) as exc:
        _fail(exc)
    for split, counts in corpus.counts.items():
        summary = ', '.join(f'{category.value}={n}' for category, n in counts.items())
        typer.echo(f'{split.value}: {summary}')
    typer.echo(f'manifest: {out.rstrip("/")}/{dataset.MANIFEST_NAME}')


@app.command('train-fusion')
def train_fusion(
    manifest: str = typer.Option(..., '--manifest', help='Manifest with a train split.'),
    config: typing.Optional[str] = typer.Option(
        None, '--config', help='YAML trainer config; defaults apply when omitted.'
    ),
    out: str = typer.Option(..., '--out', help='Checkpoint file to write (.npz).'),
):
    """Train the fused OCR/position/image classifier.

    Eval-split samples in the manifest are scored after every epoch. The per-epoch
    trace is written next to the checkpoint as ``<out>.trace.csv``.
    """
    try:
        trainer_config = (
            load_model(config, fusion_model.FusionTrainerConfig)
            if config
            else fusion_model.FusionTrainerConfig()
        )
        loaded = dataset.load_manifest(manifest)
        records = fusion_model.records_from_manifest(
            loaded.select(split=dataset.Split.train), trainer_config
        )
        eval_records = fusion_model.records_from_manifest(
            loaded.select(split=dataset.Split.eval), trainer_config
        )
        params, trace = fusion_model.train(records, trainer_config, eval_records or None)
        fusion_model.save_checkpoint(params, out)
        with fsspec.open(f'{out}.trace.csv', 'w') as f:
            trace.to_csv(f, index=False)
    except (OverlayDetectError, OSError, ValueError) as exc:
        _fail(exc)
    last = trace.iloc[-1]
    typer.echo(
        f'epoch {int(last["epoch"])}: loss={last["loss"]:.4f} accuracy={last["accuracy"]:.2f} '
        f'eval_accuracy={last["eval_accuracy"]:.2f}'
    )
    typer.echo(f'checkpoint: {out}')


@app.command('eval')
def eval_(
    strategy: prompting.Strategy = typer.Option(..., '--strategy', case_sensitive=False),
    manifest: str = typer.Option(..., '--manifest', help='Evaluation manifest.'),
    out: str = typer.Option(..., '--out', help='Machine-readable report to write (JSON).'),
    templates: typing.Optional[str] = typer.Option(
        None, '--templates', help='Prompt template directory; packaged defaults otherwise.'
    ),
    params: typing.Optional[str] = typer.Option(None, '--params', help='Fusion checkpoint.'),
    endpoint_config: typing.Optional[str] = typer.Option(None, '--endpoint-config'),
    mock_script: typing.Optional[str] = typer.Option(None, '--mock-script'),
    parallelism: int = typer.Option(1, '--parallelism', min=1),
    trace: bool = typer.Option(False, '--trace', help='Write chain transcripts.'),
    name: typing.Optional[str] = typer.Option(None, '--name', help='Row label in tables.'),
    error_policy: harness.ErrorPolicy = typer.Option(
        harness.ErrorPolicy.count_as_negative, '--error-policy'
    ),
    predictions: typing.Optional[str] = typer.Option(
        None, '--predictions', help='Prediction file; defaults to <out>.predictions.jsonl.'
    ),
):
    """Run one strategy over the eval split and write predictions and a report."""
    client = None
    try:
        loaded = dataset.load_manifest(manifest)
        if dataset.Split.eval in loaded.counts:
            loaded = loaded.select(split=dataset.Split.eval)
        if strategy == prompting.Strategy.fusion:
            checkpoint = fusion_model.load_checkpoint(params) if params else None
            template_set = None
        else:
            checkpoint = None
            client = build_client(endpoint_config=endpoint_config, mock_script=mock_script)
            template_set = (
                prompting.load_templates(templates) if templates else prompting.default_templates()
            )
        records = harness.evaluate(
            loaded,
            strategy,
            client=client,
            templates=template_set,
            params=checkpoint,
            parallelism=parallelism,
            trace_path=f'{out}.trace.jsonl' if trace else None,
        )
        harness.write_predictions(records, predictions or f'{out}.predictions.jsonl')
        report = harness.build_report(
            records,
            loaded,
            name=name,
            error_policy=error_policy,
            config={
                'strategy': strategy.value,
                'templates': templates,
                'params': params,
                'endpoint_config': endpoint_config,
                'mock_script': mock_script,
            },
        )
        harness.write_report(report, out)
    except (OverlayDetectError, OSError, ValueError) as exc:
        _fail(exc)
    finally:
        if hasattr(client, 'close'):
            client.close()
    typer.echo(harness.render_report(report), nl=False)


@app.command('compare')
def compare(
    reports: typing.List[str] = typer.Option(
        ..., '--reports', '-r', help='Report files from `eval`; repeat for each report.'
    ),
    out: typing.Optional[str] = typer.Option(None, '--out', help='Write the table here too.'),
    baseline: typing.Optional[str] = typer.Option(
        None, '--baseline', help='Row name to report relative accuracy gains against.'
    ),
):
    """Merge eval reports into one Model/Precision/Recall/Accuracy table."""
    try:
        merged = harness.merge_reports([harness.load_report(path) for path in reports])
        table = harness.render_report(merged)
        if baseline:
            table += '\n' + harness.render_gains(harness.accuracy_gain(merged, baseline), baseline)
        if out:
            with fsspec.open(out, 'w') as f:
                f.write(table)
    except (OverlayDetectError, OSError, ValueError) as exc:
        _fail(exc)
    typer.echo(table, nl=False)


@app.command('emit-finetune')
def emit_finetune(
    manifest: str = typer.Option(..., '--manifest', help='Manifest with a train split.'),
    out_config: str = typer.Option(..., '--out-config', help='Hyperparameter YAML to write.'),
    out_manifest: str = typer.Option(..., '--out-manifest', help='Instruction JSONL to write.'),
    templates: typing.Optional[str] = typer.Option(None, '--templates'),
    rationale: bool = typer.Option(False, '--rationale', help='Append a reason to each answer.'),
):
    """Write the reference fine-tuning config and the instruction-tuning manifest."""
    try:
        config = finetune.check(finetune.paper_default_config())
        template_set = (
            prompting.load_templates(templates) if templates else prompting.default_templates()
        )
        train_split = dataset.load_manifest(manifest).select(split=dataset.Split.train)
        records = finetune.emit_training_manifest(
            train_split, template_set[prompting.INSTRUCTION], out_manifest, rationale=rationale
        )
        finetune.write_config(config, out_config)
    except (OverlayDetectError, OSError, ValueError, KeyError) as exc:
        _fail(exc)
    positives = sum(record.answer.startswith('yes') for record in records)
    typer.echo(f'{len(records)} instruction records ({positives} positive) -> {out_manifest}')
    typer.echo(f'config -> {out_config}')
