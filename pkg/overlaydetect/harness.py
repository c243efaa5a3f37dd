"""Run a detection strategy over a manifest, score it and render comparison tables."""

import datetime
import enum
import hashlib
import json
import logging
import posixpath
import typing
import warnings

import fsspec
import joblib
import pydantic

from . import prompting
from .dataset import Category, ImageSample, Manifest
from .errors import ContractError, OverlayDetectError, error_tag
from .fusion_model import FusionParams, detect_fusion, record_from_sample
from .metrics import (
    BinaryLabel,
    MetricReport,
    category_to_binary,
    confusion,
    format_metric,
    positive_rate_by_category,
    summarize,
)
from .ocr import OcrEngine
from .prompting import OverlayVerdict, PromptTemplate, Strategy, Transcript
from .vlm_client import VlmClient

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = '1'
TABLE_COLUMNS = ('Model', 'Precision', 'Recall', 'Accuracy')
DISPLAY_NAMES = {
    Strategy.finetuned: 'Fine-tuned LLM',
    Strategy.zero_shot: 'Pre-trained LLM',
    Strategy.sequential: 'Pre-trained LLM, seq re-prompting',
    Strategy.fusion: 'Traditional CNN model',
}
REQUIRED_TEMPLATES = {
    Strategy.zero_shot: (prompting.ZERO_SHOT,),
    Strategy.sequential: (prompting.STAGE1, prompting.STAGE2),
    Strategy.finetuned: (prompting.INSTRUCTION,),
    Strategy.fusion: (),
}


class ErrorPolicy(str, enum.Enum):
    count_as_negative = 'count_as_negative'
    exclude = 'exclude'


class ReportFormat(str, enum.Enum):
    table_text = 'table_text'
    machine = 'machine'


class PredictionRecord(pydantic.BaseModel):
    """The outcome for one image: a verdict, or the tag and message of the error."""

    model_config = pydantic.ConfigDict(frozen=True)

    image_id: str
    strategy: Strategy
    verdict: typing.Optional[OverlayVerdict] = None
    truth_category: Category
    truth_binary: BinaryLabel
    error: typing.Optional[str] = None
    error_detail: typing.Optional[str] = None

    @pydantic.model_validator(mode='after')
    def _check(self):
        if (self.verdict is None) == (self.error is None):
            raise ValueError('exactly one of verdict and error must be set')
        if self.truth_binary != category_to_binary(self.truth_category):
            raise ValueError('truth_binary does not match truth_category')
        return self

    @classmethod
    def from_verdict(
        cls, sample: ImageSample, strategy: Strategy, verdict: OverlayVerdict
    ) -> 'PredictionRecord':
        return cls(
            image_id=sample.id,
            strategy=strategy,
            verdict=verdict,
            truth_category=sample.category,
            truth_binary=category_to_binary(sample.category),
        )

    @classmethod
    def from_error(
        cls, sample: ImageSample, strategy: Strategy, exc: BaseException
    ) -> 'PredictionRecord':
        return cls(
            image_id=sample.id,
            strategy=strategy,
            truth_category=sample.category,
            truth_binary=category_to_binary(sample.category),
            error=error_tag(exc),
            error_detail=str(exc),
        )


Detector = typing.Callable[[Manifest, ImageSample, typing.Optional[Transcript]], OverlayVerdict]
# failures confined to one sample; anything else aborts the run
SAMPLE_ERRORS = (OverlayDetectError, OSError, UnicodeError, pydantic.ValidationError)


def _read_image(manifest: Manifest, sample: ImageSample) -> typing.Tuple[bytes, str]:
    path = manifest.resolve(sample)
    with fsspec.open(path, 'rb') as f:
        data = f.read()
    suffix = posixpath.splitext(path)[1].lstrip('.').lower()
    return data, suffix or 'png'


def make_detector(
    strategy: Strategy,
    *,
    client: typing.Optional[VlmClient] = None,
    templates: typing.Optional[typing.Mapping[str, PromptTemplate]] = None,
    params: typing.Optional[FusionParams] = None,
    ocr: typing.Optional[OcrEngine] = None,
) -> Detector:
    """Bind ``strategy`` to its dependencies.

    Raises
    ------
    ContractError
        A dependency the strategy needs is missing.
    """
    strategy = Strategy(strategy)
    if strategy == Strategy.fusion:
        if params is None:
            raise ContractError('the fusion strategy needs trained parameters (--params)')
        params.check()

        def detect(manifest, sample, transcript):
            record = record_from_sample(manifest, sample, params.config, ocr)
            verdict = detect_fusion(params, record)
            if transcript is not None:
                transcript.verdict = verdict
            return verdict

        return detect

    if client is None:
        raise ContractError(f'the {strategy.value} strategy needs a model client')
    templates = templates or {}
    missing = [name for name in REQUIRED_TEMPLATES[strategy] if name not in templates]
    if missing:
        raise ContractError(f'the {strategy.value} strategy needs templates {missing}')

    def detect(manifest, sample, transcript):
        image, image_format = _read_image(manifest, sample)
        if strategy == Strategy.sequential:
            verdict, _ = prompting.detect_sequential(
                image,
                sample.id,
                client,
                templates[prompting.STAGE1],
                templates[prompting.STAGE2],
                transcript,
                image_format,
            )
            return verdict
        if strategy == Strategy.zero_shot:
            return prompting.detect_zero_shot(
                image, sample.id, client, templates[prompting.ZERO_SHOT], transcript, image_format
            )
        return prompting.detect_finetuned(
            image, sample.id, client, templates[prompting.INSTRUCTION], transcript, image_format
        )

    return detect


def _run_one(
    detector: Detector, manifest: Manifest, sample: ImageSample, strategy: Strategy, trace: bool
) -> typing.Tuple[PredictionRecord, typing.Optional[Transcript]]:
    transcript = Transcript(image_id=sample.id, strategy=strategy) if trace else None
    try:
        verdict = detector(manifest, sample, transcript)
    except SAMPLE_ERRORS as exc:
        logger.debug('%s failed on %s: %s', strategy.value, sample.id, exc)
        if transcript is not None:
            transcript.error = f'{error_tag(exc)}: {exc}'
        return PredictionRecord.from_error(sample, strategy, exc), transcript
    return PredictionRecord.from_verdict(sample, strategy, verdict), transcript


def write_jsonl(models: typing.Iterable[pydantic.BaseModel], path: str, **storage_options) -> str:
    with fsspec.open(str(path), 'w', **storage_options) as f:
        f.write(''.join(f'{model.model_dump_json()}\n' for model in models))
    return str(path)


@pydantic.validate_call(config=pydantic.ConfigDict(arbitrary_types_allowed=True))
def evaluate(
    manifest: Manifest,
    strategy: Strategy,
    *,
    client: typing.Optional[VlmClient] = None,
    templates: typing.Optional[typing.Dict[str, PromptTemplate]] = None,
    params: typing.Optional[FusionParams] = None,
    ocr: typing.Optional[OcrEngine] = None,
    parallelism: pydantic.PositiveInt = 1,
    trace_path: typing.Optional[str] = None,
) -> typing.List[PredictionRecord]:
    """Run ``strategy`` on every sample of ``manifest``.

    Parameters
    ----------
    manifest : Manifest
        Samples to evaluate, normally the eval split.
    strategy : Strategy
        Which detector to run.
    client, templates
        Model client and prompt templates of the prompt-based strategies.
    params : FusionParams, optional
        Trained weights of the fusion strategy.
    ocr : OcrEngine, optional
        Token source of the fusion strategy. Default reads ``.tokens`` sidecars.
    parallelism : int, optional
        Number of images processed concurrently. Default is 1.
    trace_path : str, optional
        Write one chain transcript per image to this line-delimited file.

    Returns
    -------
    list of PredictionRecord
        In manifest order. A sample that fails becomes an error record; it never
        aborts the run.
    """
    if not len(manifest):
        raise ContractError('cannot evaluate an empty manifest')
    detector = make_detector(strategy, client=client, templates=templates, params=params, ocr=ocr)
    trace = trace_path is not None
    logger.info(
        'Evaluating %s on %d samples with parallelism %d',
        strategy.value,
        len(manifest),
        parallelism,
    )
    results = joblib.Parallel(n_jobs=parallelism, backend='threading')(
        joblib.delayed(_run_one)(detector, manifest, sample, strategy, trace)
        for sample in manifest.samples
    )
    records = [record for record, _ in results]
    failed = [record for record in records if record.error is not None]
    if failed:
        tags = sorted({record.error for record in failed})
        warnings.warn(
            f'{len(failed)} of {len(records)} samples could not be evaluated ({", ".join(tags)}). '
            'They are kept as error records.',
            stacklevel=2,
        )
    if trace:
        write_jsonl((transcript for _, transcript in results), trace_path)
    logger.info('Finished %s: %d of %d samples failed', strategy.value, len(failed), len(records))
    return records


def write_predictions(records: typing.Sequence[PredictionRecord], path: str, **storage_options):
    return write_jsonl(records, path, **storage_options)


def read_predictions(path: str, **storage_options) -> typing.List[PredictionRecord]:
    with fsspec.open(str(path), 'r', **storage_options) as f:
        return [PredictionRecord.model_validate_json(line) for line in f if line.strip()]


def _scored(records, error_policy):
    predictions, truths, categories = [], [], []
    for record in records:
        if record.error is not None:
            if error_policy == ErrorPolicy.exclude:
                continue
            predictions.append(BinaryLabel.negative)
        else:
            predictions.append(record.verdict.label)
        truths.append(record.truth_binary)
        categories.append(record.truth_category)
    return predictions, truths, categories


def score(
    records: typing.Sequence[PredictionRecord],
    error_policy: ErrorPolicy = ErrorPolicy.count_as_negative,
) -> MetricReport:
    """Precision, recall and accuracy of ``records``.

    Error records count as negative predictions, or are left out with
    ``error_policy='exclude'``; ``n`` reports how many records were scored.
    """
    if not records:
        raise ContractError('no prediction records to score')
    predictions, truths, _ = _scored(records, ErrorPolicy(error_policy))
    if not predictions:
        raise ContractError('every record is an error; nothing left to score')
    return summarize(confusion(predictions, truths))


class ComparisonRow(pydantic.BaseModel):
    name: str
    strategy: typing.Optional[Strategy] = None
    report: MetricReport
    errors: int = 0
    positive_rate: typing.Dict[str, float] = pydantic.Field(default_factory=dict)


class ComparisonReport(pydantic.BaseModel):
    schema_version: str = REPORT_SCHEMA_VERSION
    rows: typing.List[ComparisonRow] = pydantic.Field(min_length=1)
    fingerprint: str
    metadata: typing.Dict[str, typing.Any] = pydantic.Field(default_factory=dict)


def config_hash(config: typing.Mapping[str, typing.Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def build_report(
    records: typing.Sequence[PredictionRecord],
    manifest: Manifest,
    *,
    name: typing.Optional[str] = None,
    error_policy: ErrorPolicy = ErrorPolicy.count_as_negative,
    config: typing.Optional[typing.Mapping[str, typing.Any]] = None,
) -> ComparisonReport:
    """Score ``records`` into a one-row report stamped with the manifest fingerprint."""
    error_policy = ErrorPolicy(error_policy)
    strategies = {record.strategy for record in records}
    strategy = strategies.pop() if len(strategies) == 1 else None
    predictions, _, categories = _scored(records, error_policy)
    row = ComparisonRow(
        name=name or (DISPLAY_NAMES[strategy] if strategy else 'unnamed'),
        strategy=strategy,
        report=score(records, error_policy),
        errors=sum(record.error is not None for record in records),
        positive_rate=positive_rate_by_category(predictions, categories),
    )
    config = dict(config or {})
    return ComparisonReport(
        rows=[row],
        fingerprint=manifest.fingerprint(),
        metadata={
            'created': datetime.datetime.now(datetime.timezone.utc).isoformat(),
            'config_hash': config_hash(config),
            'config': config,
            'error_policy': error_policy.value,
            'n_samples': len(records),
        },
    )


def render_table(report: ComparisonReport) -> str:
    cells = [list(TABLE_COLUMNS)]
    for row in report.rows:
        metrics = row.report
        cells.append(
            [
                row.name,
                format_metric(metrics.precision),
                format_metric(metrics.recall),
                format_metric(metrics.accuracy),
            ]
        )
    widths = [max(len(line[i]) for line in cells) for i in range(len(TABLE_COLUMNS))]

    def line(values):
        return '| ' + ' | '.join(v.ljust(w) for v, w in zip(values, widths)) + ' |'

    rendered = [line(cells[0]), line(['-' * w for w in widths])]
    rendered.extend(line(values) for values in cells[1:])
    return '\n'.join(rendered) + '\n'


def render_report(report: ComparisonReport, format: ReportFormat = ReportFormat.table_text) -> str:
    """Render ``report`` as a Model/Precision/Recall/Accuracy table or as JSON.

    The table shows two decimals and ``—`` for undefined values; the machine format
    keeps full precision, the confusion matrices and the metadata.
    """
    if ReportFormat(format) == ReportFormat.machine:
        return report.model_dump_json(indent=2) + '\n'
    return render_table(report)


def write_report(report: ComparisonReport, path: str, **storage_options) -> str:
    with fsspec.open(str(path), 'w', **storage_options) as f:
        f.write(render_report(report, ReportFormat.machine))
    return str(path)


def load_report(path: str, **storage_options) -> ComparisonReport:
    with fsspec.open(str(path), 'r', **storage_options) as f:
        return ComparisonReport.model_validate_json(f.read())


def merge_reports(reports: typing.Sequence[ComparisonReport]) -> ComparisonReport:
    """Stack the rows of several reports; warns when they were run on different data."""
    if not reports:
        raise ContractError('no reports to merge')
    fingerprints = list(dict.fromkeys(report.fingerprint for report in reports))
    if len(fingerprints) > 1:
        warnings.warn(
            f'Comparing reports computed on {len(fingerprints)} different datasets; '
            'rows are not directly comparable.',
            stacklevel=2,
        )
    return ComparisonReport(
        rows=[row for report in reports for row in report.rows],
        fingerprint=fingerprints[0],
        metadata={
            'fingerprints': fingerprints,
            'sources': [report.metadata for report in reports],
        },
    )


def accuracy_gain(report: ComparisonReport, baseline: str) -> typing.Dict[str, float]:
    """Relative accuracy change of every other row over the row named ``baseline``."""
    rows = {row.name: row for row in report.rows}
    if baseline not in rows:
        raise ContractError(f'no row named {baseline!r}; rows are {sorted(rows)}')
    reference = rows[baseline].report.accuracy
    if reference == 0:
        raise ContractError(f'baseline {baseline!r} has zero accuracy')
    return {
        row.name: (row.report.accuracy - reference) / reference
        for row in report.rows
        if row.name != baseline
    }


def render_gains(gains: typing.Mapping[str, float], baseline: str) -> str:
    return ''.join(
        f'{name}: {gain:+.1%} accuracy relative to {baseline}\n' for name, gain in gains.items()
    )
