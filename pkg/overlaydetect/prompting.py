"""Prompt-based overlay detection: single-shot, two-stage sequential and fine-tuned.

All strategies talk to a :class:`~overlaydetect.vlm_client.VlmClient` and parse its
free-text replies with :mod:`overlaydetect.parsers`.
"""

import enum
import logging
import pathlib
import posixpath
import string
import typing

import fsspec
import pydantic
import yaml

from .errors import ContractError, OverlayDetectError, RenderError
from .metrics import BinaryLabel
from .parsers import (
    ExtractionResult,
    parse_extraction,
    parse_short_answer,
    parse_verdict,
    serialize_extraction,
    serialize_sections,
)
from .vlm_client import VlmClient, VlmRequest

logger = logging.getLogger(__name__)

TEMPLATES_DIR = pathlib.Path(__file__).parent / 'templates'
ZERO_SHOT = 'zero_shot'
STAGE1 = 'sequential_stage1'
STAGE2 = 'sequential_stage2'
INSTRUCTION = 'finetune_instruction'
STAGE2_PLACEHOLDERS = frozenset({'objects', 'texts', 'relations'})


class Strategy(str, enum.Enum):
    zero_shot = 'zero_shot'
    sequential = 'sequential'
    fusion = 'fusion'
    finetuned = 'finetuned'


class OverlayVerdict(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    label: BinaryLabel
    # prompt-based strategies have no calibrated score and report 1.0
    confidence: float = pydantic.Field(1.0, ge=0.0, le=1.0)
    overlay_texts: typing.List[str] = pydantic.Field(default_factory=list)
    evidence: str = ''
    strategy: Strategy


def placeholders(body: str) -> typing.FrozenSet[str]:
    names = set()
    for _, field, _, _ in string.Formatter().parse(body):
        if field:
            names.add(field.split('.')[0].split('[')[0])
    return frozenset(names)


class PromptTemplate(pydantic.BaseModel):
    """A prompt body with ``{name}`` placeholders.

    ``required_placeholders`` defaults to every placeholder in the body.
    """

    model_config = pydantic.ConfigDict(frozen=True)

    name: str
    body: str
    required_placeholders: typing.FrozenSet[str] = None

    @pydantic.model_validator(mode='after')
    def _default_required(self):
        if self.required_placeholders is None:
            object.__setattr__(self, 'required_placeholders', placeholders(self.body))
        return self

    @property
    def placeholders(self) -> typing.FrozenSet[str]:
        return placeholders(self.body)


class _Bindings(dict):
    def __missing__(self, key):
        return ''


def render(template: PromptTemplate, bindings: typing.Mapping[str, str]) -> str:
    missing = sorted(template.required_placeholders - set(bindings))
    if missing:
        raise RenderError(missing[0], template.name)
    return string.Formatter().vformat(template.body, (), _Bindings(bindings))


def load_templates(directory: str, **storage_options) -> typing.Dict[str, PromptTemplate]:
    """Load every ``*.txt`` file in ``directory`` as a template named after its stem.

    An optional ``templates.yaml`` maps template names to ``{optional: [names]}``;
    placeholders listed there render empty when unbound.
    """
    directory = str(directory).rstrip('/')
    fs, root = fsspec.core.url_to_fs(directory, **storage_options)
    optional = {}
    settings = posixpath.join(root, 'templates.yaml')
    if fs.exists(settings):
        with fs.open(settings, 'r') as f:
            optional = {
                name: set((entry or {}).get('optional', []))
                for name, entry in (yaml.safe_load(f) or {}).items()
            }
    templates = {}
    for path in sorted(fs.glob(posixpath.join(root, '*.txt'))):
        name = posixpath.splitext(posixpath.basename(path))[0]
        with fs.open(path, 'r') as f:
            body = f.read()
        templates[name] = PromptTemplate(
            name=name,
            body=body,
            required_placeholders=placeholders(body) - optional.get(name, set()),
        )
    if not templates:
        raise ContractError(f'no *.txt templates found in {directory}')
    return templates


def default_templates() -> typing.Dict[str, PromptTemplate]:
    return load_templates(str(TEMPLATES_DIR))


class TranscriptStep(pydantic.BaseModel):
    stage: str
    request_id: str
    prompt: str
    response: typing.Optional[str] = None
    error: typing.Optional[str] = None


class Transcript(pydantic.BaseModel):
    """Audit trail of one detection: every request, raw response and the outcome."""

    image_id: str
    strategy: Strategy
    steps: typing.List[TranscriptStep] = pydantic.Field(default_factory=list)
    extraction: typing.Optional[ExtractionResult] = None
    verdict: typing.Optional[OverlayVerdict] = None
    error: typing.Optional[str] = None


def _ask(
    client: VlmClient,
    image: bytes,
    image_id: str,
    prompt: str,
    stage: str,
    transcript: typing.Optional[Transcript],
    image_format: str,
) -> str:
    request = VlmRequest(image=image, image_format=image_format, image_id=image_id, prompt=prompt)
    step = TranscriptStep(stage=stage, request_id=request.request_id, prompt=prompt)
    try:
        response = client.complete(request)
    except OverlayDetectError as exc:
        if transcript is not None:
            failed = step.model_copy(update={'error': f'{type(exc).__name__}: {exc}'})
            transcript.steps.append(failed)
        raise
    if transcript is not None:
        transcript.steps.append(step.model_copy(update={'response': response.text}))
    return response.text


def _verdict(text: str, strategy: Strategy, parser=parse_verdict) -> OverlayVerdict:
    label, overlay_texts = parser(text)
    return OverlayVerdict(
        label=label, overlay_texts=overlay_texts, evidence=text, strategy=strategy
    )


def detect_zero_shot(
    image: bytes,
    image_id: str,
    client: VlmClient,
    template: PromptTemplate,
    transcript: typing.Optional[Transcript] = None,
    image_format: str = 'png',
) -> OverlayVerdict:
    """Ask the model once whether ``image`` carries an artificial overlay."""
    text = _ask(client, image, image_id, render(template, {}), 'single', transcript, image_format)
    verdict = _verdict(text, Strategy.zero_shot)
    if transcript is not None:
        transcript.verdict = verdict
    return verdict


def extract_scene(
    image: bytes,
    image_id: str,
    client: VlmClient,
    template: PromptTemplate,
    transcript: typing.Optional[Transcript] = None,
    image_format: str = 'png',
) -> ExtractionResult:
    """Stage 1: list objects, texts and their relations.

    Transport errors propagate; a missing or corrupt block yields a result flagged
    ``malformed`` instead of an exception.
    """
    text = _ask(client, image, image_id, render(template, {}), 'extract', transcript, image_format)
    extraction = parse_extraction(text, image_id)
    if extraction.malformed:
        logger.warning('Stage-1 extraction for %s is malformed', image_id)
    if transcript is not None:
        transcript.extraction = extraction
    return extraction


def detect_sequential(
    image: bytes,
    image_id: str,
    client: VlmClient,
    stage1: PromptTemplate,
    stage2: PromptTemplate,
    transcript: typing.Optional[Transcript] = None,
    image_format: str = 'png',
) -> typing.Tuple[OverlayVerdict, ExtractionResult]:
    """Two-stage chain: extract the scene, then decide with the extraction as context.

    Both requests carry the same image bytes. A stage-1 transport failure aborts the
    chain before any stage-2 request is made.
    """
    missing = STAGE2_PLACEHOLDERS - stage2.placeholders
    if missing:
        raise ContractError(
            f'stage-2 template {stage2.name!r} lacks placeholders {sorted(missing)}'
        )
    extraction = extract_scene(image, image_id, client, stage1, transcript, image_format)
    bindings = {**serialize_sections(extraction), 'extraction': serialize_extraction(extraction)}
    prompt = render(stage2, bindings)
    text = _ask(client, image, image_id, prompt, 'decide', transcript, image_format)
    verdict = _verdict(text, Strategy.sequential)
    if transcript is not None:
        transcript.verdict = verdict
    return verdict, extraction


def detect_finetuned(
    image: bytes,
    image_id: str,
    client: VlmClient,
    template: PromptTemplate,
    transcript: typing.Optional[Transcript] = None,
    image_format: str = 'png',
) -> OverlayVerdict:
    """Query a fine-tuned model with its instruction prompt.

    The reply may use the ``ANSWER:`` markers or start with a bare yes/no, the
    answer format of the instruction-tuning manifest.
    """
    text = _ask(client, image, image_id, render(template, {}), 'single', transcript, image_format)
    verdict = _verdict(text, Strategy.finetuned, parser=parse_short_answer)
    if transcript is not None:
        transcript.verdict = verdict
    return verdict
