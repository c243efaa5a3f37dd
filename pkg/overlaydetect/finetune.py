"""Fine-tuning artifacts for a vision-language model and the early-stopping monitor.

The weight update itself is done by an external :class:`Trainer`; this module
prepares what it consumes (a validated :class:`FinetuneConfig` and a line-delimited
instruction manifest) and watches the validation accuracy it reports per epoch.
"""

import abc
import enum
import logging
import math
import typing

import fsspec
import pydantic

from .config import dump_model, dump_yaml, load_model
from .dataset import Category, Manifest, Split
from .errors import ContractError, FinetuneConfigError, FinetuneRunError
from .metrics import BinaryLabel, category_to_binary
from .prompting import PromptTemplate, render

logger = logging.getLogger(__name__)

ANSWERS = {BinaryLabel.positive: 'yes', BinaryLabel.negative: 'no'}
RATIONALES = {
    Category.overlay: 'The image carries text composited onto it after capture.',
    Category.natural: 'The text in the image is physically part of the scene.',
    Category.none: 'The image contains no text.',
}


class Schedule(str, enum.Enum):
    cosine = 'cosine'


class Precision(str, enum.Enum):
    bf16 = 'bf16'
    fp16 = 'fp16'


class FinetuneConfig(pydantic.BaseModel):
    """Every hyperparameter of the fine-tuning recipe.

    Only types are enforced on construction; the value rules are reported by
    :func:`validate` so that a file with several problems lists all of them.
    """

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    epochs: int
    per_device_batch: int
    grad_accumulation: int
    effective_batch: int
    learning_rate: float
    schedule: Schedule
    warmup_ratio: float
    weight_decay: float
    precision: Precision
    vision_tower_frozen: bool
    llm_trainable: bool
    projector_trainable: bool
    crops_per_image: int
    gradient_checkpointing: bool
    tf32: bool
    flash_attention_v2: bool
    log_every_steps: int
    dataloader_workers: int = 2
    report_to: str = 'tensorboard'
    early_stopping_patience: int = 1


def paper_default_config() -> FinetuneConfig:
    """The reference recipe: 2 epochs, lr 2e-4 with cosine decay and 0.03 warmup, bf16."""
    return FinetuneConfig(
        epochs=2,
        per_device_batch=1,
        grad_accumulation=2,
        effective_batch=2,
        learning_rate=2e-4,
        schedule=Schedule.cosine,
        warmup_ratio=0.03,
        weight_decay=0.0,
        precision=Precision.bf16,
        vision_tower_frozen=True,
        llm_trainable=True,
        projector_trainable=True,
        crops_per_image=16,
        gradient_checkpointing=True,
        tf32=True,
        flash_attention_v2=False,
        log_every_steps=1,
        dataloader_workers=2,
        report_to='tensorboard',
        early_stopping_patience=1,
    )


def validate(config: FinetuneConfig) -> typing.List[str]:
    """Return the list of rule violations; an empty list means the config is usable."""
    violations = []
    product = config.per_device_batch * config.grad_accumulation
    if config.effective_batch != product:
        violations.append(
            f'effective_batch ({config.effective_batch}) must equal per_device_batch x '
            f'grad_accumulation ({config.per_device_batch} x {config.grad_accumulation} '
            f'= {product})'
        )
    if not 0.0 <= config.warmup_ratio <= 1.0:
        violations.append(f'warmup_ratio ({config.warmup_ratio}) must lie in [0, 1]')
    if config.precision not in set(Precision):
        violations.append(f'precision ({config.precision!r}) must be exactly one of bf16, fp16')
    positive = (
        'epochs',
        'per_device_batch',
        'grad_accumulation',
        'crops_per_image',
        'log_every_steps',
    )
    for name in positive:
        if getattr(config, name) < 1:
            violations.append(f'{name} ({getattr(config, name)}) must be positive')
    if not (config.learning_rate > 0 and math.isfinite(config.learning_rate)):
        violations.append(f'learning_rate ({config.learning_rate}) must be positive')
    for name in ('weight_decay', 'dataloader_workers', 'early_stopping_patience'):
        if getattr(config, name) < 0:
            violations.append(f'{name} ({getattr(config, name)}) must not be negative')
    return violations


def check(config: FinetuneConfig) -> FinetuneConfig:
    violations = validate(config)
    if violations:
        raise FinetuneConfigError(violations)
    return config


def config_to_yaml(config: FinetuneConfig) -> str:
    return dump_yaml(config)


def write_config(config: FinetuneConfig, path: str, **storage_options) -> str:
    return dump_model(config, path, **storage_options)


def load_config(path: str, **storage_options) -> FinetuneConfig:
    """Read a config file; unknown keys are rejected, value rules are not checked here."""
    return load_model(path, FinetuneConfig, **storage_options)


def to_trainer_arguments(config: FinetuneConfig) -> typing.Dict[str, typing.Any]:
    """Map the config to the argument names conventional training scripts expect."""
    return {
        'num_train_epochs': config.epochs,
        'per_device_train_batch_size': config.per_device_batch,
        'gradient_accumulation_steps': config.grad_accumulation,
        'learning_rate': config.learning_rate,
        'lr_scheduler_type': config.schedule.value,
        'warmup_ratio': config.warmup_ratio,
        'weight_decay': config.weight_decay,
        'bf16': config.precision == Precision.bf16,
        'fp16': config.precision == Precision.fp16,
        'tf32': config.tf32,
        'gradient_checkpointing': config.gradient_checkpointing,
        'logging_steps': config.log_every_steps,
        'dataloader_num_workers': config.dataloader_workers,
        'report_to': config.report_to,
        'freeze_vision_tower': config.vision_tower_frozen,
        'tune_llm': config.llm_trainable,
        'tune_img_projector': config.projector_trainable,
        'num_crops': config.crops_per_image,
        'use_flash_attention_2': config.flash_attention_v2,
    }


class InstructionRecord(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    image_path: str
    instruction: str
    answer: str


def answer_for(category: Category, rationale: bool = False) -> str:
    answer = ANSWERS[category_to_binary(category)]
    return f'{answer}. {RATIONALES[Category(category)]}' if rationale else answer


def emit_training_manifest(
    manifest: Manifest,
    template: PromptTemplate,
    path: typing.Optional[str] = None,
    rationale: bool = False,
    **storage_options,
) -> typing.List[InstructionRecord]:
    """Build one instruction record per sample and optionally write them as JSON lines.

    Parameters
    ----------
    manifest : Manifest
        Training samples only.
    template : PromptTemplate
        The instruction prompt; it must not need any binding.
    path : str, optional
        Where to write the line-delimited records. Nothing is written when omitted.
    rationale : bool, optional
        Follow the yes/no answer with a one-sentence reason. Default is False.

    Raises
    ------
    ContractError
        The manifest holds eval-split samples.
    """
    held_out = [s.id for s in manifest.samples if s.split != Split.train]
    if held_out:
        raise ContractError(
            f'instruction manifests take training samples only, got eval samples {held_out[:5]}'
        )
    instruction = render(template, {})
    records = [
        InstructionRecord(
            image_path=manifest.resolve(sample),
            instruction=instruction,
            answer=answer_for(sample.category, rationale),
        )
        for sample in manifest.samples
    ]
    if path is not None:
        with fsspec.open(str(path), 'w', **storage_options) as f:
            f.write(''.join(f'{record.model_dump_json()}\n' for record in records))
        logger.info('Wrote %d instruction records to %s', len(records), path)
    return records


class EarlyStopState(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    best_metric: typing.Optional[float] = None
    best_epoch: int = 0
    patience: int = pydantic.Field(1, ge=0)
    epochs_since_best: int = 0
    stopped: bool = False
    last_epoch: int = 0


def early_stop_update(state: EarlyStopState, epoch: int, val_accuracy: float) -> EarlyStopState:
    """Fold one epoch's validation accuracy into ``state``.

    Only a strictly better accuracy counts as improvement. The run stops once
    ``epochs_since_best`` exceeds ``patience``.
    """
    if not 0.0 <= val_accuracy <= 1.0:
        raise ContractError(f'val_accuracy {val_accuracy} is outside [0, 1]')
    if epoch <= state.last_epoch:
        raise ContractError(f'epoch {epoch} does not follow epoch {state.last_epoch}')
    if state.stopped:
        raise ContractError(f'training already stopped after epoch {state.last_epoch}')
    if state.best_metric is None or val_accuracy > state.best_metric:
        update = {'best_metric': val_accuracy, 'best_epoch': epoch, 'epochs_since_best': 0}
    else:
        update = {'epochs_since_best': state.epochs_since_best + 1}
    state = state.model_copy(update={**update, 'last_epoch': epoch})
    if state.epochs_since_best > state.patience:
        state = state.model_copy(update={'stopped': True})
    return state


class TrainerRequest(pydantic.BaseModel):
    config: FinetuneConfig
    manifest_path: str
    trainer_arguments: typing.Dict[str, typing.Any]


class EpochReport(pydantic.BaseModel):
    epoch: int
    val_accuracy: float


class TrainerCompletion(pydantic.BaseModel):
    checkpoint: str
    diagnostics: typing.Dict[str, typing.Any] = pydantic.Field(default_factory=dict)


class Trainer(abc.ABC):
    """Boundary to the system that actually updates the model weights.

    ``fit`` trains on ``request.manifest_path`` with ``request.config``, calls
    ``on_epoch`` after every epoch and stops as soon as it returns False. A failed
    run raises :class:`~overlaydetect.errors.FinetuneRunError` carrying diagnostics.
    """

    @abc.abstractmethod
    def fit(
        self, request: TrainerRequest, on_epoch: typing.Callable[[EpochReport], bool]
    ) -> TrainerCompletion:
        ...


class ScriptedTrainer(Trainer):
    """Test double that replays a fixed validation-accuracy sequence."""

    def __init__(
        self,
        accuracies: typing.Sequence[float],
        *,
        fail_at_epoch: typing.Optional[int] = None,
        diagnostics: typing.Optional[typing.Dict[str, typing.Any]] = None,
        checkpoint_prefix: str = 'scripted://checkpoints',
    ):
        self.accuracies = list(accuracies)
        self.fail_at_epoch = fail_at_epoch
        self.diagnostics = diagnostics or {}
        self.checkpoint_prefix = checkpoint_prefix
        self.requests: typing.List[TrainerRequest] = []

    @property
    def calls(self) -> int:
        return len(self.requests)

    def fit(self, request, on_epoch):
        self.requests.append(request)
        last = 0
        for epoch, accuracy in enumerate(self.accuracies[: request.config.epochs], start=1):
            if epoch == self.fail_at_epoch:
                raise FinetuneRunError(
                    f'scripted failure at epoch {epoch}', diagnostics=self.diagnostics
                )
            last = epoch
            if not on_epoch(EpochReport(epoch=epoch, val_accuracy=accuracy)):
                break
        return TrainerCompletion(checkpoint=f'{self.checkpoint_prefix}/epoch-{last}')


class RunSummary(pydantic.BaseModel):
    val_accuracy: typing.List[float]
    best_epoch: int
    best_val_accuracy: float
    stop_epoch: int
    stopped_early: bool
    checkpoint: str


def run_finetune(config: FinetuneConfig, manifest_path: str, trainer: Trainer) -> RunSummary:
    """Validate, hand the job to ``trainer`` and apply early stopping to its reports.

    Raises
    ------
    FinetuneConfigError
        ``config`` breaks a rule; the trainer is not contacted.
    FileNotFoundError
        ``manifest_path`` does not exist.
    FinetuneRunError
        The trainer failed; ``diagnostics`` carries its details.
    """
    check(config)
    fs, raw_path = fsspec.core.url_to_fs(str(manifest_path))
    if not fs.exists(raw_path):
        raise FileNotFoundError(f'training manifest {manifest_path} does not exist')

    state = EarlyStopState(patience=config.early_stopping_patience)
    accuracies = []

    def on_epoch(report: EpochReport) -> bool:
        nonlocal state
        state = early_stop_update(state, report.epoch, report.val_accuracy)
        accuracies.append(report.val_accuracy)
        logger.info(
            'epoch %d: val_accuracy=%.4f (best %.4f at epoch %d)',
            report.epoch,
            report.val_accuracy,
            state.best_metric,
            state.best_epoch,
        )
        return not state.stopped

    request = TrainerRequest(
        config=config,
        manifest_path=str(manifest_path),
        trainer_arguments=to_trainer_arguments(config),
    )
    try:
        completion = trainer.fit(request, on_epoch)
    except (FinetuneRunError, ContractError):
        raise
    except Exception as exc:
        raise FinetuneRunError(f'trainer failed: {exc}', diagnostics={'error': repr(exc)}) from exc
    if not accuracies:
        raise FinetuneRunError(
            'trainer finished without reporting an epoch', diagnostics=completion.diagnostics
        )
    if state.stopped:
        logger.info('Early stopping after epoch %d', state.last_epoch)
    return RunSummary(
        val_accuracy=accuracies,
        best_epoch=state.best_epoch,
        best_val_accuracy=state.best_metric,
        stop_epoch=state.last_epoch,
        stopped_early=state.stopped,
        checkpoint=completion.checkpoint,
    )
