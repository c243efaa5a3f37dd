#!/usr/bin/env python
# flake8: noqa
"""Top-level module for overlaydetect."""
from importlib.metadata import PackageNotFoundError, version

from .dataset import (
    Category,
    ImageSample,
    Manifest,
    Split,
    SyntheticSpec,
    build_balanced_manifest,
    generate_synthetic_corpus,
    load_manifest,
)
from .finetune import (
    FinetuneConfig,
    early_stop_update,
    emit_training_manifest,
    paper_default_config,
    run_finetune,
    validate,
)
from .fusion_model import (
    FusionParams,
    FusionTrainerConfig,
    OcrToken,
    TrainRecord,
    detect_fusion,
    encode_positions,
    forward,
    loss_and_grad,
    train,
)
from .harness import ComparisonReport, PredictionRecord, evaluate, render_report, score
from .metrics import (
    BinaryLabel,
    ConfusionMatrix,
    MetricReport,
    category_to_binary,
    confusion,
    summarize,
)
from .parsers import parse_verdict
from .prompting import (
    ExtractionResult,
    OverlayVerdict,
    PromptTemplate,
    Strategy,
    detect_finetuned,
    detect_sequential,
    detect_zero_shot,
    extract_scene,
    render,
)
from .vlm_client import ScriptedVlmClient, VlmClient, VlmRequest, VlmResponse, load_script

try:
    __version__ = version(__name__)
except PackageNotFoundError:
    # package is not installed
    __version__ = '0.0.0'
