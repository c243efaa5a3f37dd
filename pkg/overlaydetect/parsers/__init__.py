# flake8: noqa
from .extraction import (
    ExtractionResult,
    Relation,
    TextEntity,
    parse_extraction,
    serialize_extraction,
    serialize_sections,
)
from .verdict import parse_short_answer, parse_verdict
