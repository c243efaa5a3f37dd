import typing

from ..errors import VerdictError
from ..metrics import BinaryLabel
from .utilities import extract_attr_with_regex, parse_bracketed_list

ANSWER_LINE_REGEX = r'(?m)^[ \t]*answer[ \t]*:[ \t]*([A-Za-z]+)'
ANSWER_REGEX = r'\banswer\s*:\s*([A-Za-z]+)'
OVERLAY_REGEX = r'\boverlay\s*:\s*\[([^\]]*)\]'
LEADING_TOKEN_REGEX = r'^\W*([A-Za-z]+)'

_LABELS = {'yes': BinaryLabel.positive, 'no': BinaryLabel.negative}


def parse_verdict(text: str) -> typing.Tuple[BinaryLabel, typing.List[str]]:
    """Read the ``ANSWER:`` / ``OVERLAY:`` markers out of a model response.

    The first line beginning with ``ANSWER:`` (any case) decides, falling back to the
    first ``ANSWER:`` marker inside a line when no line starts with one. ``yes`` is
    positive, ``no`` negative. An ``OVERLAY: [...]`` list supplies the flagged strings
    of a positive answer. Everything else is ignored.

    Raises
    ------
    VerdictError
        No ``ANSWER:`` marker, or its token is not yes/no. ``raw`` holds the text.
    """
    if not isinstance(text, str):
        raise VerdictError('response is not text', raw=repr(text))
    token = extract_attr_with_regex(text, ANSWER_LINE_REGEX, select='first')
    if token is None:
        token = extract_attr_with_regex(text, ANSWER_REGEX, select='first')
    if token is None:
        raise VerdictError('no ANSWER marker in response', raw=text)
    label = _LABELS.get(token.lower())
    if label is None:
        raise VerdictError(f'ANSWER token {token!r} is not yes or no', raw=text)
    if label is BinaryLabel.negative:
        return label, []
    listed = extract_attr_with_regex(text, OVERLAY_REGEX, select='first')
    return label, parse_bracketed_list(listed) if listed else []


def parse_short_answer(text: str) -> typing.Tuple[BinaryLabel, typing.List[str]]:
    """Like :func:`parse_verdict`, but also accept a bare leading ``yes``/``no``.

    This is the answer format of the instruction-tuning manifest, so fine-tuned
    models may reply either way.
    """
    if not isinstance(text, str):
        raise VerdictError('response is not text', raw=repr(text))
    if extract_attr_with_regex(text, ANSWER_REGEX, select='first'):
        return parse_verdict(text)
    token = extract_attr_with_regex(text, LEADING_TOKEN_REGEX, select='first')
    label = _LABELS.get(token.lower()) if token else None
    if label is None:
        raise VerdictError('response does not start with yes or no', raw=str(text))
    return label, []
