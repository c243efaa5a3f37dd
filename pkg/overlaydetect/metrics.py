"""Binary overlay-detection metrics.

The positive class is exclusively "artificial overlay present". Images with natural
scene text are negatives, as are images without text.
"""

import enum
import operator
import typing

import numpy as np
import pandas as pd
import pydantic

from .dataset import Category
from .errors import ContractError

UNDEFINED = '—'


class BinaryLabel(str, enum.Enum):
    positive = 'positive'
    negative = 'negative'

    @property
    def rank(self) -> int:
        return 1 if self is BinaryLabel.positive else 0

    def _compare(self, other, op):
        if not isinstance(other, BinaryLabel):
            return NotImplemented
        return op(self.rank, other.rank)

    def __lt__(self, other):
        return self._compare(other, operator.lt)

    def __le__(self, other):
        return self._compare(other, operator.le)

    def __gt__(self, other):
        return self._compare(other, operator.gt)

    def __ge__(self, other):
        return self._compare(other, operator.ge)

    def flipped(self) -> 'BinaryLabel':
        return BinaryLabel.negative if self is BinaryLabel.positive else BinaryLabel.positive


def category_to_binary(category: Category) -> BinaryLabel:
    return BinaryLabel.positive if Category(category) == Category.overlay else BinaryLabel.negative


class ConfusionMatrix(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    tp: pydantic.NonNegativeInt = 0
    fp: pydantic.NonNegativeInt = 0
    fn: pydantic.NonNegativeInt = 0
    tn: pydantic.NonNegativeInt = 0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class MetricReport(pydantic.BaseModel):
    """Precision, recall and accuracy; ``None`` marks an undefined ratio."""

    model_config = pydantic.ConfigDict(frozen=True)

    precision: typing.Optional[float] = pydantic.Field(None, ge=0.0, le=1.0)
    recall: typing.Optional[float] = pydantic.Field(None, ge=0.0, le=1.0)
    accuracy: float = pydantic.Field(ge=0.0, le=1.0)
    matrix: ConfusionMatrix
    n: int

    def formatted(self, digits: int = 2) -> typing.Dict[str, str]:
        return {
            'Precision': format_metric(self.precision, digits),
            'Recall': format_metric(self.recall, digits),
            'Accuracy': format_metric(self.accuracy, digits),
        }


def format_metric(value: typing.Optional[float], digits: int = 2) -> str:
    return UNDEFINED if value is None else f'{value:.{digits}f}'


def _as_flags(labels: typing.Sequence[BinaryLabel]) -> np.ndarray:
    return np.array([BinaryLabel(label) is BinaryLabel.positive for label in labels], dtype=bool)


def confusion(
    predictions: typing.Sequence[BinaryLabel], truths: typing.Sequence[BinaryLabel]
) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise ContractError(
            f'predictions and truths differ in length: {len(predictions)} != {len(truths)}'
        )
    if not predictions:
        raise ContractError('cannot build a confusion matrix from zero samples')
    predicted = _as_flags(predictions)
    expected = _as_flags(truths)
    return ConfusionMatrix(
        tp=int(np.sum(predicted & expected)),
        fp=int(np.sum(predicted & ~expected)),
        fn=int(np.sum(~predicted & expected)),
        tn=int(np.sum(~predicted & ~expected)),
    )


def _ratio(numerator: int, denominator: int) -> typing.Optional[float]:
    return numerator / denominator if denominator else None


def summarize(matrix: ConfusionMatrix) -> MetricReport:
    if matrix.n == 0:
        raise ContractError('cannot summarize an empty confusion matrix')
    return MetricReport(
        precision=_ratio(matrix.tp, matrix.tp + matrix.fp),
        recall=_ratio(matrix.tp, matrix.tp + matrix.fn),
        accuracy=(matrix.tp + matrix.tn) / matrix.n,
        matrix=matrix,
        n=matrix.n,
    )


def positive_rate_by_category(
    predictions: typing.Sequence[BinaryLabel], categories: typing.Sequence[Category]
) -> typing.Dict[str, float]:
    """Fraction of images flagged as overlay, per ground-truth category.

    For ``natural`` and ``none`` this is the false-positive rate on that kind of
    image; for ``overlay`` it is the recall.
    """
    if len(predictions) != len(categories):
        raise ContractError('predictions and categories differ in length')
    frame = pd.DataFrame(
        {
            'category': [Category(c).value for c in categories],
            'flagged': _as_flags(predictions),
        }
    )
    rates = frame.groupby('category', sort=False)['flagged'].mean()
    return {c.value: float(rates[c.value]) for c in Category if c.value in rates.index}
