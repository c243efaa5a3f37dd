import pytest

from overlaydetect.errors import VerdictError
from overlaydetect.metrics import BinaryLabel
from overlaydetect.parsers import parse_short_answer, parse_verdict

P, N = BinaryLabel.positive, BinaryLabel.negative


@pytest.mark.parametrize(
    'text, label, overlay_texts',
    [
        ("ANSWER: yes\nOVERLAY: ['SALE', '50% OFF']", P, ['SALE', '50% OFF']),
        ('ANSWER: no\nOVERLAY: []', N, []),
        ('answer: No', N, []),
        ('ANSWER:yes', P, []),
        ('Composited banner.\nANSWER: YES\nOVERLAY: [SALE, BUY NOW]', P, ['SALE', 'BUY NOW']),
        ("ANSWER: no\nOVERLAY: ['leftover']", N, []),
        ("ANSWER: no\nANSWER: yes\nOVERLAY: ['SALE']", N, []),
        ('**Answer**: yes', None, None),
        ('ANSWER: yes\noverlay: ["Breaking News", "LIVE"]', P, ['Breaking News', 'LIVE']),
        ('My answer: after checking the borders.\nANSWER: no\nOVERLAY: []', N, []),
        ("I examined it. ANSWER: Yes. OVERLAY: ['50% OFF','TODAY']", P, ['50% OFF', 'TODAY']),
    ],
)
def test_parse_verdict(text, label, overlay_texts):
    if label is None:
        with pytest.raises(VerdictError):
            parse_verdict(text)
        return
    assert parse_verdict(text) == (label, overlay_texts)


@pytest.mark.parametrize(
    'text, message',
    [
        ('I think the image has a caption, so yes.', 'no ANSWER marker'),
        ('ANSWER: maybe', "'maybe' is not yes or no"),
        ('', 'no ANSWER marker'),
        (None, 'not text'),
    ],
)
def test_parse_verdict_errors(text, message):
    with pytest.raises(VerdictError, match=message) as excinfo:
        parse_verdict(text)
    if isinstance(text, str):
        assert excinfo.value.raw == text


@pytest.mark.parametrize(
    'text, label, overlay_texts',
    [
        ('yes', P, []),
        ('Yes.', P, []),
        ('  no, the text is printed on the shop sign', N, []),
        ("ANSWER: yes\nOVERLAY: ['WIN']", P, ['WIN']),
        ('No. The text is physically part of the scene.', N, []),
    ],
)
def test_parse_short_answer(text, label, overlay_texts):
    assert parse_short_answer(text) == (label, overlay_texts)


@pytest.mark.parametrize('text', ['yesterday I saw a sign', 'Maybe', '', '...'])
def test_parse_short_answer_errors(text):
    with pytest.raises(VerdictError) as excinfo:
        parse_short_answer(text)
    assert excinfo.value.raw == text
