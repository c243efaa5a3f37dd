import pytest

from overlaydetect.parsers.utilities import (
    extract_attr_with_regex,
    parse_bracketed_list,
    split_numbered_item,
)


@pytest.mark.parametrize(
    'body, expected',
    [
        ("'SALE', '50% OFF'", ['SALE', '50% OFF']),
        ('"Breaking News"', ['Breaking News']),
        ('SALE, BUY NOW', ['SALE', 'BUY NOW']),
        ("'SALE', BUY NOW", ['SALE', 'BUY NOW']),
        ('', []),
        ("' ', 'WIN'", ['WIN']),
    ],
)
def test_parse_bracketed_list(body, expected):
    assert parse_bracketed_list(body) == expected


@pytest.mark.parametrize(
    'line, expected',
    [
        ('1. television screen', (1, 'television screen')),
        ('  12)  red car  ', (12, 'red car')),
        ('3.', (3, '')),
        ('television screen', None),
        ('(none)', None),
    ],
)
def test_split_numbered_item(line, expected):
    assert split_numbered_item(line) == expected


@pytest.mark.parametrize(
    'text, regex, select, expected',
    [
        ('a: 1, a: 22', r'a:\s*(\d+)', 'longest', '22'),
        ('a: 1, a: 22', r'a:\s*(\d+)', 'first', '1'),
        ('nothing here', r'a:\s*(\d+)', 'first', None),
        ('ANSWER: Yes', r'answer:\s*(\w+)', 'first', 'Yes'),
    ],
)
def test_extract_attr_with_regex(text, regex, select, expected):
    assert extract_attr_with_regex(text, regex, select=select) == expected
